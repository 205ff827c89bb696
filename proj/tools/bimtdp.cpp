// bimtdp: data generation, training, evaluation, kernel benchmark and CKA
// analysis for binary multi-task dense predictors.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bimtdp/bench.hpp"
#include "bimtdp/bitcore.hpp"
#include "bimtdp/cka.hpp"
#include "bimtdp/parallel.hpp"
#include "bimtdp/train.hpp"

namespace fs = std::filesystem;
using namespace bimtdp;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string teacher;
  std::string variant;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value run configuration");
  app->add_option("--seed", c.seed, "override train.seed");
  app->add_option("--out", c.out, "override paths.out");
  app->add_option("--teacher", c.teacher, "override paths.teacher");
  app->add_option("--variant", c.variant, "override model.variant")->check(CLI::IsMember({"fp", "a", "b"}));
  app->add_option("--threads", c.threads, "override train.threads");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  if (!c.teacher.empty()) cfg.teacher = c.teacher;
  if (!c.variant.empty()) cfg.spec.variant = parse_variant(c.variant);
  if (c.threads) cfg.threads = *c.threads;
  cfg.validate();
  set_num_threads(cfg.threads);
  return cfg;
}

Dataset require_dataset(const std::string& path, const std::string& what) {
  if (path.empty()) throw std::invalid_argument(what + " dataset path is not set");
  Dataset ds = dataset_read(path);
  if (ds.samples.empty()) throw std::invalid_argument(what + " dataset " + path + " is empty");
  return ds;
}

int cmd_gen_data(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  const std::string train_path = (fs::path(cfg.out) / "train.bin").string();
  const std::string eval_path = (fs::path(cfg.out) / "eval.bin").string();
  dataset_write(train_path, generate_dataset(cfg.seed, cfg.train_count, cfg.synth));
  // Held-out samples come from a disjoint seed stream.
  dataset_write(eval_path, generate_dataset(cfg.seed ^ 0x5eed5eed5eed5eedull, cfg.eval_count, cfg.synth));
  std::cout << "wrote " << train_path << " (" << cfg.train_count << ") and " << eval_path << " ("
            << cfg.eval_count << ")\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  const Dataset train_ds = require_dataset(cfg.train_data, "training");
  std::optional<Dataset> eval_ds;
  if (!cfg.eval_data.empty()) eval_ds = require_dataset(cfg.eval_data, "eval");
  fs::create_directories(cfg.out);
  Model model(cfg.spec, cfg.seed);
  std::optional<Model> teacher_model;
  Teacher teacher;
  if (cfg.kd && !cfg.teacher.empty()) {
    teacher_model.emplace(teacher_spec(cfg.spec), cfg.seed);
    load_checkpoint(cfg.teacher, *teacher_model);
    teacher.model = &*teacher_model;
    teacher.taps = default_kd_taps(*teacher_model);
  }
  std::ofstream log((fs::path(cfg.out) / "metrics.jsonl").string(), std::ios::trunc);
  const std::string ckpt = (fs::path(cfg.out) / "checkpoint.bin").string();
  const EvalMetrics m = train(model, train_ds, eval_ds ? &*eval_ds : nullptr, cfg, log, ckpt, teacher);
  std::cout << metrics_json(cfg.epochs, "final", nullptr, eval_ds ? &m : nullptr) << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data) {
  const Dataset ds = require_dataset(data.empty() ? cfg.eval_data : data, "eval");
  Model model(cfg.spec, cfg.seed);
  load_checkpoint(checkpoint, model);
  const EvalMetrics m = evaluate(model, ds);
  const ParamAudit audit = model.parameter_audit();
  const CostTally cost = model.cost(ds.h, ds.w);
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(metrics_json(0, "eval", nullptr, &m));
  j.erase("epoch");
  j["variant"] = variant_name(cfg.spec.variant);
  j["params_fp"] = audit.fp;
  j["params_binary"] = audit.binary;
  j["memory_footprint_bytes"] = memory_footprint(audit.fp, audit.binary);
  j["fp_macs"] = cost.fp_macs;
  j["binary_macs"] = cost.binary_ops;
  j["ops_estimate"] = ops_estimate(cost.fp_macs, cost.binary_ops);
  fs::create_directories(cfg.out);
  std::ofstream((fs::path(cfg.out) / "eval.json").string()) << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_bench(const std::vector<std::size_t>& sizes, std::size_t reps, const std::string& out) {
  std::ostringstream csv;
  csv << bench_csv_header() << "\n";
  for (std::size_t s : sizes) csv << bench_csv_row(bench_gemm(s, reps)) << "\n";
  std::cout << "# speedup and memory_ratio are measured; op_count_ratio_convention is the\n"
               "# 64-ops-per-word accounting of ops_estimate, not a measurement.\n"
            << csv.str();
  if (!out.empty()) std::ofstream(out) << csv.str();
  return 0;
}

int cmd_cka(const RunConfig& cfg, const std::string& checkpoint, const std::string& data,
            std::vector<std::string> taps, std::size_t samples) {
  const Dataset ds = require_dataset(data.empty() ? cfg.eval_data : data, "analysis");
  Model model(cfg.spec, cfg.seed);
  if (!checkpoint.empty()) load_checkpoint(checkpoint, model);
  if (taps.empty()) taps = model.tap_ids();
  const CKAMatrix mat = cka_heatmap(model, ds, taps, samples);
  fs::create_directories(cfg.out);
  const std::string path = (fs::path(cfg.out) / "cka.csv").string();
  std::ofstream(path) << cka_csv(mat);
  std::cout << cka_csv(mat);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"binary multi-task dense prediction toolkit"};
  app.require_subcommand(1);

  Common c_gen, c_train, c_eval, c_cka;
  auto* gen = app.add_subcommand("gen-data", "write synthetic train.bin / eval.bin into --out");
  add_common(gen, c_gen);

  auto* tr = app.add_subcommand("train", "train a model; writes metrics.jsonl and checkpoint.bin");
  add_common(tr, c_train);

  std::string eval_ckpt, eval_data;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, c_eval);
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--data", eval_data, "dataset file (default data.eval)");

  std::vector<std::size_t> sizes{64, 256, 1024};
  std::size_t reps = 5;
  std::string bench_out;
  std::size_t bench_threads = 1;
  auto* be = app.add_subcommand("bench", "binary vs scalar FP GEMM");
  be->add_option("--sizes", sizes, "square GEMM sizes")->delimiter(',');
  be->add_option("--reps", reps, "repetitions per size (median reported)");
  be->add_option("--out", bench_out, "CSV output file");
  be->add_option("--threads", bench_threads, "worker threads");

  std::string cka_ckpt, cka_data;
  std::vector<std::string> cka_taps;
  std::size_t cka_samples = 128;
  auto* ck = app.add_subcommand("analyze-cka", "pairwise CKA heat map of tapped activations");
  add_common(ck, c_cka);
  ck->add_option("--checkpoint", cka_ckpt, "checkpoint file (default: untrained weights)");
  ck->add_option("--data", cka_data, "dataset file (default data.eval)");
  ck->add_option("--taps", cka_taps, "tap ids (default: all)")->delimiter(',');
  ck->add_option("--samples", cka_samples, "sample count m");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*gen) return cmd_gen_data(resolve(c_gen));
    if (*tr) return cmd_train(resolve(c_train));
    if (*ev) return cmd_eval(resolve(c_eval), eval_ckpt, eval_data);
    if (*be) {
      set_num_threads(bench_threads);
      return cmd_bench(sizes, reps, bench_out);
    }
    if (*ck) return cmd_cka(resolve(c_cka), cka_ckpt, cka_data, cka_taps, cka_samples);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
