#include "bimtdp/cka.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "bimtdp/distill.hpp"
#include "bimtdp/parallel.hpp"

namespace bimtdp {

namespace {

Eigen::MatrixXd centered(const Eigen::MatrixXd& k) {
  const Eigen::RowVectorXd col_mean = k.colwise().mean();
  const Eigen::VectorXd row_mean = k.rowwise().mean();
  const double all = k.mean();
  Eigen::MatrixXd c = k;
  c.rowwise() -= col_mean;
  c.colwise() -= row_mean;
  c.array() += all;
  return c;
}

struct Prepared {
  Eigen::MatrixXd kc;
  double self = 0.0;
  bool degenerate = false;
};

Prepared prepare(const ActivationMatrix& x) {
  if (x.rows() < 2) throw std::invalid_argument("cka: need at least 2 samples");
  if (!x.allFinite()) throw std::invalid_argument("cka: non-finite activations");
  Prepared p;
  const Eigen::MatrixXd k = gram(x);
  p.kc = centered(k);
  const double m1 = static_cast<double>(x.rows() - 1);
  p.self = p.kc.squaredNorm() / (m1 * m1);
  // Centering a constant Gram leaves only rounding noise.
  const double scale = k.squaredNorm() / (m1 * m1);
  p.degenerate = !(p.self > 1e-24 * scale) || p.self == 0.0;
  return p;
}

double pair_score(const Prepared& a, const Prepared& b, double m1) {
  const double cross = (a.kc.array() * b.kc.array()).sum() / (m1 * m1);
  return cross / std::sqrt(a.self * b.self);
}

}  // namespace

Eigen::MatrixXd gram(const ActivationMatrix& x) { return x * x.transpose(); }

double hsic(const Eigen::MatrixXd& k, const Eigen::MatrixXd& l) {
  if (k.rows() != k.cols() || l.rows() != l.cols() || k.rows() != l.rows()) {
    throw std::invalid_argument("hsic: K and L must be square and of equal size");
  }
  if (k.rows() < 2) throw std::invalid_argument("hsic: need m >= 2");
  const double m1 = static_cast<double>(k.rows() - 1);
  return (centered(k).array() * centered(l).array()).sum() / (m1 * m1);
}

double cka(const ActivationMatrix& x, const ActivationMatrix& y) {
  if (x.rows() != y.rows()) throw std::invalid_argument("cka: sample counts differ");
  const Prepared a = prepare(x), b = prepare(y);
  if (a.degenerate || b.degenerate) throw DegenerateActivations("cka: zero self-HSIC (constant activations)");
  return pair_score(a, b, static_cast<double>(x.rows() - 1));
}

CKAMatrix cka_matrix(const std::vector<std::string>& names,
                     const std::vector<ActivationMatrix>& activations) {
  if (names.size() != activations.size()) throw std::invalid_argument("cka_matrix: names / activations mismatch");
  const std::size_t n = names.size();
  std::vector<Prepared> prep(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (activations[i].rows() != activations.front().rows()) {
      throw std::invalid_argument("cka_matrix: tap '" + names[i] + "' has a different sample count");
    }
    prep[i] = prepare(activations[i]);
  }
  CKAMatrix out{names, std::vector<std::optional<double>>(n * n)};
  if (n == 0) return out;
  const double m1 = static_cast<double>(activations.front().rows() - 1);
  parallel_for(0, n, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        if (prep[i].degenerate || prep[j].degenerate) continue;
        const double s = i == j ? 1.0 : pair_score(prep[i], prep[j], m1);
        out.scores[i * n + j] = s;
        out.scores[j * n + i] = s;
      }
    }
  });
  return out;
}

std::vector<ActivationMatrix> collect_activations(const Model& model, const Dataset& ds,
                                                  const std::vector<std::string>& taps,
                                                  std::size_t m, std::size_t batch) {
  if (m > ds.samples.size()) {
    throw std::invalid_argument("cka: requested " + std::to_string(m) + " samples, dataset has " +
                                std::to_string(ds.samples.size()));
  }
  std::vector<ActivationMatrix> acts(taps.size());
  std::vector<std::string> unique;
  for (const auto& id : taps) {
    if (std::find(unique.begin(), unique.end(), id) == unique.end()) unique.push_back(id);
  }
  for (std::size_t start = 0; start < m; start += batch) {
    const std::size_t stop = std::min(m, start + batch);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto feats = capture_taps(model, unique, make_batch(ds, idx).images);
    for (std::size_t k = 0; k < taps.size(); ++k) {
      // capture_taps returns graph order; look the tap up by name.
      const Tensor* v = nullptr;
      for (const auto& f : feats) {
        if (f.first == taps[k]) v = &f.second;
      }
      const std::size_t per = v->size() / idx.size();
      if (start == 0) acts[k].resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(per));
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < per; ++c) {
          acts[k](static_cast<Eigen::Index>(start + r), static_cast<Eigen::Index>(c)) = (*v)[r * per + c];
        }
      }
    }
  }
  return acts;
}

CKAMatrix cka_heatmap(const Model& model, const Dataset& ds, const std::vector<std::string>& taps,
                      std::size_t m) {
  return cka_matrix(taps, collect_activations(model, ds, taps, m));
}

std::string cka_csv(const CKAMatrix& mat) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "tap";
  for (const auto& n : mat.names) os << "," << n;
  os << "\n";
  for (std::size_t i = 0; i < mat.size(); ++i) {
    os << mat.names[i];
    for (std::size_t j = 0; j < mat.size(); ++j) {
      os << ",";
      if (mat.at(i, j)) os << *mat.at(i, j);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace bimtdp
