#include "bimtdp/synth.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

#include "bimtdp/parallel.hpp"

namespace bimtdp {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'B', 'M', 'T', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kHeaderBytes = 4 + 4 + 8 + 4 + 4 + 4;
constexpr double kBackgroundDepth = 6.0;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::array<double, 3> palette(std::size_t k, std::size_t classes) {
  // Evenly spaced hues at fixed saturation / value.
  const double hue = 6.0 * static_cast<double>(k) / static_cast<double>(classes);
  const int sector = static_cast<int>(hue) % 6;
  const double f = hue - std::floor(hue);
  const double v = 0.9, s = 0.7;
  const double p = v * (1 - s), q = v * (1 - s * f), r = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, r, p};
    case 1: return {q, v, p};
    case 2: return {p, v, r};
    case 3: return {p, q, v};
    case 4: return {r, p, v};
    default: return {v, p, q};
  }
}

struct Shape2D {
  bool ellipse;
  double cx, cy, rx, ry, angle;
  double c, a, b;  // depth plane d = c + a*u + b*v
  std::array<double, 3> albedo;

  bool contains(double u, double v) const {
    const double du = u - cx, dv = v - cy;
    const double cs = std::cos(angle), sn = std::sin(angle);
    const double x = (cs * du + sn * dv) / rx, y = (-sn * du + cs * dv) / ry;
    return ellipse ? x * x + y * y <= 1.0 : std::abs(x) <= 1.0 && std::abs(y) <= 1.0;
  }
};

// Pixel centres mapped to [-1, 1].
double coord(std::size_t i, std::size_t n) {
  return (static_cast<double>(i) + 0.5) / static_cast<double>(n) * 2.0 - 1.0;
}

void put_u32(std::string& b, std::uint32_t v) { b.append(reinterpret_cast<const char*>(&v), 4); }

template <class T>
void put_vec(std::string& b, const std::vector<T>& v) {
  b.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
}

template <class T>
void take_vec(const char*& p, std::vector<T>& v, std::size_t n) {
  v.resize(n);
  std::memcpy(v.data(), p, n * sizeof(T));
  p += n * sizeof(T);
}

}  // namespace

void SynthConfig::validate() const {
  if (height < 16 || width < 16) throw std::invalid_argument("synth: H and W must be >= 16");
  if (classes < 2 || classes > 254) throw std::invalid_argument("synth: classes must be in [2, 254]");
  if (color_mix < 0.0 || color_mix > 1.0) throw std::invalid_argument("synth: color_mix must be in [0, 1]");
  if (noise < 0.0) throw std::invalid_argument("synth: noise must be >= 0");
}

std::vector<std::uint8_t> seg_boundaries(const std::vector<std::uint8_t>& seg, std::size_t h,
                                         std::size_t w) {
  std::vector<std::uint8_t> b(h * w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::uint8_t id = seg[y * w + x];
      const bool edge = (y > 0 && seg[(y - 1) * w + x] != id) ||
                        (y + 1 < h && seg[(y + 1) * w + x] != id) ||
                        (x > 0 && seg[y * w + x - 1] != id) ||
                        (x + 1 < w && seg[y * w + x + 1] != id);
      b[y * w + x] = edge ? 1 : 0;
    }
  }
  return b;
}

SceneSample generate_scene(std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.height, w = cfg.width, hw = h * w, k = cfg.classes;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto U = [&](double lo, double hi) { return lo + (hi - lo) * uni(rng); };

  std::vector<Shape2D> shapes;
  std::vector<int> owner(hw, -1);
  const std::size_t min_pixels = static_cast<std::size_t>(std::ceil(0.01 * static_cast<double>(hw)));
  for (int attempt = 0;; ++attempt) {
    if (attempt == 1000) throw std::runtime_error("synth: could not place visible shapes");
    shapes.clear();
    if (!cfg.background_only) {
      for (std::size_t c = 1; c < k; ++c) {
        Shape2D s;
        s.ellipse = c % 2 == 0;
        s.cx = U(-0.7, 0.7);
        s.cy = U(-0.7, 0.7);
        s.rx = U(0.15, 0.45);
        s.ry = U(0.15, 0.45);
        s.angle = U(0.0, 3.14159265358979);
        // Nearer classes get lower base depth; tilt is random.
        s.c = 1.5 + 3.0 * static_cast<double>(c - 1) / static_cast<double>(k - 1) + U(0.0, 0.5);
        s.a = U(-0.6, 0.6);
        s.b = U(-0.6, 0.6);
        const auto base = palette(c, k);
        const std::array<double, 3> rnd{U(0.1, 0.9), U(0.1, 0.9), U(0.1, 0.9)};
        for (int ch = 0; ch < 3; ++ch) s.albedo[ch] = (1 - cfg.color_mix) * base[ch] + cfg.color_mix * rnd[ch];
        shapes.push_back(s);
      }
    }
    std::vector<double> zbuf(hw, kBackgroundDepth);
    std::fill(owner.begin(), owner.end(), -1);
    std::vector<std::size_t> area(k, 0);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double u = coord(x, w), v = coord(y, h);
        for (std::size_t i = 0; i < shapes.size(); ++i) {
          if (!shapes[i].contains(u, v)) continue;
          const double d = shapes[i].c + shapes[i].a * u + shapes[i].b * v;
          if (d < zbuf[y * w + x]) {
            zbuf[y * w + x] = d;
            owner[y * w + x] = static_cast<int>(i);
          }
        }
      }
    }
    bool ok = true;
    for (int o : owner) area[o < 0 ? 0 : static_cast<std::size_t>(o) + 1]++;
    for (std::size_t c = 1; c < k && !cfg.background_only; ++c) ok = ok && area[c] >= min_pixels;
    if (ok) break;
  }

  SceneSample s;
  s.h = h;
  s.w = w;
  s.image.resize(3 * hw);
  s.seg.resize(hw);
  s.depth.resize(hw);
  s.normal.resize(3 * hw);
  const auto bg = palette(0, k);
  const double ln = std::sqrt(0.3 * 0.3 + 0.4 * 0.4 + 1.0);
  const std::array<double, 3> light{0.3 / ln, -0.4 / ln, 1.0 / ln};
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      const double u = coord(x, w), v = coord(y, h);
      const int o = owner[p];
      double d = kBackgroundDepth, a = 0.0, b = 0.0;
      std::array<double, 3> albedo = bg;
      if (o >= 0) {
        const Shape2D& sh = shapes[static_cast<std::size_t>(o)];
        d = sh.c + sh.a * u + sh.b * v;
        a = sh.a;
        b = sh.b;
        albedo = sh.albedo;
      }
      const double norm = std::sqrt(a * a + b * b + 1.0);
      const std::array<double, 3> n{-a / norm, -b / norm, 1.0 / norm};
      s.seg[p] = static_cast<std::uint8_t>(o < 0 ? 0 : o + 1);
      s.depth[p] = static_cast<float>(d);
      for (int c = 0; c < 3; ++c) s.normal[c * hw + p] = static_cast<float>(n[c]);
      const double shade = 0.35 + 0.65 * std::max(0.0, n[0] * light[0] + n[1] * light[1] + n[2] * light[2]);
      const double fog = 1.0 - 0.05 * d;
      for (int c = 0; c < 3; ++c) {
        const double val = albedo[c] * shade * fog + cfg.noise * gauss(rng);
        s.image[c * hw + p] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  s.boundary = seg_boundaries(s.seg, h, w);
  return s;
}

Dataset generate_dataset(std::uint64_t seed, std::size_t count, const SynthConfig& cfg) {
  cfg.validate();
  Dataset ds{cfg.height, cfg.width, cfg.classes, std::vector<SceneSample>(count)};
  parallel_for(0, count, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) ds.samples[i] = generate_scene(splitmix(seed ^ splitmix(i)), cfg);
  });
  return ds;
}

std::uint64_t dataset_file_bytes(std::size_t count, std::size_t h, std::size_t w) {
  return kHeaderBytes + static_cast<std::uint64_t>(count) * (30ull * h * w + 4);
}

void dataset_write(const std::string& path, const Dataset& ds) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("dataset_write: cannot open " + path);
  std::string head(kMagic, 4);
  put_u32(head, kVersion);
  const std::uint64_t n = ds.samples.size();
  head.append(reinterpret_cast<const char*>(&n), 8);
  put_u32(head, static_cast<std::uint32_t>(ds.h));
  put_u32(head, static_cast<std::uint32_t>(ds.w));
  put_u32(head, static_cast<std::uint32_t>(ds.classes));
  f.write(head.data(), static_cast<std::streamsize>(head.size()));
  const std::size_t hw = ds.h * ds.w;
  for (const auto& s : ds.samples) {
    if (s.h != ds.h || s.w != ds.w || s.image.size() != 3 * hw || s.seg.size() != hw ||
        s.depth.size() != hw || s.normal.size() != 3 * hw || s.boundary.size() != hw) {
      throw std::invalid_argument("dataset_write: sample does not match the dataset dimensions");
    }
    std::string body;
    put_vec(body, s.image);
    put_vec(body, s.seg);
    put_vec(body, s.depth);
    put_vec(body, s.normal);
    put_vec(body, s.boundary);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    put_u32(body, crc);
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
  }
  if (!f) throw std::runtime_error("dataset_write: write failed for " + path);
}

Dataset dataset_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("dataset_read: cannot open " + path);
  char head[kHeaderBytes];
  if (!f.read(head, kHeaderBytes)) throw std::runtime_error("dataset_read: truncated header in " + path);
  if (std::memcmp(head, kMagic, 4) != 0) throw std::runtime_error("dataset_read: bad magic in " + path);
  std::uint32_t version, h, w, k;
  std::uint64_t n;
  std::memcpy(&version, head + 4, 4);
  if (version != kVersion) {
    throw std::runtime_error("dataset_read: unsupported version " + std::to_string(version));
  }
  std::memcpy(&n, head + 8, 8);
  std::memcpy(&h, head + 16, 4);
  std::memcpy(&w, head + 20, 4);
  std::memcpy(&k, head + 24, 4);
  if (h == 0 || w == 0 || h > 65536 || w > 65536) throw std::runtime_error("dataset_read: bad dimensions");
  const std::size_t hw = static_cast<std::size_t>(h) * w, sample_bytes = 30 * hw + 4;
  Dataset ds{h, w, k, {}};
  std::vector<char> buf(sample_bytes);
  for (std::uint64_t i = 0; i < n; ++i) {
    if (!f.read(buf.data(), static_cast<std::streamsize>(sample_bytes))) {
      throw std::runtime_error("dataset_read: truncated at sample " + std::to_string(i) + " of " +
                               std::to_string(n));
    }
    std::uint32_t stored;
    std::memcpy(&stored, buf.data() + sample_bytes - 4, 4);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(sample_bytes - 4)));
    if (crc != stored) throw std::runtime_error("dataset_read: checksum mismatch at sample " + std::to_string(i));
    SceneSample s;
    s.h = h;
    s.w = w;
    const char* p = buf.data();
    take_vec(p, s.image, 3 * hw);
    take_vec(p, s.seg, hw);
    take_vec(p, s.depth, hw);
    take_vec(p, s.normal, 3 * hw);
    take_vec(p, s.boundary, hw);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  const std::size_t n = indices.size(), h = ds.h, w = ds.w, hw = h * w;
  Batch b{Tensor({n, 3, h, w}), ClassMap{n, h, w, std::vector<std::uint8_t>(n * hw)},
          Tensor({n, 1, h, w}), Tensor({n, 3, h, w}), Tensor({n, 1, h, w})};
  for (std::size_t i = 0; i < n; ++i) {
    const SceneSample& s = ds.samples.at(indices[i]);
    std::copy(s.image.begin(), s.image.end(), b.images.data() + i * 3 * hw);
    std::copy(s.seg.begin(), s.seg.end(), b.seg.ids.begin() + static_cast<std::ptrdiff_t>(i * hw));
    std::copy(s.depth.begin(), s.depth.end(), b.depth.data() + i * hw);
    std::copy(s.normal.begin(), s.normal.end(), b.normal.data() + i * 3 * hw);
    std::copy(s.boundary.begin(), s.boundary.end(), b.boundary.data() + i * hw);
  }
  return b;
}

}  // namespace bimtdp
