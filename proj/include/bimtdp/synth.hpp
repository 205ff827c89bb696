#pragma once

// Procedural planar scenes with exactly aligned segmentation, depth, surface
// normal and boundary labels, plus a little-endian binary container for them.
//
// File layout:
//   "BMTD" | u32 version | u64 count | u32 H | u32 W | u32 classes
//   per sample: f32 image[3HW] | u8 seg[HW] | f32 depth[HW] | f32 normal[3HW]
//               | u8 boundary[HW] | u32 crc32(of the preceding sample bytes)

#include <cstdint>
#include <string>
#include <vector>

#include "bimtdp/tasks.hpp"

namespace bimtdp {

struct SynthConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t classes = 5;
  /// 0 gives pure class colors; 1 gives colors unrelated to the class.
  double color_mix = 0.5;
  double noise = 0.03;
  /// When set, only the background plane is rendered.
  bool background_only = false;

  void validate() const;
};

struct SceneSample {
  std::size_t h = 0, w = 0;
  std::vector<float> image;            // 3 x H x W, in [0, 1]
  std::vector<std::uint8_t> seg;       // H x W
  std::vector<float> depth;            // H x W, > 0
  std::vector<float> normal;           // 3 x H x W, unit length
  std::vector<std::uint8_t> boundary;  // H x W, {0, 1}

  bool operator==(const SceneSample&) const = default;
};

struct Dataset {
  std::size_t h = 0, w = 0, classes = 0;
  std::vector<SceneSample> samples;
};

/// Background plane plus classes - 1 tilted rectangles / ellipses, one per
/// foreground class, z-buffered. Shapes are redrawn until every class covers at
/// least 1% of the image.
SceneSample generate_scene(std::uint64_t seed, const SynthConfig& cfg);

/// Sample i uses seed mix(seed, i); generation is split across threads.
Dataset generate_dataset(std::uint64_t seed, std::size_t count, const SynthConfig& cfg);

/// 1 where any 4-neighbour carries a different id.
std::vector<std::uint8_t> seg_boundaries(const std::vector<std::uint8_t>& seg, std::size_t h,
                                         std::size_t w);

std::uint64_t dataset_file_bytes(std::size_t count, std::size_t h, std::size_t w);
void dataset_write(const std::string& path, const Dataset& ds);
Dataset dataset_read(const std::string& path);

/// Dense training tensors for a subset of samples.
struct Batch {
  Tensor images;    // N x 3 x H x W
  ClassMap seg;
  Tensor depth;     // N x 1 x H x W
  Tensor normal;    // N x 3 x H x W
  Tensor boundary;  // N x 1 x H x W
};

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices);

}  // namespace bimtdp
