#pragma once

#include <functional>
#include <span>
#include <vector>

#include "casseg/nets.hpp"
#include "casseg/volume.hpp"

namespace casseg {

// Multi-channel image on one grid, layout (channel, z, y, x).
struct ChannelStack {
  int channels = 0;
  Dims3 dims{0, 0, 0};
  std::vector<float> data;

  static ChannelStack from_volumes(std::span<const Volume> volumes);
  static ChannelStack from_volume(const Volume& v) { return from_volumes(std::span<const Volume>(&v, 1)); }

  // Copies the window starting at `origin` (may be negative / overhang),
  // zero-filling outside the grid, into (1, channels, size) tensor storage.
  std::vector<float> window(const Dims3& origin, const Dims3& size) const;
};

// Per-class probabilities, layout (class, z, y, x).
struct ProbMap {
  int classes = 0;
  Dims3 dims{0, 0, 0};
  std::vector<float> data;

  float at(int c, std::int64_t voxel) const { return data[static_cast<std::size_t>(c * voxel_count(dims) + voxel)]; }
};

enum class TileWeighting { Uniform, Gaussian };

// Maps a (1, C, patch) input window to (1, K, patch) class probabilities.
using TilePredictor = std::function<nn::Tensor<float>(const nn::Tensor<float>&)>;

// Tile start positions along one axis: stride max(1, floor(patch * (1 - overlap))),
// the final tile clamped to end at the boundary.
std::vector<std::int64_t> tile_starts(std::int64_t dim, std::int64_t patch, double overlap);

// Tiles the input (zero-padded to at least one patch per axis), accumulates
// weighted probabilities and normalises by the accumulated weight.
ProbMap sliding_window_infer(const TilePredictor& predictor, const ChannelStack& input, const Dims3& patch,
                             double overlap_frac, TileWeighting weighting = TileWeighting::Uniform);

// Network form: softmax of the finest output head.
ProbMap sliding_window_infer(const Network<float>& net, const ChannelStack& input, double overlap_frac,
                             TileWeighting weighting = TileWeighting::Uniform);

// Voxel-wise mean of probability maps.
ProbMap ensemble(std::span<const ProbMap> maps);

// Most probable class per voxel; ties go to the lower class index.
LabelMask argmax(const ProbMap& probs, const Spacing3& spacing);

}  // namespace casseg
