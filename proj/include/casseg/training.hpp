#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "casseg/inference.hpp"
#include "casseg/losses.hpp"
#include "casseg/nets.hpp"
#include "casseg/preprocess.hpp"

namespace casseg {

struct TrainConfig {
  int stage = 1;
  int batch_size = 2;
  double lr = 3e-4;
  int max_steps = 1000;
  double fg_oversample_prob = 0.33;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables intermediate checkpoints
  std::filesystem::path checkpoint_path;
  LossConfig loss;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

// One training volume: prepared (normalised) input channels and its target.
struct TrainingCase {
  ChannelStack input;
  LabelMask target;
};

struct TrainResult {
  std::vector<double> loss_trace;  // one entry per executed step
  int steps = 0;
};

// Adam with constant learning rate over every parameter of a store.
class Adam {
 public:
  Adam(ParameterStore<float>& params, double lr, double beta1, double beta2, double eps);
  void step();
  std::int64_t steps_taken() const { return t_; }

 private:
  ParameterStore<float>* params_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Samples patches, runs forward/backward and Adam updates in place on `net`.
// Stage 1 optimises combined_loss on the finest output; stage 2 the
// deep-supervision loss over every head. A non-finite loss aborts with a
// numeric error before the parameters are touched.
TrainResult train_stage(const TrainConfig& cfg, Network<float>& net, std::span<const TrainingCase> data);

// Patch origin for sampling: uniform, or centred on a foreground voxel.
// Axes shorter than the patch get a fixed centred (negative) origin.
Dims3 sample_patch_origin(const TrainingCase& c, const Dims3& patch, bool foreground, std::mt19937_64& rng);

// Stage-1 case: doubled-slice-spacing, normalised image; binary target.
TrainingCase make_stage1_case(const Volume& image, const LabelMask& mask, const DatasetStats& stats);

// Ground-truth boxes used for stage-2 training crops.
std::vector<Box3> stage2_training_boxes(const LabelMask& mask, const Spacing3& margin_mm, double jitter_frac,
                                        std::mt19937_64& rng);

// Stage-2 cases, one per ground-truth organ box: normalised image crop plus a
// prior channel simulating the stage-1 mask (ground-truth foreground taken
// through the stage-1 grid and back with nearest interpolation).
std::vector<TrainingCase> make_stage2_cases(const Volume& image, const LabelMask& mask, const DatasetStats& stats,
                                            const std::vector<Box3>& boxes);

// The stage-1 grid round trip used as the stage-2 training prior.
LabelMask simulated_prior(const LabelMask& mask);

}  // namespace casseg
