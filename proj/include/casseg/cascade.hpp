#pragma once

#include <span>
#include <vector>

#include "casseg/inference.hpp"
#include "casseg/nets.hpp"
#include "casseg/preprocess.hpp"
#include "casseg/volume.hpp"

namespace casseg {

// Bounding box dilated by round(margin / spacing) voxels per side, clamped to the grid.
Box3 roi_box(const Box3& bbox, const Spacing3& margin_lo_mm, const Spacing3& margin_hi_mm, const Spacing3& spacing,
             const Dims3& dims);
inline Box3 roi_box(const Box3& bbox, const Spacing3& margin_mm, const Spacing3& spacing, const Dims3& dims) {
  return roi_box(bbox, margin_mm, margin_mm, spacing, dims);
}

struct RoiCrop {
  Box3 box;               // inclusive bounds in the original grid
  Volume image_crop;      // raw intensities of the source volume inside box
  LabelMask prior_crop;   // upsampled stage-1 foreground inside box (0/1)
  int source_component_id = 0;
};

// One ROI per component of the (postprocessed) low-resolution stage-1 mask.
std::vector<RoiCrop> extract_rois(const LabelMask& stage1_mask_lowres, const Volume& orig_vol,
                                  const Spacing3& margin_mm);

struct RoiPrediction {
  Box3 box;
  ProbMap probs;     // over the box extent
  LabelMask labels;  // postprocessed argmax over the box extent
};

// Writes each ROI's labels into a background canvas. Where boxes overlap the
// ROI with the higher tumor probability wins, then the higher kidney
// probability, then the earlier ROI.
LabelMask restore_to_original(std::span<const RoiPrediction> rois, const Dims3& dims, const Spacing3& spacing);

struct CascadeConfig {
  Spacing3 margin_mm{16.0f, 16.0f, 16.0f};
  int stage1_keep_k = 2;
  int stage2_keep_k = 1;
  double overlap_frac = 0.5;
  TileWeighting weighting = TileWeighting::Uniform;

  void validate() const;
};

struct CascadeOutput {
  LabelMask stage1_mask_lowres;
  std::vector<RoiCrop> roi_list;
  std::vector<RoiPrediction> stage2;
  LabelMask final_mask;
};

// Full two-stage inference on one raw volume. Errors are re-raised with the
// failing stage named.
CascadeOutput run_cascade(std::span<const Network<float>> stage1_nets, std::span<const Network<float>> stage2_nets,
                          const Volume& vol, const DatasetStats& stage1_stats, const DatasetStats& stage2_stats,
                          const CascadeConfig& cfg = {});

// Stage-2 input channels for one ROI: normalised crop and prior.
ChannelStack stage2_input(const RoiCrop& roi, const DatasetStats& stage2_stats);

}  // namespace casseg
