#pragma once

#include <cstdint>
#include <vector>

#include "casseg/volume.hpp"

namespace casseg {

struct Component {
  int id = 0;  // 1-based rank in the sorted order
  std::int64_t voxels = 0;
  Box3 bbox;
};

struct ComponentLabeling {
  VolumeT<std::int32_t> labels;  // 0 background, otherwise Component::id
  std::vector<Component> components;
};

// 6-connected labelling of the non-zero voxels. Components are sorted by
// voxel count (descending), ties broken by the bounding-box origin in
// (z, y, x) order, and numbered 1..K in that order.
ComponentLabeling connected_components(const LabelMask& mask);

// Zeroes every foreground voxel outside the keep_k largest components of the
// binarised foreground; retained voxels keep their labels.
LabelMask postprocess_stage(const LabelMask& mask, int keep_k);

}  // namespace casseg
