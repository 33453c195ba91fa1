#include "casseg/components.hpp"

#include <algorithm>
#include <limits>

namespace casseg {

ComponentLabeling connected_components(const LabelMask& mask) {
  const Dims3 d = mask.dims();
  VolumeT<std::int32_t> raw(d, mask.spacing(), 0);
  std::vector<Component> comps;
  std::vector<std::int64_t> queue;
  const std::int64_t plane = d[1] * d[2];

  for (std::int64_t start = 0; start < mask.size(); ++start) {
    if (mask[start] == 0 || raw[start] != 0) continue;
    Component c;
    c.id = static_cast<int>(comps.size()) + 1;
    constexpr auto kMax = std::numeric_limits<std::int64_t>::max();
    c.bbox = {{kMax, kMax, kMax}, {-1, -1, -1}};
    queue.assign(1, start);
    raw[start] = c.id;
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const std::int64_t i = queue[head];
      const std::int64_t z = i / plane, y = (i / d[2]) % d[1], x = i % d[2];
      ++c.voxels;
      const Dims3 p{z, y, x};
      for (int a = 0; a < 3; ++a) {
        c.bbox.lo[a] = std::min(c.bbox.lo[a], p[a]);
        c.bbox.hi[a] = std::max(c.bbox.hi[a], p[a]);
      }
      auto visit = [&](std::int64_t j) {
        if (mask[j] != 0 && raw[j] == 0) {
          raw[j] = c.id;
          queue.push_back(j);
        }
      };
      if (z > 0) visit(i - plane);
      if (z + 1 < d[0]) visit(i + plane);
      if (y > 0) visit(i - d[2]);
      if (y + 1 < d[1]) visit(i + d[2]);
      if (x > 0) visit(i - 1);
      if (x + 1 < d[2]) visit(i + 1);
    }
    comps.push_back(c);
  }

  std::vector<Component> sorted = comps;
  std::stable_sort(sorted.begin(), sorted.end(), [](const Component& a, const Component& b) {
    if (a.voxels != b.voxels) return a.voxels > b.voxels;
    return a.bbox.lo < b.bbox.lo;
  });
  std::vector<std::int32_t> remap(comps.size() + 1, 0);
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    remap[sorted[k].id] = static_cast<std::int32_t>(k + 1);
    sorted[k].id = static_cast<int>(k + 1);
  }
  for (auto& v : raw.voxels()) v = remap[v];
  return {std::move(raw), std::move(sorted)};
}

LabelMask postprocess_stage(const LabelMask& mask, int keep_k) {
  require(keep_k >= 1, ErrorKind::Misuse, "keep_k must be >= 1");
  const auto cc = connected_components(mask);
  LabelMask out = mask;
  for (std::int64_t i = 0; i < out.size(); ++i)
    if (cc.labels[i] > keep_k) out[i] = kBackground;
  return out;
}

}  // namespace casseg
