#include "casseg/cascade.hpp"

#include <algorithm>
#include <cmath>

#include "casseg/components.hpp"

namespace casseg {

Box3 roi_box(const Box3& bbox, const Spacing3& margin_lo_mm, const Spacing3& margin_hi_mm, const Spacing3& spacing,
             const Dims3& dims) {
  Box3 out;
  for (int a = 0; a < 3; ++a) {
    require(margin_lo_mm[a] >= 0.0f && margin_hi_mm[a] >= 0.0f, ErrorKind::Misuse, "ROI margin must be >= 0");
    const auto lo = static_cast<std::int64_t>(std::lround(margin_lo_mm[a] / spacing[a]));
    const auto hi = static_cast<std::int64_t>(std::lround(margin_hi_mm[a] / spacing[a]));
    out.lo[a] = std::max<std::int64_t>(0, bbox.lo[a] - lo);
    out.hi[a] = std::min<std::int64_t>(dims[a] - 1, bbox.hi[a] + hi);
  }
  return out;
}

std::vector<RoiCrop> extract_rois(const LabelMask& stage1_mask_lowres, const Volume& orig_vol,
                                  const Spacing3& margin_mm) {
  const LabelMask up = binarize(resample_to(stage1_mask_lowres, orig_vol.dims(), Interp::Nearest));
  LabelMask prior(orig_vol.dims(), orig_vol.spacing(), std::vector<std::uint8_t>(up.storage()));
  const auto cc = connected_components(prior);
  std::vector<RoiCrop> rois;
  for (const auto& c : cc.components) {
    RoiCrop r;
    r.box = roi_box(c.bbox, margin_mm, orig_vol.spacing(), orig_vol.dims());
    r.image_crop = crop(orig_vol, r.box);
    r.prior_crop = crop(prior, r.box);
    r.source_component_id = c.id;
    rois.push_back(std::move(r));
  }
  return rois;
}

LabelMask restore_to_original(std::span<const RoiPrediction> rois, const Dims3& dims, const Spacing3& spacing) {
  LabelMask out(dims, spacing, kBackground);
  // Winning (tumor, kidney) probabilities per voxel; -1 marks "not yet covered".
  std::vector<std::pair<float, float>> best(static_cast<std::size_t>(voxel_count(dims)), {-1.0f, -1.0f});
  for (const auto& r : rois) {
    const Dims3 ext = r.box.extent();
    require(r.labels.dims() == ext && r.probs.dims == ext, ErrorKind::Shape, "ROI prediction does not match its box");
    require(r.probs.classes >= 3, ErrorKind::Shape, "ROI probabilities need background, kidney and tumor classes");
    for (std::int64_t z = 0; z < ext[0]; ++z)
      for (std::int64_t y = 0; y < ext[1]; ++y)
        for (std::int64_t x = 0; x < ext[2]; ++x) {
          const std::int64_t oz = r.box.lo[0] + z, oy = r.box.lo[1] + y, ox = r.box.lo[2] + x;
          if (!out.contains(oz, oy, ox)) continue;
          const std::int64_t li = r.labels.index(z, y, x);
          const std::pair<float, float> score{r.probs.at(kLesion, li), r.probs.at(kOrgan, li)};
          const std::int64_t oi = out.index(oz, oy, ox);
          if (score > best[oi]) {
            best[oi] = score;
            out[oi] = r.labels[li];
          }
        }
  }
  return out;
}

void CascadeConfig::validate() const {
  for (float m : margin_mm) require(std::isfinite(m) && m >= 0.0f, ErrorKind::Config, "margin_mm must be >= 0");
  require(stage1_keep_k >= 1 && stage2_keep_k >= 1, ErrorKind::Config, "keep_k must be >= 1");
  require(overlap_frac >= 0.0 && overlap_frac < 1.0, ErrorKind::Config, "overlap_frac must lie in [0,1)");
}

ChannelStack stage2_input(const RoiCrop& roi, const DatasetStats& stage2_stats) {
  const std::vector<Volume> channels{normalize(roi.image_crop, stage2_stats), to_float(roi.prior_crop)};
  return ChannelStack::from_volumes(channels);
}

namespace {

ProbMap infer_ensemble(std::span<const Network<float>> nets, const ChannelStack& input, const CascadeConfig& cfg) {
  std::vector<ProbMap> maps;
  for (const auto& net : nets) maps.push_back(sliding_window_infer(net, input, cfg.overlap_frac, cfg.weighting));
  return ensemble(maps);
}

template <class F>
auto with_stage(const char* stage, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw e.with_context(stage);
  }
}

}  // namespace

CascadeOutput run_cascade(std::span<const Network<float>> stage1_nets, std::span<const Network<float>> stage2_nets,
                          const Volume& vol, const DatasetStats& stage1_stats, const DatasetStats& stage2_stats,
                          const CascadeConfig& cfg) {
  cfg.validate();
  require(!stage1_nets.empty() && !stage2_nets.empty(), ErrorKind::Misuse,
          "cascade needs at least one model per stage");
  CascadeOutput out;
  out.stage1_mask_lowres = with_stage("stage1", [&] {
    const Volume prepared = prepare_stage1_input(vol, stage1_stats);
    const ProbMap probs = infer_ensemble(stage1_nets, ChannelStack::from_volume(prepared), cfg);
    return postprocess_stage(binarize(argmax(probs, prepared.spacing())), cfg.stage1_keep_k);
  });
  out.roi_list = with_stage("roi extraction", [&] { return extract_rois(out.stage1_mask_lowres, vol, cfg.margin_mm); });
  out.stage2 = with_stage("stage2", [&] {
    std::vector<RoiPrediction> preds;
    for (const auto& roi : out.roi_list) {
      RoiPrediction p;
      p.box = roi.box;
      p.probs = infer_ensemble(stage2_nets, stage2_input(roi, stage2_stats), cfg);
      p.labels = postprocess_stage(argmax(p.probs, vol.spacing()), cfg.stage2_keep_k);
      preds.push_back(std::move(p));
    }
    return preds;
  });
  out.final_mask = with_stage("restore", [&] { return restore_to_original(out.stage2, vol.dims(), vol.spacing()); });
  return out;
}

}  // namespace casseg
