#include <gtest/gtest.h>

#include <random>

#include "casseg/cascade.hpp"
#include "casseg/components.hpp"
#include "casseg/phantom.hpp"
#include "gradient_suite.hpp"

using namespace casseg;

namespace {

Phantom small_phantom(std::uint64_t seed) {
  PhantomSpec s;
  s.dims = {16, 32, 32};
  s.seed = seed;
  return synth_phantom(s);
}

// Stage-1 net whose output is pinned to one class everywhere.
Network<float> pinned_stage1(int cls) {
  auto net = build_localization_net(gradsuite::tiny_config(Arch::PlainUnet), 1);
  auto bias = net.parameters().at("final.bias");
  bias.values()[0] = cls == 0 ? 100.0f : -100.0f;
  bias.values()[1] = cls == 0 ? -100.0f : 100.0f;
  return net;
}

ProbMap constant_probs(Dims3 d, std::array<float, 3> p) {
  ProbMap m;
  m.classes = 3;
  m.dims = d;
  const auto n = voxel_count(d);
  for (float v : p) m.data.insert(m.data.end(), static_cast<std::size_t>(n), v);
  return m;
}

}  // namespace

TEST(RoiBox, MarginArithmeticAndClamp) {
  const Box3 bb{{10, 10, 10}, {19, 19, 19}};
  const auto b = roi_box(bb, {16, 16, 16}, {2, 1, 4}, {100, 100, 100});
  EXPECT_EQ(b, (Box3{{2, 0, 6}, {27, 35, 23}}));
  EXPECT_EQ(roi_box(bb, {0, 0, 0}, {2, 1, 1}, {100, 100, 100}), bb);
  EXPECT_EQ(roi_box(bb, {16, 16, 16}, {1, 1, 1}, {25, 100, 30}), (Box3{{0, 0, 0}, {24, 35, 29}}));
}

TEST(ExtractRois, ExactBoxAtZeroMargin) {
  LabelMask low({20, 20, 20}, {1, 1, 1}, std::uint8_t{0});
  for (int z = 5; z < 15; ++z)
    for (int y = 3; y < 13; ++y)
      for (int x = 8; x < 18; ++x) low(z, y, x) = 1;
  Volume img({20, 20, 20}, {1, 1, 1});
  for (std::int64_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i);
  const auto rois = extract_rois(low, img, {0, 0, 0});
  ASSERT_EQ(rois.size(), 1u);
  EXPECT_EQ(rois[0].box, (Box3{{5, 3, 8}, {14, 12, 17}}));
  EXPECT_EQ(rois[0].image_crop.dims(), (Dims3{10, 10, 10}));
  EXPECT_EQ(rois[0].image_crop(0, 0, 0), img(5, 3, 8));
  for (auto v : rois[0].prior_crop.voxels()) EXPECT_EQ(v, 1);
}

TEST(ExtractRois, TwoKidneysCoverStage1Foreground) {
  const auto p = small_phantom(3);
  const auto low = resample(p.mask, stage1_spacing(p.mask.spacing()), Interp::Nearest);
  const auto rois = extract_rois(postprocess_stage(low, 2), p.image, {16, 16, 16});
  ASSERT_EQ(rois.size(), 2u);
  const auto up = resample_to(low, p.mask.dims(), Interp::Nearest);
  for (std::int64_t z = 0; z < up.dims()[0]; ++z)
    for (std::int64_t y = 0; y < up.dims()[1]; ++y)
      for (std::int64_t x = 0; x < up.dims()[2]; ++x)
        if (up(z, y, x) != 0) {
          EXPECT_TRUE(rois[0].box.contains(z, y, x) || rois[1].box.contains(z, y, x));
        }
  for (const auto& r : rois) EXPECT_EQ(r.prior_crop.dims(), r.image_crop.dims());
  LabelMask empty(low.dims(), low.spacing(), std::uint8_t{0});
  EXPECT_TRUE(extract_rois(empty, p.image, {16, 16, 16}).empty());
}

TEST(Restore, OverlapResolution) {
  // Two 4x4x4 boxes overlapping in a 2x4x4 slab.
  const Dims3 ext{4, 4, 4};
  RoiPrediction a{{{0, 0, 0}, {3, 3, 3}}, constant_probs(ext, {0.2f, 0.5f, 0.3f}), LabelMask(ext, {1, 1, 1}, std::uint8_t{1})};
  RoiPrediction b{{{2, 0, 0}, {5, 3, 3}}, constant_probs(ext, {0.5f, 0.1f, 0.4f}), LabelMask(ext, {1, 1, 1}, std::uint8_t{0})};
  const std::vector<RoiPrediction> rois{a, b};
  const auto out = restore_to_original(rois, {7, 5, 4}, {1, 1, 1});
  for (std::int64_t z = 0; z < 7; ++z)
    for (std::int64_t y = 0; y < 5; ++y)
      for (std::int64_t x = 0; x < 4; ++x) {
        const std::uint8_t expect = y == 4 || z == 6 ? 0 : z < 2 ? 1 : 0;  // b has the higher tumor prob
        EXPECT_EQ(out(z, y, x), expect);
      }
  // Equal tumor probability falls back to kidney probability, then ROI order.
  RoiPrediction c = b;
  c.probs = constant_probs(ext, {0.2f, 0.5f, 0.3f});
  const std::vector<RoiPrediction> tie{a, c};
  EXPECT_EQ(restore_to_original(tie, {6, 4, 4}, {1, 1, 1})(3, 0, 0), 1);
  const std::vector<RoiPrediction> whole{{full_box(ext), constant_probs(ext, {0.1f, 0.2f, 0.7f}),
                                          LabelMask(ext, {1, 1, 1}, std::uint8_t{2})}};
  const auto restored = restore_to_original(whole, ext, {1, 1, 1});
  for (auto v : restored.voxels()) EXPECT_EQ(v, 2);
}

TEST(RunCascade, EmptyStage1GivesBackground) {
  const auto p = small_phantom(4);
  std::vector<Network<float>> s1, s2;
  s1.push_back(pinned_stage1(0));
  s2.push_back(build_segmentation_net(gradsuite::tiny_config(Arch::ResDsUnet), 2));
  const auto out = run_cascade(s1, s2, p.image, {}, {});
  EXPECT_TRUE(out.roi_list.empty());
  EXPECT_EQ(out.final_mask.dims(), p.image.dims());
  for (auto v : out.final_mask.voxels()) EXPECT_EQ(v, 0);
}

TEST(RunCascade, StructuralInvariants) {
  const auto p = small_phantom(5);
  std::vector<Network<float>> s1, s2;
  s1.push_back(build_localization_net(gradsuite::tiny_config(Arch::PlainUnet), 8));
  s1.push_back(build_localization_net(gradsuite::tiny_config(Arch::PlainUnet), 9));
  s2.push_back(build_segmentation_net(gradsuite::tiny_config(Arch::ResDsUnet), 10));
  const auto stats = compute_dataset_stats(std::span<const Volume>(&p.image, 1));
  const auto out = run_cascade(s1, s2, p.image, stats, stats);
  EXPECT_EQ(out.final_mask.dims(), p.image.dims());
  EXPECT_LE(connected_components(out.stage1_mask_lowres).components.size(), 2u);
  EXPECT_EQ(out.roi_list.size(), out.stage2.size());
  for (const auto& r : out.stage2) EXPECT_LE(connected_components(r.labels).components.size(), 1u);
  for (std::int64_t z = 0; z < p.image.dims()[0]; ++z)
    for (std::int64_t y = 0; y < p.image.dims()[1]; ++y)
      for (std::int64_t x = 0; x < p.image.dims()[2]; ++x) {
        const auto v = out.final_mask(z, y, x);
        EXPECT_LE(v, 2);
        if (v == 0) continue;
        bool inside = false;
        for (const auto& r : out.roi_list) inside = inside || r.box.contains(z, y, x);
        EXPECT_TRUE(inside);
      }
}

TEST(RunCascade, ErrorsCarryStageContext) {
  const auto p = small_phantom(6);
  std::vector<Network<float>> s1, s2, none;
  s1.push_back(pinned_stage1(1));
  auto bad = gradsuite::tiny_config(Arch::ResDsUnet);
  bad.spatial_prior = false;
  bad.in_channels = 1;
  s2.push_back(build_segmentation_net(bad, 1));
  try {
    run_cascade(s1, s2, p.image, {}, {});
    ADD_FAILURE() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
    EXPECT_EQ(e.detail().rfind("stage2: ", 0), 0u) << e.what();
  }
  EXPECT_THROW(run_cascade(s1, none, p.image, {}, {}), Error);
  CascadeConfig cfg;
  cfg.stage1_keep_k = 0;
  EXPECT_THROW(cfg.validate(), Error);
}
