#include "casseg/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <random>

namespace casseg {

namespace fs = std::filesystem;

std::vector<std::string> list_cases(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorKind::Io, "'" + dir.string() + "' is not a directory");
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && fs::is_regular_file(entry.path() / "image.mvol"))
      ids.push_back(entry.path().filename().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

CaseData load_case(const fs::path& dir, const std::string& id, bool with_mask) {
  try {
    CaseData c;
    c.id = id;
    c.image = read_image(dir / id / "image.mvol");
    if (with_mask) {
      c.mask = read_mask(dir / id / "mask.mvol");
      require(c.mask.dims() == c.image.dims(), ErrorKind::Shape, "mask dims differ from image dims");
      check_labels(c.mask);
    }
    return c;
  } catch (const Error& e) {
    throw e.with_context("case " + id);
  }
}

void write_case(const fs::path& dir, const std::string& id, const Volume& image, const LabelMask& mask) {
  fs::create_directories(dir / id);
  write_mvol(image, dir / id / "image.mvol");
  write_mvol(mask, dir / id / "mask.mvol");
}

std::vector<Phantom> synth_phantoms(int count, const PhantomSpec& base) {
  require(count >= 0, ErrorKind::Misuse, "phantom count must be >= 0");
  std::mt19937_64 rng(base.seed);
  std::vector<Phantom> out;
  for (int i = 0; i < count; ++i) {
    PhantomSpec spec = base;
    spec.seed = rng();
    out.push_back(synth_phantom(spec));
  }
  return out;
}

std::vector<std::string> synth_dataset(const fs::path& dir, int count, const PhantomSpec& base) {
  const auto phantoms = synth_phantoms(count, base);
  std::vector<std::string> ids;
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case_%03d", i);
    write_case(dir, id, phantoms[i].image, phantoms[i].mask);
    ids.emplace_back(id);
  }
  return ids;
}

DatasetStats stage1_stats(const std::vector<CaseData>& cases, const DatasetStats& config) {
  std::vector<Volume> vols;
  for (const auto& c : cases) vols.push_back(resample(c.image, stage1_spacing(c.image.spacing()), Interp::Linear));
  return compute_dataset_stats(vols, config);
}

DatasetStats stage2_stats(const std::vector<CaseData>& cases, const DatasetStats& config, const Spacing3& margin_mm) {
  std::vector<Volume> crops;
  std::mt19937_64 unused(0);
  for (const auto& c : cases)
    for (const auto& box : stage2_training_boxes(c.mask, margin_mm, 0.0, unused)) crops.push_back(crop(c.image, box));
  require(!crops.empty(), ErrorKind::Misuse, "no foreground in any training case; stage-2 statistics undefined");
  return compute_dataset_stats(crops, config);
}

std::vector<TrainingCase> stage1_training_set(const std::vector<CaseData>& cases, const DatasetStats& stats) {
  std::vector<TrainingCase> out;
  for (const auto& c : cases) out.push_back(make_stage1_case(c.image, c.mask, stats));
  return out;
}

std::vector<TrainingCase> stage2_training_set(const std::vector<CaseData>& cases, const DatasetStats& stats,
                                              const Spacing3& margin_mm, double jitter_frac, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TrainingCase> out;
  for (const auto& c : cases) {
    auto boxes = stage2_training_boxes(c.mask, margin_mm, jitter_frac, rng);
    for (auto& tc : make_stage2_cases(c.image, c.mask, stats, boxes)) out.push_back(std::move(tc));
  }
  return out;
}

}  // namespace casseg
