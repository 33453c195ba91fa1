#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "casseg/phantom.hpp"
#include "casseg/preprocess.hpp"
#include "casseg/training.hpp"

namespace casseg {

// A case directory holds image.mvol and, for training data, mask.mvol.
struct CaseData {
  std::string id;
  Volume image;
  LabelMask mask;  // empty when the case has no mask
};

// Sorted ids of the subdirectories of `dir` that contain image.mvol.
std::vector<std::string> list_cases(const std::filesystem::path& dir);

CaseData load_case(const std::filesystem::path& dir, const std::string& id, bool with_mask);
void write_case(const std::filesystem::path& dir, const std::string& id, const Volume& image, const LabelMask& mask);

// Case ids "case_000", "case_001", ...; per-case seeds drawn from `seed`.
std::vector<std::string> synth_dataset(const std::filesystem::path& dir, int count, const PhantomSpec& base);
std::vector<Phantom> synth_phantoms(int count, const PhantomSpec& base);

// Stage 1: all voxels of the clipped training volumes. Stage 2: voxels of the
// ground-truth organ boxes only.
DatasetStats stage1_stats(const std::vector<CaseData>& cases, const DatasetStats& config);
DatasetStats stage2_stats(const std::vector<CaseData>& cases, const DatasetStats& config, const Spacing3& margin_mm);

std::vector<TrainingCase> stage1_training_set(const std::vector<CaseData>& cases, const DatasetStats& stats);
std::vector<TrainingCase> stage2_training_set(const std::vector<CaseData>& cases, const DatasetStats& stats,
                                              const Spacing3& margin_mm, double jitter_frac, std::uint64_t seed);

}  // namespace casseg
