#pragma once

#include <string>
#include <vector>

#include "casseg/volume.hpp"

namespace casseg {

// Hard Dice on the region of voxels with value >= `label`. With labels
// {0 background, 1 organ, 2 lesion}: label 1 is the organ-plus-lesion region
// (kidney Dice), label 2 the lesion alone (tumor Dice). Both-empty gives 1.
double dice_score(const LabelMask& pred, const LabelMask& gt, int label);

inline double kidney_dice(const LabelMask& pred, const LabelMask& gt) { return dice_score(pred, gt, kOrgan); }
inline double tumor_dice(const LabelMask& pred, const LabelMask& gt) { return dice_score(pred, gt, kLesion); }

struct CaseDice {
  std::string case_id;
  double kidney = 0.0;
  double tumor = 0.0;
};

// Mean of (mean kidney Dice, mean tumor Dice) over cases.
double composite_dice(const std::vector<CaseDice>& cases);

struct EvalReport {
  std::vector<CaseDice> cases;
  double mean_kidney = 0.0;
  double mean_tumor = 0.0;
  double composite = 0.0;

  static EvalReport from_cases(std::vector<CaseDice> cases);

  std::string to_text() const;
  std::string to_json() const;
};

}  // namespace casseg
