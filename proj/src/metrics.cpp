#include "casseg/metrics.hpp"

#include <cstdio>
#include "json.hpp"

namespace casseg {

double dice_score(const LabelMask& pred, const LabelMask& gt, int label) {
  require(pred.dims() == gt.dims(), ErrorKind::Shape,
          "dice_score dims " + to_string(pred.dims()) + " vs " + to_string(gt.dims()));
  std::int64_t p = 0, g = 0, both = 0;
  auto pv = pred.voxels();
  auto gv = gt.voxels();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const bool in_p = pv[i] >= label;
    const bool in_g = gv[i] >= label;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

namespace {

std::pair<double, double> means(const std::vector<CaseDice>& cases) {
  require(!cases.empty(), ErrorKind::Misuse, "composite Dice of an empty case list");
  double k = 0.0, t = 0.0;
  for (const auto& c : cases) {
    k += c.kidney;
    t += c.tumor;
  }
  const auto n = static_cast<double>(cases.size());
  return {k / n, t / n};
}

}  // namespace

double composite_dice(const std::vector<CaseDice>& cases) {
  const auto [k, t] = means(cases);
  return 0.5 * (k + t);
}

EvalReport EvalReport::from_cases(std::vector<CaseDice> cases) {
  EvalReport r;
  const auto [k, t] = means(cases);
  r.mean_kidney = k;
  r.mean_tumor = t;
  r.composite = 0.5 * (k + t);
  r.cases = std::move(cases);
  return r;
}

std::string EvalReport::to_text() const {
  std::string out = "case_id\tkidney_dice\ttumor_dice\n";
  char buf[256];
  for (const auto& c : cases) {
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\n", c.case_id.c_str(), c.kidney, c.tumor);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mean\t%.6f\t%.6f\ncomposite\t%.6f\n", mean_kidney, mean_tumor, composite);
  out += buf;
  return out;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : cases)
    j["cases"].push_back({{"case_id", c.case_id}, {"kidney_dice", c.kidney}, {"tumor_dice", c.tumor}});
  j["aggregate"] = {{"mean_kidney_dice", mean_kidney}, {"mean_tumor_dice", mean_tumor}, {"composite_dice", composite}};
  return j.dump(2) + "\n";
}

}  // namespace casseg
