#include <cblas.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "casseg/cascade.hpp"
#include "casseg/components.hpp"
#include "casseg/config.hpp"
#include "casseg/dataset.hpp"
#include "casseg/metrics.hpp"
#include "json.hpp"

#ifndef CASSEG_VERSION
#define CASSEG_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace casseg;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write '" + p.string() + "'");
}

// Provenance for every run; no timestamps so reruns are byte-identical.
void write_manifest(const fs::path& out_dir, const std::string& command, const json& args, const json& config,
                    std::uint64_t seed) {
  fs::create_directories(out_dir);
  json m = {{"command", command},
            {"args", args},
            {"seed", seed},
            {"config", config},
            {"versions",
             {{"casseg", CASSEG_VERSION},
              {"compiler", __VERSION__},
              {"openblas", openblas_get_config()},
              {"openblas_threads", openblas_get_num_threads()}}}};
  spit(out_dir / ("manifest_" + command + ".json"), m.dump(2) + "\n");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

Dims3 parse_dims(const std::string& s) {
  const auto parts = split_list(s);
  require(parts.size() == 3, ErrorKind::Config, "--dims expects Z,Y,X");
  Dims3 d{};
  for (int a = 0; a < 3; ++a) {
    try {
      d[a] = std::stoll(parts[a]);
    } catch (const std::exception&) {
      fail(ErrorKind::Config, "--dims component '" + parts[a] + "' is not an integer");
    }
  }
  return d;
}

std::vector<std::string> selected(const std::vector<std::string>& wanted, const fs::path& dir) {
  return wanted.empty() ? list_cases(dir) : wanted;
}

std::vector<CaseData> load_cases(const fs::path& dir, const std::vector<std::string>& ids, bool masks) {
  std::vector<CaseData> out;
  for (const auto& id : ids) out.push_back(load_case(dir, id, masks));
  require(!out.empty(), ErrorKind::Misuse, "no cases found in '" + dir.string() + "'");
  return out;
}

fs::path stats_path(const RunConfig& cfg, int stage) {
  return cfg.out_dir / ("stats_stage" + std::to_string(stage) + ".json");
}

DatasetStats load_stats(const RunConfig& cfg, int stage) {
  const fs::path p = stats_path(cfg, stage);
  require(fs::exists(p), ErrorKind::Io, "missing '" + p.string() + "'; run `stats --stage " + std::to_string(stage) + "` first");
  DatasetStats s = parse_dataset_stats(slurp(p));
  s.per_case = cfg.stats.per_case;
  return s;
}

std::vector<Network<float>> load_nets(const NetworkConfig& ncfg, const std::vector<fs::path>& paths) {
  require(!paths.empty(), ErrorKind::Config, "no checkpoints given");
  std::vector<Network<float>> nets;
  for (const auto& p : paths) {
    nets.push_back(build_network<float>(ncfg, 0));
    try {
      load_network(nets.back(), p);
    } catch (const Error& e) {
      throw e.with_context("checkpoint " + p.string());
    }
  }
  return nets;
}

std::vector<fs::path> checkpoint_list(const std::string& flag, const std::vector<fs::path>& from_config,
                                      const fs::path& fallback) {
  if (!flag.empty()) {
    std::vector<fs::path> out;
    for (const auto& s : split_list(flag)) out.emplace_back(s);
    return out;
  }
  if (!from_config.empty()) return from_config;
  return {fallback};
}

json args_json(const std::vector<std::pair<std::string, std::string>>& kv) {
  json j = json::object();
  for (const auto& [k, v] : kv) j[k] = v;
  return j;
}

int cmd_synth(int count, const std::string& dims, std::uint64_t seed, const fs::path& out) {
  PhantomSpec spec;
  if (!dims.empty()) spec.dims = parse_dims(dims);
  spec.seed = seed;
  spec.validate();
  const auto ids = synth_dataset(out, count, spec);
  write_manifest(out, "synth",
                 args_json({{"count", std::to_string(count)}, {"dims", to_string(spec.dims)}, {"out", out.string()}}),
                 json::object(), seed);
  std::cout << "wrote " << ids.size() << " cases to " << out.string() << "\n";
  return 0;
}

int cmd_stats(const RunConfig& cfg, int stage) {
  const auto cases = load_cases(cfg.data_dir, selected(cfg.train_cases, cfg.data_dir), true);
  const DatasetStats s =
      stage == 1 ? stage1_stats(cases, cfg.stats) : stage2_stats(cases, cfg.stats, cfg.pipeline.margin_mm);
  spit(stats_path(cfg, stage), dataset_stats_json(s));
  write_manifest(cfg.out_dir, "stats" + std::to_string(stage), args_json({{"stage", std::to_string(stage)}}),
                 json::parse(serialize_config(cfg)), cfg.seed);
  std::cout << "stage " << stage << " stats: mean " << s.global_mean << " std " << s.global_std << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, int stage) {
  const auto cases = load_cases(cfg.data_dir, selected(cfg.train_cases, cfg.data_dir), true);
  const DatasetStats stats = load_stats(cfg, stage);
  const NetworkConfig& ncfg = stage == 1 ? cfg.stage1_net : cfg.stage2_net;
  TrainConfig tcfg = stage == 1 ? cfg.train1 : cfg.train2;
  tcfg.checkpoint_path = cfg.out_dir / ("stage" + std::to_string(stage) + ".ckpt");
  const auto data = stage == 1 ? stage1_training_set(cases, stats)
                               : stage2_training_set(cases, stats, cfg.pipeline.margin_mm, cfg.stage2_margin_jitter,
                                                     cfg.seed);
  Network<float> net = stage == 1 ? build_localization_net(ncfg, cfg.seed) : build_segmentation_net(ncfg, cfg.seed);
  const TrainResult r = train_stage(tcfg, net, data);
  spit(cfg.out_dir / ("train_stage" + std::to_string(stage) + "_loss.json"), json(r.loss_trace).dump() + "\n");
  write_manifest(cfg.out_dir, "train" + std::to_string(stage), args_json({{"stage", std::to_string(stage)}}),
                 json::parse(serialize_config(cfg)), cfg.seed);
  std::cout << "stage " << stage << ": " << r.steps << " steps, final loss "
            << (r.loss_trace.empty() ? 0.0 : r.loss_trace.back()) << ", checkpoint " << tcfg.checkpoint_path.string()
            << "\n";
  return 0;
}

int cmd_infer(const RunConfig& cfg, int stage, const std::string& ckpt) {
  const auto ids = selected(cfg.infer_cases, cfg.data_dir);
  if (stage == 1) {
    const auto nets = load_nets(cfg.stage1_net, checkpoint_list(ckpt, cfg.stage1_checkpoints, cfg.out_dir / "stage1.ckpt"));
    const DatasetStats stats = load_stats(cfg, 1);
    for (const auto& id : ids) {
      try {
        const CaseData c = load_case(cfg.data_dir, id, false);
        const Volume prepared = prepare_stage1_input(c.image, stats);
        std::vector<ProbMap> maps;
        for (const auto& n : nets)
          maps.push_back(sliding_window_infer(n, ChannelStack::from_volume(prepared), cfg.pipeline.overlap_frac,
                                              cfg.pipeline.weighting));
        const LabelMask m = postprocess_stage(binarize(argmax(ensemble(maps), prepared.spacing())),
                                              cfg.pipeline.stage1_keep_k);
        fs::create_directories(cfg.out_dir / id);
        write_mvol(m, cfg.out_dir / id / "stage1.mvol");
      } catch (const Error& e) {
        throw e.with_context("case " + id);
      }
    }
  } else {
    const auto nets = load_nets(cfg.stage2_net, checkpoint_list(ckpt, cfg.stage2_checkpoints, cfg.out_dir / "stage2.ckpt"));
    const DatasetStats stats = load_stats(cfg, 2);
    for (const auto& id : ids) {
      try {
        const CaseData c = load_case(cfg.data_dir, id, false);
        const LabelMask s1 = read_mask(cfg.out_dir / id / "stage1.mvol");
        std::vector<RoiPrediction> preds;
        for (const auto& roi : extract_rois(s1, c.image, cfg.pipeline.margin_mm)) {
          std::vector<ProbMap> maps;
          const ChannelStack in = stage2_input(roi, stats);
          for (const auto& n : nets)
            maps.push_back(sliding_window_infer(n, in, cfg.pipeline.overlap_frac, cfg.pipeline.weighting));
          RoiPrediction p{roi.box, ensemble(maps), {}};
          p.labels = postprocess_stage(argmax(p.probs, c.image.spacing()), cfg.pipeline.stage2_keep_k);
          preds.push_back(std::move(p));
        }
        write_mvol(restore_to_original(preds, c.image.dims(), c.image.spacing()), cfg.out_dir / id / "pred.mvol");
      } catch (const Error& e) {
        throw e.with_context("case " + id);
      }
    }
  }
  write_manifest(cfg.out_dir, "infer" + std::to_string(stage), args_json({{"stage", std::to_string(stage)}, {"ckpt", ckpt}}),
                 json::parse(serialize_config(cfg)), cfg.seed);
  std::cout << "stage " << stage << " inference on " << ids.size() << " cases\n";
  return 0;
}

int cmd_cascade(const RunConfig& cfg, const std::string& ckpt1, const std::string& ckpt2, bool keep) {
  const auto nets1 = load_nets(cfg.stage1_net, checkpoint_list(ckpt1, cfg.stage1_checkpoints, cfg.out_dir / "stage1.ckpt"));
  const auto nets2 = load_nets(cfg.stage2_net, checkpoint_list(ckpt2, cfg.stage2_checkpoints, cfg.out_dir / "stage2.ckpt"));
  const DatasetStats s1 = load_stats(cfg, 1), s2 = load_stats(cfg, 2);
  const auto ids = selected(cfg.infer_cases, cfg.data_dir);
  for (const auto& id : ids) {
    try {
      const CaseData c = load_case(cfg.data_dir, id, false);
      const CascadeOutput out = run_cascade(nets1, nets2, c.image, s1, s2, cfg.pipeline);
      fs::create_directories(cfg.out_dir / id);
      write_mvol(out.final_mask, cfg.out_dir / id / "pred.mvol");
      if (keep) write_mvol(out.stage1_mask_lowres, cfg.out_dir / id / "stage1.mvol");
      std::cout << id << ": " << out.roi_list.size() << " ROIs\n";
    } catch (const Error& e) {
      throw e.with_context("case " + id);
    }
  }
  write_manifest(cfg.out_dir, "cascade",
                 args_json({{"ckpt1", ckpt1}, {"ckpt2", ckpt2}, {"keep_intermediates", keep ? "true" : "false"}}),
                 json::parse(serialize_config(cfg)), cfg.seed);
  return 0;
}

int cmd_eval(const fs::path& pred_dir, const fs::path& gt_dir, fs::path out_dir) {
  if (out_dir.empty()) out_dir = pred_dir;
  std::vector<CaseDice> rows;
  for (const auto& entry : fs::directory_iterator(pred_dir)) {
    if (!entry.is_directory() || !fs::exists(entry.path() / "pred.mvol")) continue;
    const std::string id = entry.path().filename().string();
    try {
      const LabelMask pred = read_mask(entry.path() / "pred.mvol");
      const LabelMask gt = read_mask(gt_dir / id / "mask.mvol");
      require(pred.dims() == gt.dims(), ErrorKind::Shape, "prediction dims differ from ground truth");
      rows.push_back({id, kidney_dice(pred, gt), tumor_dice(pred, gt)});
    } catch (const Error& e) {
      throw e.with_context("case " + id);
    }
  }
  std::sort(rows.begin(), rows.end(), [](const CaseDice& a, const CaseDice& b) { return a.case_id < b.case_id; });
  require(!rows.empty(), ErrorKind::Misuse, "no predictions found in '" + pred_dir.string() + "'");
  const EvalReport report = EvalReport::from_cases(rows);
  fs::create_directories(out_dir);
  spit(out_dir / "eval_report.json", report.to_json());
  spit(out_dir / "eval_report.txt", report.to_text());
  write_manifest(out_dir, "eval", args_json({{"pred", pred_dir.string()}, {"gt", gt_dir.string()}}), json::object(), 0);
  std::cout << report.to_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cascaded kidney/tumor segmentation toolkit"};
  app.require_subcommand(1);

  int count = 12;
  std::string dims;
  std::uint64_t seed = 7;
  std::string out;
  auto* synth = app.add_subcommand("synth", "Write synthetic phantom cases");
  synth->add_option("--count", count, "Number of cases")->check(CLI::NonNegativeNumber);
  synth->add_option("--dims", dims, "Volume dims Z,Y,X");
  synth->add_option("--seed", seed, "Phantom seed");
  synth->add_option("--out", out, "Output directory")->required();

  std::string config;
  int stage = 1;
  std::string ckpt, ckpt1, ckpt2;
  bool keep = false;
  auto* stats = app.add_subcommand("stats", "Collect dataset statistics for one stage");
  stats->add_option("--stage", stage)->required()->check(CLI::IsMember({1, 2}));
  stats->add_option("--config", config)->required();
  auto* train = app.add_subcommand("train", "Train one stage");
  train->add_option("--stage", stage)->required()->check(CLI::IsMember({1, 2}));
  train->add_option("--config", config)->required();
  auto* infer = app.add_subcommand("infer", "Run one stage's sliding-window inference");
  infer->add_option("--stage", stage)->required()->check(CLI::IsMember({1, 2}));
  infer->add_option("--config", config)->required();
  infer->add_option("--ckpt", ckpt, "Checkpoint list F[,F...]");
  auto* cascade = app.add_subcommand("cascade", "Run the full two-stage pipeline");
  cascade->add_option("--config", config)->required();
  cascade->add_option("--ckpt1", ckpt1, "Stage-1 checkpoints F[,F...]");
  cascade->add_option("--ckpt2", ckpt2, "Stage-2 checkpoints F[,F...]");
  cascade->add_flag("--keep-intermediates", keep, "Also write stage1.mvol per case");

  std::string pred_dir, gt_dir, eval_out;
  auto* eval = app.add_subcommand("eval", "Score predictions against ground truth");
  eval->add_option("--pred", pred_dir)->required();
  eval->add_option("--gt", gt_dir)->required();
  eval->add_option("--out", eval_out, "Report directory (default: --pred)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(count, dims, seed, out);
    if (eval->parsed()) return cmd_eval(pred_dir, gt_dir, eval_out);
    const RunConfig cfg = parse_config(config);
    if (stats->parsed()) return cmd_stats(cfg, stage);
    if (train->parsed()) return cmd_train(cfg, stage);
    if (infer->parsed()) return cmd_infer(cfg, stage, ckpt);
    if (cascade->parsed()) return cmd_cascade(cfg, ckpt1, ckpt2, keep);
  } catch (const std::exception& e) {
    std::cerr << "casseg: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
