#include "casseg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace casseg {

using json = nlohmann::ordered_json;

NetworkConfig RunConfig::default_stage1_net() {
  NetworkConfig c = NetworkConfig::reference_localization();
  c.in_channels = 1;
  c.out_classes = 2;
  return c;
}

NetworkConfig RunConfig::default_stage2_net() {
  NetworkConfig c = NetworkConfig::reference_segmentation();
  c.in_channels = 2;
  c.out_classes = 3;
  return c;
}

TrainConfig RunConfig::default_train(int stage) {
  TrainConfig t;
  t.stage = stage;
  return t;
}

void RunConfig::validate() const {
  require(!data_dir.empty(), ErrorKind::Config, "data_dir is required");
  require(!out_dir.empty(), ErrorKind::Config, "out_dir is required");
  auto ctx = [](const char* where, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      throw e.with_context(where);
    }
  };
  ctx("stage1_net", [&] { stage1_net.validate(); });
  ctx("stage2_net", [&] { stage2_net.validate(); });
  require(stage1_net.arch == Arch::PlainUnet, ErrorKind::Config, "stage1_net.arch must be plain_unet");
  require(stage2_net.arch == Arch::ResDsUnet, ErrorKind::Config, "stage2_net.arch must be res_ds_unet");
  require(stage1_net.in_channels == 1 && stage1_net.out_classes == 2, ErrorKind::Config,
          "stage1_net must map 1 channel to 2 classes");
  require(stage2_net.out_classes == 3, ErrorKind::Config, "stage2_net.out_classes must be 3");
  ctx("train1", [&] { train1.validate(); });
  ctx("train2", [&] { train2.validate(); });
  require(train1.stage == 1 && train2.stage == 2, ErrorKind::Config, "train sections are bound to their stage");
  require(train1.lr > 0.0, ErrorKind::Config, "train1.lr must be > 0");
  require(train2.lr > 0.0, ErrorKind::Config, "train2.lr must be > 0");
  ctx("stats", [&] { stats.validate(); });
  ctx("pipeline", [&] { pipeline.validate(); });
  require(stage2_margin_jitter >= 0.0 && stage2_margin_jitter < 1.0, ErrorKind::Config,
          "stage2_margin_jitter must lie in [0,1)");
}

void RunConfig::check_paths() const {
  require(std::filesystem::is_directory(data_dir), ErrorKind::Config,
          "data_dir '" + data_dir.string() + "' does not exist");
  for (const auto* list : {&stage1_checkpoints, &stage2_checkpoints})
    for (const auto& p : *list)
      require(std::filesystem::is_regular_file(p), ErrorKind::Config, "checkpoint '" + p.string() + "' does not exist");
  std::filesystem::create_directories(out_dir);
}

namespace {

std::string arch_name(Arch a) { return a == Arch::PlainUnet ? "plain_unet" : "res_ds_unet"; }
std::string head_name(HeadUpsample h) { return h == HeadUpsample::Nearest ? "nearest" : "transposed"; }
std::string weighting_name(TileWeighting w) { return w == TileWeighting::Uniform ? "uniform" : "gaussian"; }

// Reads keys from one JSON object and rejects whatever is left over.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j.is_object(), ErrorKind::Config, where() + " must be a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void read(const std::string& key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    convert(*it, key, out);
  }

  const json& object(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.contains(key)) fail(ErrorKind::Config, "unknown key '" + key_path(key) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  [[noreturn]] void type_error(const std::string& key, const char* expected) const {
    fail(ErrorKind::Config, "key '" + key_path(key) + "' must be " + expected);
  }

  void convert(const json& v, const std::string& key, int& out) const {
    if (!v.is_number_integer()) type_error(key, "an integer");
    const auto x = v.get<std::int64_t>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) type_error(key, "a 32-bit integer");
    out = static_cast<int>(x);
  }
  void convert(const json& v, const std::string& key, std::uint64_t& out) const {
    if (!v.is_number_unsigned()) type_error(key, "a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  void convert(const json& v, const std::string& key, double& out) const {
    if (!v.is_number()) type_error(key, "a number");
    out = v.get<double>();
  }
  void convert(const json& v, const std::string& key, bool& out) const {
    if (!v.is_boolean()) type_error(key, "a boolean");
    out = v.get<bool>();
  }
  void convert(const json& v, const std::string& key, std::string& out) const {
    if (!v.is_string()) type_error(key, "a string");
    out = v.get<std::string>();
  }
  void convert(const json& v, const std::string& key, std::filesystem::path& out) const {
    std::string s;
    convert(v, key, s);
    out = s;
  }
  template <class T>
  void convert(const json& v, const std::string& key, std::vector<T>& out) const {
    if (!v.is_array()) type_error(key, "an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      T item{};
      convert(v[i], key + "[" + std::to_string(i) + "]", item);
      out.push_back(std::move(item));
    }
  }
  template <class T, std::size_t N>
  void convert(const json& v, const std::string& key, std::array<T, N>& out) const {
    if (!v.is_array() || v.size() != N) type_error(key, ("an array of " + std::to_string(N) + " numbers").c_str());
    for (std::size_t i = 0; i < N; ++i) {
      if constexpr (std::is_integral_v<T>) {
        if (!v[i].is_number_integer()) type_error(key, ("an array of " + std::to_string(N) + " integers").c_str());
      } else {
        if (!v[i].is_number()) type_error(key, ("an array of " + std::to_string(N) + " numbers").c_str());
      }
      out[i] = v[i].get<T>();
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
void with_section(ObjectReader& parent, const std::string& key, F&& body) {
  if (!parent.has(key)) return;
  ObjectReader r(parent.object(key), parent.key_path(key));
  body(r);
  r.finish();
}

void read_network(ObjectReader& r, NetworkConfig& c) {
  r.read("in_channels", c.in_channels);
  r.read("out_classes", c.out_classes);
  r.read("base_filters", c.base_filters);
  r.read("filter_cap", c.filter_cap);
  r.read("poolings", c.poolings);
  r.read("patch_size", c.patch_size);
  std::string arch = arch_name(c.arch), head = head_name(c.head_upsample);
  r.read("arch", arch);
  if (arch == "plain_unet") c.arch = Arch::PlainUnet;
  else if (arch == "res_ds_unet") c.arch = Arch::ResDsUnet;
  else fail(ErrorKind::Config, "key '" + r.key_path("arch") + "' must be plain_unet or res_ds_unet");
  r.read("ds_levels", c.ds_levels);
  r.read("negative_slope", c.negative_slope);
  r.read("spatial_prior", c.spatial_prior);
  r.read("head_upsample", head);
  if (head == "nearest") c.head_upsample = HeadUpsample::Nearest;
  else if (head == "transposed") c.head_upsample = HeadUpsample::Transposed;
  else fail(ErrorKind::Config, "key '" + r.key_path("head_upsample") + "' must be nearest or transposed");
  r.read("norm_eps", c.norm_eps);
}

void read_train(ObjectReader& r, TrainConfig& t) {
  r.read("batch_size", t.batch_size);
  r.read("lr", t.lr);
  r.read("max_steps", t.max_steps);
  r.read("fg_oversample_prob", t.fg_oversample_prob);
  r.read("checkpoint_every", t.checkpoint_every);
  r.read("dice_smooth", t.loss.dice_smooth);
  r.read("ds_weights", t.loss.ds_weights);
  r.read("class_weights", t.loss.class_weights);
  r.read("beta1", t.beta1);
  r.read("beta2", t.beta2);
  r.read("adam_eps", t.adam_eps);
}

json network_json(const NetworkConfig& c) {
  return {{"in_channels", c.in_channels},       {"out_classes", c.out_classes},
          {"base_filters", c.base_filters},     {"filter_cap", c.filter_cap},
          {"poolings", c.poolings},             {"patch_size", c.patch_size},
          {"arch", arch_name(c.arch)},          {"ds_levels", c.ds_levels},
          {"negative_slope", c.negative_slope}, {"spatial_prior", c.spatial_prior},
          {"head_upsample", head_name(c.head_upsample)}, {"norm_eps", c.norm_eps}};
}

json train_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size},
          {"lr", t.lr},
          {"max_steps", t.max_steps},
          {"fg_oversample_prob", t.fg_oversample_prob},
          {"checkpoint_every", t.checkpoint_every},
          {"dice_smooth", t.loss.dice_smooth},
          {"ds_weights", t.loss.ds_weights},
          {"class_weights", t.loss.class_weights},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"adam_eps", t.adam_eps}};
}

std::vector<std::string> path_strings(const std::vector<std::filesystem::path>& ps) {
  std::vector<std::string> out;
  for (const auto& p : ps) out.push_back(p.string());
  return out;
}

json stats_json(const DatasetStats& s) {
  return {{"clip_lo_percentile", s.clip_lo_percentile},
          {"clip_hi_percentile", s.clip_hi_percentile},
          {"global_mean", s.global_mean},
          {"global_std", s.global_std},
          {"per_case", s.per_case}};
}

json parse_json(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, std::string(what) + " is not valid JSON: " + e.what());
  }
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  const json j = parse_json(text, "config");
  RunConfig cfg;
  ObjectReader r(j, "");
  r.read("data_dir", cfg.data_dir);
  r.read("out_dir", cfg.out_dir);
  r.read("seed", cfg.seed);
  with_section(r, "stage1_net", [&](ObjectReader& s) { read_network(s, cfg.stage1_net); });
  with_section(r, "stage2_net", [&](ObjectReader& s) { read_network(s, cfg.stage2_net); });
  with_section(r, "train1", [&](ObjectReader& s) { read_train(s, cfg.train1); });
  with_section(r, "train2", [&](ObjectReader& s) { read_train(s, cfg.train2); });
  with_section(r, "stats", [&](ObjectReader& s) {
    s.read("clip_lo_percentile", cfg.stats.clip_lo_percentile);
    s.read("clip_hi_percentile", cfg.stats.clip_hi_percentile);
    s.read("per_case", cfg.stats.per_case);
  });
  with_section(r, "pipeline", [&](ObjectReader& s) {
    s.read("overlap_frac", cfg.pipeline.overlap_frac);
    s.read("margin_mm", cfg.pipeline.margin_mm);
    s.read("stage1_keep_k", cfg.pipeline.stage1_keep_k);
    s.read("stage2_keep_k", cfg.pipeline.stage2_keep_k);
    std::string w = weighting_name(cfg.pipeline.weighting);
    s.read("tile_weighting", w);
    if (w == "uniform") cfg.pipeline.weighting = TileWeighting::Uniform;
    else if (w == "gaussian") cfg.pipeline.weighting = TileWeighting::Gaussian;
    else fail(ErrorKind::Config, "key 'pipeline.tile_weighting' must be uniform or gaussian");
    s.read("stage2_margin_jitter", cfg.stage2_margin_jitter);
  });
  r.read("train_cases", cfg.train_cases);
  r.read("infer_cases", cfg.infer_cases);
  with_section(r, "checkpoints", [&](ObjectReader& s) {
    s.read("stage1", cfg.stage1_checkpoints);
    s.read("stage2", cfg.stage2_checkpoints);
  });
  r.finish();
  cfg.train1.seed = cfg.seed;
  cfg.train2.seed = cfg.seed + 1;
  cfg.validate();
  return cfg;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = parse_config_text(ss.str());
  cfg.check_paths();
  return cfg;
}

std::string serialize_config(const RunConfig& cfg) {
  const json j = {
      {"data_dir", cfg.data_dir.string()},
      {"out_dir", cfg.out_dir.string()},
      {"seed", cfg.seed},
      {"stage1_net", network_json(cfg.stage1_net)},
      {"stage2_net", network_json(cfg.stage2_net)},
      {"train1", train_json(cfg.train1)},
      {"train2", train_json(cfg.train2)},
      {"stats",
       {{"clip_lo_percentile", cfg.stats.clip_lo_percentile},
        {"clip_hi_percentile", cfg.stats.clip_hi_percentile},
        {"per_case", cfg.stats.per_case}}},
      {"pipeline",
       {{"overlap_frac", cfg.pipeline.overlap_frac},
        {"margin_mm", cfg.pipeline.margin_mm},
        {"stage1_keep_k", cfg.pipeline.stage1_keep_k},
        {"stage2_keep_k", cfg.pipeline.stage2_keep_k},
        {"tile_weighting", weighting_name(cfg.pipeline.weighting)},
        {"stage2_margin_jitter", cfg.stage2_margin_jitter}}},
      {"train_cases", cfg.train_cases},
      {"infer_cases", cfg.infer_cases},
      {"checkpoints",
       {{"stage1", path_strings(cfg.stage1_checkpoints)}, {"stage2", path_strings(cfg.stage2_checkpoints)}}},
  };
  return j.dump(2) + "\n";
}

std::string network_config_json(const NetworkConfig& cfg) { return network_json(cfg).dump(2) + "\n"; }

std::string dataset_stats_json(const DatasetStats& stats) { return stats_json(stats).dump(2) + "\n"; }

DatasetStats parse_dataset_stats(const std::string& text) {
  const json j = parse_json(text, "dataset statistics");
  DatasetStats s;
  ObjectReader r(j, "");
  r.read("clip_lo_percentile", s.clip_lo_percentile);
  r.read("clip_hi_percentile", s.clip_hi_percentile);
  r.read("global_mean", s.global_mean);
  r.read("global_std", s.global_std);
  r.read("per_case", s.per_case);
  r.finish();
  s.validate();
  return s;
}

}  // namespace casseg
