#pragma once

// The two volumetric architectures of the cascade:
//  - plain_unet: localisation U-Net. Two (conv 3x3x3 -> instance norm ->
//    leaky ReLU) units per level, max-pool downsampling, transposed-conv
//    upsampling with skip concatenation, 1x1x1 classifier.
//  - res_ds_unet: segmentation net. 1x3x3 stem, pre-activation residual
//    blocks, strided-conv downsampling, transposed-conv upsampling with
//    additive skips, feature-halving decoder blocks with 1x1x1 shortcut
//    projection and deep-supervision heads (1x1x1 conv, then upsampling).
//
// Networks are templated on the scalar type so the same builder produces
// float32 training nets and float64 nets for gradient verification.

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "casseg/checkpoint.hpp"
#include "casseg/ops.hpp"
#include "casseg/volume.hpp"

namespace casseg {

enum class Arch { PlainUnet, ResDsUnet };
enum class HeadUpsample { Nearest, Transposed };

struct NetworkConfig {
  int in_channels = 1;
  int out_classes = 2;
  int base_filters = 30;
  int filter_cap = 320;
  std::array<int, 3> poolings{4, 5, 5};
  Dims3 patch_size{80, 160, 160};
  Arch arch = Arch::PlainUnet;
  int ds_levels = 1;              // res_ds_unet only
  double negative_slope = 0.01;   // plain_unet only; res_ds_unet uses ReLU
  bool spatial_prior = true;      // res_ds_unet: input is image + prior mask
  HeadUpsample head_upsample = HeadUpsample::Nearest;
  double norm_eps = 1e-5;

  int levels() const { return *std::max_element(poolings.begin(), poolings.end()) + 1; }
  int decoder_levels() const { return levels() - 1; }
  int filters(int level) const {
    const double f = static_cast<double>(base_filters) * std::pow(2.0, level);
    return static_cast<int>(std::min<double>(f, filter_cap));
  }
  // Pool kernel (and upsampling stride) between `level` and `level + 1`.
  nn::Int3 pool_kernel(int level) const {
    nn::Int3 k{};
    for (int a = 0; a < 3; ++a) k[a] = level < poolings[a] ? 2 : 1;
    return k;
  }
  // Cumulative downsampling factor from the input resolution to `level`.
  nn::Int3 scale_to_level(int level) const {
    nn::Int3 s{1, 1, 1};
    for (int l = 0; l < level; ++l)
      for (int a = 0; a < 3; ++a) s[a] *= pool_kernel(l)[a];
    return s;
  }
  Dims3 level_dims(int level) const {
    const auto s = scale_to_level(level);
    return {patch_size[0] / s[0], patch_size[1] / s[1], patch_size[2] / s[2]};
  }
  Dims3 bottleneck_dims() const { return level_dims(levels() - 1); }
  // Channels leaving the res_ds_unet decoder block at `level`.
  int decoder_out_filters(int level) const { return std::max(1, filters(level) / 2); }

  void validate() const {
    require(in_channels >= 1, ErrorKind::Config, "in_channels must be >= 1");
    require(out_classes >= 2, ErrorKind::Config, "out_classes must be >= 2");
    require(base_filters >= 1, ErrorKind::Config, "base_filters must be >= 1");
    require(filter_cap >= base_filters, ErrorKind::Config, "filter_cap must be >= base_filters");
    require(norm_eps > 0.0, ErrorKind::Config, "norm_eps must be > 0");
    for (int a = 0; a < 3; ++a) {
      require(poolings[a] >= 0 && poolings[a] <= 16, ErrorKind::Config, "poolings must lie in [0,16]");
      require(patch_size[a] >= 1, ErrorKind::Config, "patch_size must be positive");
      require(patch_size[a] % (std::int64_t{1} << poolings[a]) == 0, ErrorKind::Config,
              "patch_size " + to_string(patch_size) + " axis " + std::to_string(a) + " is not divisible by 2^" +
                  std::to_string(poolings[a]));
    }
    if (arch == Arch::ResDsUnet) {
      require(levels() >= 2, ErrorKind::Config, "res_ds_unet needs at least one pooling");
      require(ds_levels >= 1 && ds_levels <= decoder_levels(), ErrorKind::Config,
              "ds_levels must lie in [1, " + std::to_string(decoder_levels()) + "]");
      if (spatial_prior)
        require(in_channels == 2, ErrorKind::Config,
                "res_ds_unet with spatial prior expects in_channels = 2 (image + prior), got " +
                    std::to_string(in_channels));
    }
  }

  bool operator==(const NetworkConfig&) const = default;

  static NetworkConfig reference_localization() {
    NetworkConfig c;
    c.in_channels = 1;
    c.out_classes = 2;
    c.poolings = {4, 5, 5};
    c.patch_size = {80, 160, 160};
    c.arch = Arch::PlainUnet;
    return c;
  }
  static NetworkConfig reference_segmentation() {
    NetworkConfig c;
    c.in_channels = 2;
    c.out_classes = 3;
    c.poolings = {3, 5, 5};
    c.patch_size = {40, 128, 128};
    c.arch = Arch::ResDsUnet;
    c.ds_levels = c.decoder_levels();
    return c;
  }
};

// Ordered, uniquely named parameter tensors.
template <class T>
class ParameterStore {
 public:
  nn::Tensor<T> add(const std::string& name, nn::Shape shape, std::vector<T> values) {
    require(!index_.contains(name), ErrorKind::Config, "duplicate parameter name '" + name + "'");
    auto t = nn::Tensor<T>::from_data(std::move(shape), std::move(values), true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, t);
    return t;
  }

  const nn::Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::Config, "no parameter named '" + name + "'");
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  std::vector<NamedArray> to_arrays() const {
    std::vector<NamedArray> out;
    for (const auto& [name, t] : entries_)
      out.push_back({name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())});
    return out;
  }

  // Every stored parameter must be present with an identical shape.
  void load(std::span<const NamedArray> arrays) {
    std::unordered_map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name.emplace(a.name, &a);
    for (auto& [name, t] : entries_) {
      auto it = by_name.find(name);
      require(it != by_name.end(), ErrorKind::Config, "checkpoint lacks parameter '" + name + "'");
      require(it->second->shape == t.shape(), ErrorKind::Shape,
              "checkpoint parameter '" + name + "' has shape " + nn::to_string(it->second->shape) + ", network expects " +
                  nn::to_string(t.shape()));
      auto dst = t.values();
      std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
    }
    require(arrays.size() == entries_.size(), ErrorKind::Config, "checkpoint holds parameters the network lacks");
  }

 private:
  std::vector<std::pair<std::string, nn::Tensor<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Shapes observed during a forward pass.
struct ForwardTrace {
  std::vector<nn::Shape> encoder_shapes;  // one per resolution level, finest first
  nn::Shape bottleneck() const { return encoder_shapes.empty() ? nn::Shape{} : encoder_shapes.back(); }
};

template <class T>
class Network {
 public:
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  // Copies would alias the parameter tensors.
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const NetworkConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return params_; }
  const ParameterStore<T>& parameters() const { return params_; }

  // Returns one logits tensor for plain_unet, ds_levels tensors (finest first)
  // for res_ds_unet; all at the input's spatial resolution.
  std::vector<nn::Tensor<T>> forward(const nn::Tensor<T>& x, ForwardTrace* trace = nullptr) const {
    const auto g = nn::geom5(x, "network input");
    require(g.c == cfg_.in_channels, ErrorKind::Shape,
            "network expects " + std::to_string(cfg_.in_channels) + " input channels, got " + std::to_string(g.c));
    const Dims3 spatial{g.d, g.h, g.w};
    require(spatial == cfg_.patch_size, ErrorKind::Shape,
            "network input spatial dims " + to_string(spatial) + " differ from patch size " + to_string(cfg_.patch_size));
    return cfg_.arch == Arch::PlainUnet ? forward_plain(x, trace) : forward_res(x, trace);
  }

  // Runs one named residual block ("enc2.block", "dec0.block") on its own.
  nn::Tensor<T> residual_block(const std::string& name, const nn::Tensor<T>& x) const {
    require(cfg_.arch == Arch::ResDsUnet, ErrorKind::Misuse, "plain_unet has no residual blocks");
    ResBlock b;
    b.norm1 = {params_.at(name + ".norm1.gamma"), params_.at(name + ".norm1.beta")};
    b.conv1 = params_.at(name + ".conv1.weight");
    b.norm2 = {params_.at(name + ".norm2.gamma"), params_.at(name + ".norm2.beta")};
    b.conv2 = params_.at(name + ".conv2.weight");
    if (params_.contains(name + ".proj.weight")) b.projection = params_.at(name + ".proj.weight");
    return res_block(x, b);
  }

 private:
  Network() = default;

  template <class U>
  friend Network<U> build_network(const NetworkConfig& cfg, std::uint64_t seed);

  struct Norm {
    nn::Tensor<T> gamma, beta;
  };
  struct ConvUnit {
    nn::Tensor<T> weight;
    Norm norm;
  };
  struct ResBlock {
    Norm norm1;
    nn::Tensor<T> conv1;
    Norm norm2;
    nn::Tensor<T> conv2;
    nn::Tensor<T> projection;  // undefined for identity shortcuts
  };
  struct PlainLevel {
    ConvUnit first, second;
  };
  struct PlainDecoder {
    nn::Tensor<T> up;
    ConvUnit first, second;
  };
  struct ResEncoder {
    nn::Tensor<T> down;  // undefined at level 0
    ResBlock block;
  };
  struct ResDecoder {
    nn::Tensor<T> up;
    ResBlock block;
  };
  struct Head {
    nn::Tensor<T> weight, bias;
    nn::Tensor<T> up;  // transposed-conv head upsampler, if configured
  };

  nn::Tensor<T> norm(const nn::Tensor<T>& x, const Norm& n) const {
    return nn::instance_norm(x, n.gamma, n.beta, cfg_.norm_eps);
  }
  nn::Tensor<T> unit(const nn::Tensor<T>& x, const ConvUnit& u) const {
    return nn::leaky_relu(norm(nn::conv3d(x, u.weight), u.norm), cfg_.negative_slope);
  }
  nn::Tensor<T> res_block(const nn::Tensor<T>& x, const ResBlock& b) const {
    auto h = nn::conv3d(nn::leaky_relu(norm(x, b.norm1), 0.0), b.conv1);
    h = nn::conv3d(nn::leaky_relu(norm(h, b.norm2), 0.0), b.conv2);
    const auto shortcut = b.projection.defined() ? nn::conv3d(x, b.projection) : x;
    return nn::add(h, shortcut);
  }

  std::vector<nn::Tensor<T>> forward_plain(const nn::Tensor<T>& x, ForwardTrace* trace) const {
    const int levels = cfg_.levels();
    std::vector<nn::Tensor<T>> skips;
    nn::Tensor<T> h = x;
    for (int l = 0; l < levels; ++l) {
      h = unit(unit(h, plain_enc_[l].first), plain_enc_[l].second);
      if (trace) trace->encoder_shapes.push_back(h.shape());
      if (l + 1 < levels) {
        skips.push_back(h);
        h = nn::max_pool3d(h, cfg_.pool_kernel(l));
      }
    }
    for (int l = levels - 2; l >= 0; --l) {
      const auto& d = plain_dec_[l];
      auto up = nn::conv_transpose3d(h, d.up, cfg_.pool_kernel(l));
      h = nn::concat_channels<T>({skips[l], up});
      h = unit(unit(h, d.first), d.second);
    }
    return {nn::conv3d(h, final_weight_, final_bias_, {1, 1, 1})};
  }

  std::vector<nn::Tensor<T>> forward_res(const nn::Tensor<T>& x, ForwardTrace* trace) const {
    const int levels = cfg_.levels();
    std::vector<nn::Tensor<T>> skips;
    nn::Tensor<T> h = nn::conv3d(x, stem_);
    for (int l = 0; l < levels; ++l) {
      if (l > 0) h = nn::conv3d(h, res_enc_[l].down, cfg_.pool_kernel(l - 1));
      h = res_block(h, res_enc_[l].block);
      if (trace) trace->encoder_shapes.push_back(h.shape());
      if (l + 1 < levels) skips.push_back(h);
    }
    std::vector<nn::Tensor<T>> decoded(static_cast<std::size_t>(levels - 1));
    for (int l = levels - 2; l >= 0; --l) {
      const auto& d = res_dec_[l];
      auto up = nn::conv_transpose3d(h, d.up, cfg_.pool_kernel(l));
      h = res_block(nn::add(up, skips[l]), d.block);
      decoded[l] = h;
    }
    std::vector<nn::Tensor<T>> outputs;
    for (int l = 0; l < cfg_.ds_levels; ++l) {
      const auto& head = heads_[l];
      auto logits = nn::conv3d(decoded[l], head.weight, head.bias, {1, 1, 1});
      const auto factor = cfg_.scale_to_level(l);
      if (head.up.defined())
        logits = nn::conv_transpose3d(logits, head.up, factor);
      else
        logits = nn::upsample_nearest(logits, factor);
      outputs.push_back(logits);
    }
    return outputs;
  }

  NetworkConfig cfg_;
  ParameterStore<T> params_;
  std::vector<PlainLevel> plain_enc_;
  std::vector<PlainDecoder> plain_dec_;
  nn::Tensor<T> final_weight_, final_bias_;
  nn::Tensor<T> stem_;
  std::vector<ResEncoder> res_enc_;
  std::vector<ResDecoder> res_dec_;
  std::vector<Head> heads_;
};

namespace detail {

// Fan-in scaled normal initialisation from a seeded stream: gain 2 (He) for
// weights fed by a ReLU, gain 1 for weights fed by a linear signal.
template <class T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  std::vector<T> normal(const nn::Shape& shape, std::int64_t fan_in, double gain) {
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
    std::vector<T> v(static_cast<std::size_t>(nn::numel(shape)));
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    return v;
  }
  static std::vector<T> constant(const nn::Shape& shape, T value) {
    return std::vector<T>(static_cast<std::size_t>(nn::numel(shape)), value);
  }

 private:
  std::mt19937_64 rng_;
};

inline constexpr double kReluGain = 2.0, kLinearGain = 1.0;

}  // namespace detail

template <class T>
Network<T> build_network(const NetworkConfig& cfg, std::uint64_t seed = 0) {
  cfg.validate();
  Network<T> net;
  net.cfg_ = cfg;
  auto& ps = net.params_;
  detail::Initializer<T> init(seed);
  using Shape = nn::Shape;

  auto conv = [&](const std::string& name, std::int64_t cin, std::int64_t cout, const nn::Int3& k,
                  double gain = detail::kReluGain) {
    const Shape s{cout, cin, k[0], k[1], k[2]};
    return ps.add(name, s, init.normal(s, cin * k[0] * k[1] * k[2], gain));
  };
  auto up_conv = [&](const std::string& name, std::int64_t cin, std::int64_t cout, const nn::Int3& k,
                     double gain = detail::kReluGain) {
    const Shape s{cin, cout, k[0], k[1], k[2]};
    return ps.add(name, s, init.normal(s, cin, gain));
  };
  auto norm = [&](const std::string& name, std::int64_t ch) {
    typename Network<T>::Norm n;
    n.gamma = ps.add(name + ".gamma", {ch}, detail::Initializer<T>::constant({ch}, T{1}));
    n.beta = ps.add(name + ".beta", {ch}, detail::Initializer<T>::constant({ch}, T{0}));
    return n;
  };
  auto unit = [&](const std::string& name, std::int64_t cin, std::int64_t cout) {
    typename Network<T>::ConvUnit u;
    u.weight = conv(name + ".conv.weight", cin, cout, {3, 3, 3});
    u.norm = norm(name + ".norm", cout);
    return u;
  };
  auto res_block = [&](const std::string& name, std::int64_t cin, std::int64_t cout) {
    typename Network<T>::ResBlock b;
    b.norm1 = norm(name + ".norm1", cin);
    b.conv1 = conv(name + ".conv1.weight", cin, cout, {3, 3, 3});
    b.norm2 = norm(name + ".norm2", cout);
    b.conv2 = conv(name + ".conv2.weight", cout, cout, {3, 3, 3});
    if (cin != cout) b.projection = conv(name + ".proj.weight", cin, cout, {1, 1, 1}, detail::kLinearGain);
    return b;
  };

  const int levels = cfg.levels();
  if (cfg.arch == Arch::PlainUnet) {
    for (int l = 0; l < levels; ++l) {
      const std::string p = "enc" + std::to_string(l);
      const int cin = l == 0 ? cfg.in_channels : cfg.filters(l - 1);
      typename Network<T>::PlainLevel lv;
      lv.first = unit(p + ".unit0", cin, cfg.filters(l));
      lv.second = unit(p + ".unit1", cfg.filters(l), cfg.filters(l));
      net.plain_enc_.push_back(lv);
    }
    net.plain_dec_.resize(static_cast<std::size_t>(levels - 1));
    for (int l = levels - 2; l >= 0; --l) {
      const std::string p = "dec" + std::to_string(l);
      auto& d = net.plain_dec_[l];
      d.up = up_conv(p + ".up.weight", cfg.filters(l + 1), cfg.filters(l), cfg.pool_kernel(l));
      d.first = unit(p + ".unit0", 2 * cfg.filters(l), cfg.filters(l));
      d.second = unit(p + ".unit1", cfg.filters(l), cfg.filters(l));
    }
    net.final_weight_ = conv("final.weight", cfg.filters(0), cfg.out_classes, {1, 1, 1});
    net.final_bias_ = ps.add("final.bias", {cfg.out_classes}, detail::Initializer<T>::constant({cfg.out_classes}, T{0}));
    return net;
  }

  // The residual stream is never activated, so every conv that reads it
  // directly keeps unit gain.
  net.stem_ = conv("stem.weight", cfg.in_channels, cfg.filters(0), {1, 3, 3}, detail::kLinearGain);
  for (int l = 0; l < levels; ++l) {
    const std::string p = "enc" + std::to_string(l);
    typename Network<T>::ResEncoder e;
    if (l > 0) {
      const auto stride = cfg.pool_kernel(l - 1);
      const nn::Int3 k{stride[0] == 2 ? 3 : 1, stride[1] == 2 ? 3 : 1, stride[2] == 2 ? 3 : 1};
      e.down = conv(p + ".down.weight", cfg.filters(l - 1), cfg.filters(l), k, detail::kLinearGain);
    }
    e.block = res_block(p + ".block", cfg.filters(l), cfg.filters(l));
    net.res_enc_.push_back(e);
  }
  net.res_dec_.resize(static_cast<std::size_t>(levels - 1));
  for (int l = levels - 2; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    const int below = l + 1 == levels - 1 ? cfg.filters(l + 1) : cfg.decoder_out_filters(l + 1);
    auto& d = net.res_dec_[l];
    d.up = up_conv(p + ".up.weight", below, cfg.filters(l), cfg.pool_kernel(l), detail::kLinearGain);
    d.block = res_block(p + ".block", cfg.filters(l), cfg.decoder_out_filters(l));
  }
  for (int l = 0; l < cfg.ds_levels; ++l) {
    const std::string p = "head" + std::to_string(l);
    typename Network<T>::Head h;
    h.weight = conv(p + ".weight", cfg.decoder_out_filters(l), cfg.out_classes, {1, 1, 1});
    h.bias = ps.add(p + ".bias", {cfg.out_classes}, detail::Initializer<T>::constant({cfg.out_classes}, T{0}));
    const auto factor = cfg.scale_to_level(l);
    if (cfg.head_upsample == HeadUpsample::Transposed && factor != nn::Int3{1, 1, 1}) {
      // Starts as channel-wise replication, i.e. nearest-neighbour upsampling.
      const nn::Shape s{cfg.out_classes, cfg.out_classes, factor[0], factor[1], factor[2]};
      std::vector<T> w(static_cast<std::size_t>(nn::numel(s)), T{0});
      const std::int64_t taps = static_cast<std::int64_t>(factor[0]) * factor[1] * factor[2];
      for (int c = 0; c < cfg.out_classes; ++c)
        std::fill_n(w.begin() + (static_cast<std::int64_t>(c) * cfg.out_classes + c) * taps, taps, T{1});
      h.up = ps.add(p + ".up.weight", s, std::move(w));
    }
    net.heads_.push_back(h);
  }
  return net;
}

template <class T = float>
Network<T> build_localization_net(const NetworkConfig& cfg, std::uint64_t seed = 0) {
  require(cfg.arch == Arch::PlainUnet, ErrorKind::Config, "localization net requires arch plain_unet");
  return build_network<T>(cfg, seed);
}

template <class T = float>
Network<T> build_segmentation_net(const NetworkConfig& cfg, std::uint64_t seed = 0) {
  require(cfg.arch == Arch::ResDsUnet, ErrorKind::Config, "segmentation net requires arch res_ds_unet");
  return build_network<T>(cfg, seed);
}

template <class T>
void save_network(const Network<T>& net, const std::filesystem::path& path) {
  write_checkpoint(net.parameters().to_arrays(), path);
}

template <class T>
void load_network(Network<T>& net, const std::filesystem::path& path) {
  const auto arrays = read_checkpoint(path);
  net.parameters().load(arrays);
}

}  // namespace casseg
