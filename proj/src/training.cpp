#include "casseg/training.hpp"

#include <algorithm>
#include <cmath>

#include "casseg/cascade.hpp"
#include "casseg/components.hpp"

namespace casseg {

void TrainConfig::validate() const {
  require(stage == 1 || stage == 2, ErrorKind::Config, "stage must be 1 or 2");
  require(batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
  require(std::isfinite(lr) && lr >= 0.0, ErrorKind::Config, "lr must be >= 0");
  require(max_steps >= 0, ErrorKind::Config, "max_steps must be >= 0");
  require(fg_oversample_prob >= 0.0 && fg_oversample_prob <= 1.0, ErrorKind::Config,
          "fg_oversample_prob must lie in [0,1]");
  require(checkpoint_every >= 0, ErrorKind::Config, "checkpoint_every must be >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::Config,
          "Adam betas must lie in [0,1)");
  require(adam_eps > 0.0, ErrorKind::Config, "adam_eps must be > 0");
  loss.validate();
}

Adam::Adam(ParameterStore<float>& params, double lr, double beta1, double beta2, double eps)
    : params_(&params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [_, t] : params) {
    m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t k = 0;
  for (const auto& [_, t] : *params_) {
    auto& m = m_[k];
    auto& v = v_[k];
    ++k;
    if (!t.has_grad()) continue;
    auto p = nn::Tensor<float>(t).values();
    const auto g = t.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double update = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      p[i] = static_cast<float>(p[i] - update);
    }
  }
}

Dims3 sample_patch_origin(const TrainingCase& c, const Dims3& patch, bool foreground, std::mt19937_64& rng) {
  const Dims3& d = c.input.dims;
  Dims3 origin{};
  std::int64_t centre = -1;
  if (foreground) {
    // Reservoir-free pick: count foreground, then index into it.
    const auto fg = std::count_if(c.target.voxels().begin(), c.target.voxels().end(),
                                  [](std::uint8_t v) { return v != 0; });
    if (fg > 0) {
      std::int64_t pick = std::uniform_int_distribution<std::int64_t>(0, fg - 1)(rng);
      for (std::int64_t i = 0; i < c.target.size(); ++i)
        if (c.target[i] != 0 && pick-- == 0) {
          centre = i;
          break;
        }
    }
  }
  for (int a = 0; a < 3; ++a) {
    if (d[a] <= patch[a]) {
      origin[a] = -(patch[a] - d[a]) / 2;
      continue;
    }
    const std::int64_t hi = d[a] - patch[a];
    if (centre >= 0) {
      const std::int64_t coord = a == 0 ? centre / (d[1] * d[2]) : a == 1 ? (centre / d[2]) % d[1] : centre % d[2];
      origin[a] = std::clamp<std::int64_t>(coord - patch[a] / 2, 0, hi);
    } else {
      origin[a] = std::uniform_int_distribution<std::int64_t>(0, hi)(rng);
    }
  }
  return origin;
}

namespace {

void copy_label_window(const LabelMask& m, const Dims3& origin, const Dims3& size, std::uint8_t* dst) {
  const Dims3& d = m.dims();
  for (std::int64_t z = 0; z < size[0]; ++z)
    for (std::int64_t y = 0; y < size[1]; ++y)
      for (std::int64_t x = 0; x < size[2]; ++x) {
        const std::int64_t sz = origin[0] + z, sy = origin[1] + y, sx = origin[2] + x;
        *dst++ = (sz >= 0 && sy >= 0 && sx >= 0 && sz < d[0] && sy < d[1] && sx < d[2]) ? m(sz, sy, sx) : 0;
      }
}

}  // namespace

TrainResult train_stage(const TrainConfig& cfg, Network<float>& net, std::span<const TrainingCase> data) {
  cfg.validate();
  require(!data.empty(), ErrorKind::Misuse, "training needs at least one case");
  const NetworkConfig& ncfg = net.config();
  const Dims3 patch = ncfg.patch_size;
  for (const auto& c : data) {
    require(c.input.channels == ncfg.in_channels, ErrorKind::Shape,
            "training case has " + std::to_string(c.input.channels) + " channels, network expects " +
                std::to_string(ncfg.in_channels));
    require(c.target.dims() == c.input.dims, ErrorKind::Shape, "training target dims differ from input dims");
    for (auto l : c.target.voxels())
      require(l < ncfg.out_classes, ErrorKind::Misuse, "training target label exceeds network class count");
  }

  LossConfig loss_cfg = cfg.loss;
  if (cfg.stage == 2 && loss_cfg.ds_weights.empty())
    loss_cfg.ds_weights = default_ds_weights(ncfg.arch == Arch::ResDsUnet ? ncfg.ds_levels : 1);

  std::mt19937_64 rng(cfg.seed);
  Adam adam(net.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  TrainResult result;
  const std::int64_t pv = voxel_count(patch);
  const auto save = [&] {
    if (!cfg.checkpoint_path.empty()) save_network(net, cfg.checkpoint_path);
  };

  for (int step = 0; step < cfg.max_steps; ++step) {
    std::vector<float> xs(static_cast<std::size_t>(cfg.batch_size * ncfg.in_channels * pv));
    LabelBatch target;
    target.batch = cfg.batch_size;
    target.dims = patch;
    target.labels.resize(static_cast<std::size_t>(cfg.batch_size * pv));
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& c = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
      const bool fg = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.fg_oversample_prob;
      const Dims3 origin = sample_patch_origin(c, patch, fg, rng);
      const auto window = c.input.window(origin, patch);
      std::copy(window.begin(), window.end(), xs.begin() + static_cast<std::ptrdiff_t>(b * ncfg.in_channels * pv));
      copy_label_window(c.target, origin, patch, target.labels.data() + b * pv);
    }
    const auto x = nn::Tensor<float>::from_data({cfg.batch_size, ncfg.in_channels, patch[0], patch[1], patch[2]},
                                                std::move(xs));
    const auto outputs = net.forward(x);
    nn::Tensor<float> loss = cfg.stage == 1
                                 ? combined_loss(outputs.front(), target, loss_cfg)
                                 : deep_supervision_loss(std::span<const nn::Tensor<float>>(outputs), target, loss_cfg);
    const double value = loss.item();
    if (!std::isfinite(value))
      fail(ErrorKind::Numeric, "non-finite training loss at step " + std::to_string(step) +
                                   (cfg.checkpoint_path.empty() ? "" : "; last good checkpoint retained at " +
                                                                           cfg.checkpoint_path.string()));
    net.parameters().zero_grad();
    nn::backward(loss);
    adam.step();
    result.loss_trace.push_back(value);
    result.steps = step + 1;
    if (cfg.checkpoint_every > 0 && result.steps % cfg.checkpoint_every == 0) save();
  }
  save();
  return result;
}

TrainingCase make_stage1_case(const Volume& image, const LabelMask& mask, const DatasetStats& stats) {
  require(image.dims() == mask.dims(), ErrorKind::Shape, "image and mask dims differ");
  const Volume prepared = prepare_stage1_input(image, stats);
  return {ChannelStack::from_volume(prepared), binarize(resample_to(mask, prepared.dims(), Interp::Nearest))};
}

std::vector<Box3> stage2_training_boxes(const LabelMask& mask, const Spacing3& margin_mm, double jitter_frac,
                                        std::mt19937_64& rng) {
  const auto cc = connected_components(binarize(mask));
  std::vector<Box3> boxes;
  const int keep = std::min<int>(2, static_cast<int>(cc.components.size()));
  for (int k = 0; k < keep; ++k) {
    Spacing3 lo_mm = margin_mm, hi_mm = margin_mm;
    if (jitter_frac > 0.0) {
      std::uniform_real_distribution<double> u(1.0 - jitter_frac, 1.0 + jitter_frac);
      for (int a = 0; a < 3; ++a) {
        lo_mm[a] = static_cast<float>(margin_mm[a] * u(rng));
        hi_mm[a] = static_cast<float>(margin_mm[a] * u(rng));
      }
    }
    boxes.push_back(roi_box(cc.components[k].bbox, lo_mm, hi_mm, mask.spacing(), mask.dims()));
  }
  return boxes;
}

LabelMask simulated_prior(const LabelMask& mask) {
  const LabelMask fg = binarize(mask);
  const LabelMask low = resample(fg, stage1_spacing(mask.spacing()), Interp::Nearest);
  return resample_to(low, mask.dims(), Interp::Nearest);
}

std::vector<TrainingCase> make_stage2_cases(const Volume& image, const LabelMask& mask, const DatasetStats& stats,
                                            const std::vector<Box3>& boxes) {
  require(image.dims() == mask.dims(), ErrorKind::Shape, "image and mask dims differ");
  const LabelMask prior = simulated_prior(mask);
  std::vector<TrainingCase> out;
  for (const auto& box : boxes) {
    const std::vector<Volume> channels{normalize(crop(image, box), stats), to_float(crop(prior, box))};
    out.push_back({ChannelStack::from_volumes(channels), crop(mask, box)});
  }
  return out;
}

}  // namespace casseg
