#pragma once

// Training losses: soft Dice over foreground classes, voxel-mean cross
// entropy, their plain sum, and the deep-supervision weighted aggregate.

#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "casseg/ops.hpp"
#include "casseg/volume.hpp"

namespace casseg {

// Integer targets for a batch, layout (n, z, y, x).
struct LabelBatch {
  std::int64_t batch = 0;
  Dims3 dims{0, 0, 0};
  std::vector<std::uint8_t> labels;

  std::int64_t voxels_per_case() const { return voxel_count(dims); }

  static LabelBatch from_masks(std::span<const LabelMask> masks) {
    require(!masks.empty(), ErrorKind::Misuse, "empty label batch");
    LabelBatch b;
    b.batch = static_cast<std::int64_t>(masks.size());
    b.dims = masks[0].dims();
    for (const auto& m : masks) {
      require(m.dims() == b.dims, ErrorKind::Shape, "label batch members differ in dims");
      b.labels.insert(b.labels.end(), m.voxels().begin(), m.voxels().end());
    }
    return b;
  }
  static LabelBatch from_mask(const LabelMask& m) { return from_masks(std::span<const LabelMask>(&m, 1)); }
};

// ds_weights are finest-first and must sum to 1; empty means "use
// default_ds_weights for however many outputs the network has".
// class_weights (optional) scale cross-entropy terms by the true class.
struct LossConfig {
  double dice_smooth = 1e-5;
  std::vector<double> ds_weights;
  std::vector<double> class_weights;

  void validate() const {
    require(dice_smooth > 0.0, ErrorKind::Config, "dice_smooth must be > 0");
    double s = 0.0;
    for (double w : ds_weights) {
      require(w >= 0.0, ErrorKind::Config, "ds_weights must be >= 0");
      s += w;
    }
    require(ds_weights.empty() || std::abs(s - 1.0) <= 1e-9, ErrorKind::Config, "ds_weights must sum to 1");
    for (double w : class_weights) require(w >= 0.0, ErrorKind::Config, "class_weights must be >= 0");
  }
};

// Weights proportional to 2^-l over `levels` supervised outputs, normalised.
inline std::vector<double> default_ds_weights(int levels) {
  std::vector<double> w(static_cast<std::size_t>(levels));
  for (int l = 0; l < levels; ++l) w[l] = std::ldexp(1.0, -l);
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= s;
  return w;
}

namespace detail {

template <class T>
nn::Geom5 check_against_target(const nn::Tensor<T>& t, const LabelBatch& target, const char* what) {
  const auto g = nn::geom5(t, what);
  require(g.n == target.batch && Dims3{g.d, g.h, g.w} == target.dims, ErrorKind::Shape,
          std::string(what) + " shape " + nn::to_string(t.shape()) + " does not match target " +
              to_string(target.dims) + " x" + std::to_string(target.batch));
  for (auto l : target.labels)
    require(l < g.c, ErrorKind::Misuse, "target label " + std::to_string(l) + " >= class count");
  return g;
}

}  // namespace detail

// 1 - mean over foreground classes c >= 1 of
//   (2 sum p_c g_c + s) / (sum p_c + sum g_c + s),
// sums over batch and voxels.
template <class T>
nn::Tensor<T> dice_loss(const nn::Tensor<T>& probs, const LabelBatch& target, double smooth = 1e-5) {
  const auto g = detail::check_against_target(probs, target, "dice_loss probs");
  require(g.c >= 2, ErrorKind::Shape, "dice_loss needs at least 2 classes");
  for (T p : probs.values()) {
    require(std::isfinite(p), ErrorKind::Numeric, "dice_loss probabilities are not finite");
    require(p >= T(-1e-6) && p <= T(1 + 1e-6), ErrorKind::Misuse, "dice_loss probabilities outside [0,1]");
  }
  const std::int64_t sp = g.spatial();
  const T* pv = probs.values().data();
  std::vector<double> inter(g.c, 0.0), psum(g.c, 0.0), gsum(g.c, 0.0);
  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t c = 1; c < g.c; ++c) {
      const T* p = pv + (n * g.c + c) * sp;
      const std::uint8_t* t = target.labels.data() + n * sp;
      for (std::int64_t i = 0; i < sp; ++i) {
        psum[c] += p[i];
        if (t[i] == c) {
          inter[c] += p[i];
          gsum[c] += 1.0;
        }
      }
    }
  double mean_dice = 0.0;
  for (std::int64_t c = 1; c < g.c; ++c)
    mean_dice += (2.0 * inter[c] + smooth) / (psum[c] + gsum[c] + smooth);
  mean_dice /= static_cast<double>(g.c - 1);

  return nn::make_result<T>(
      "dice_loss", {1}, {static_cast<T>(1.0 - mean_dice)}, {probs},
      [g, sp, inter, psum, gsum, smooth, labels = target.labels](nn::Node<T>& self) {
        auto dp = self.inputs[0]->ensure_grad();
        const double up = self.grad[0] / static_cast<double>(g.c - 1);
        for (std::int64_t c = 1; c < g.c; ++c) {
          const double denom = psum[c] + gsum[c] + smooth;
          const double num = 2.0 * inter[c] + smooth;
          const double on = -up * (2.0 * denom - num) / (denom * denom);
          const double off = -up * (-num) / (denom * denom);
          for (std::int64_t n = 0; n < g.n; ++n) {
            T* d = dp.data() + (n * g.c + c) * sp;
            const std::uint8_t* t = labels.data() + n * sp;
            for (std::int64_t i = 0; i < sp; ++i) d[i] += static_cast<T>(t[i] == c ? on : off);
          }
        }
      });
}

// Mean over voxels of -w_t * log softmax(logits)_t, via log-sum-exp.
template <class T>
nn::Tensor<T> cross_entropy_loss(const nn::Tensor<T>& logits, const LabelBatch& target,
                                 std::span<const double> class_weights = {}) {
  const auto g = detail::check_against_target(logits, target, "cross_entropy_loss logits");
  require(class_weights.empty() || static_cast<std::int64_t>(class_weights.size()) == g.c, ErrorKind::Config,
          "class_weights length must equal class count");
  std::vector<double> w(static_cast<std::size_t>(g.c), 1.0);
  if (!class_weights.empty()) w.assign(class_weights.begin(), class_weights.end());
  const std::int64_t sp = g.spatial();
  const double count = static_cast<double>(g.n * sp);
  const T* z = logits.values().data();
  double total = 0.0;
  for (std::int64_t n = 0; n < g.n; ++n) {
    const T* zn = z + n * g.c * sp;
    for (std::int64_t i = 0; i < sp; ++i) {
      double mx = zn[i];
      for (std::int64_t c = 1; c < g.c; ++c) mx = std::max<double>(mx, zn[c * sp + i]);
      double s = 0.0;
      for (std::int64_t c = 0; c < g.c; ++c) s += std::exp(zn[c * sp + i] - mx);
      const std::uint8_t t = target.labels[n * sp + i];
      total += w[t] * (mx + std::log(s) - zn[t * sp + i]);
    }
  }
  return nn::make_result<T>(
      "cross_entropy_loss", {1}, {static_cast<T>(total / count)}, {logits},
      [g, sp, count, w, labels = target.labels](nn::Node<T>& self) {
        nn::Node<T>* in = self.inputs[0].get();
        auto dz = in->ensure_grad();
        const double up = self.grad[0] / count;
        std::vector<double> e(static_cast<std::size_t>(g.c));
        for (std::int64_t n = 0; n < g.n; ++n) {
          const T* zn = in->value.data() + n * g.c * sp;
          T* dn = dz.data() + n * g.c * sp;
          for (std::int64_t i = 0; i < sp; ++i) {
            double mx = zn[i];
            for (std::int64_t c = 1; c < g.c; ++c) mx = std::max<double>(mx, zn[c * sp + i]);
            double s = 0.0;
            for (std::int64_t c = 0; c < g.c; ++c) s += (e[c] = std::exp(zn[c * sp + i] - mx));
            const std::uint8_t t = labels[n * sp + i];
            const double k = up * w[t];
            for (std::int64_t c = 0; c < g.c; ++c)
              dn[c * sp + i] += static_cast<T>(k * (e[c] / s - (c == t ? 1.0 : 0.0)));
          }
        }
      });
}

// Cross entropy + Dice, unweighted.
template <class T>
nn::Tensor<T> combined_loss(const nn::Tensor<T>& logits, const LabelBatch& target, const LossConfig& cfg = {}) {
  auto ce = cross_entropy_loss(logits, target, cfg.class_weights);
  auto dice = dice_loss(nn::softmax_channels(logits), target, cfg.dice_smooth);
  return nn::add(ce, dice);
}

// sum_l ds_weights[l] * combined_loss(outputs[l]), outputs finest-first.
template <class T>
nn::Tensor<T> deep_supervision_loss(std::span<const nn::Tensor<T>> outputs, const LabelBatch& target,
                                    const LossConfig& cfg) {
  cfg.validate();
  require(outputs.size() == cfg.ds_weights.size(), ErrorKind::Config,
          "deep supervision has " + std::to_string(outputs.size()) + " outputs but " +
              std::to_string(cfg.ds_weights.size()) + " weights");
  nn::Tensor<T> total;
  for (std::size_t l = 0; l < outputs.size(); ++l) {
    auto term = nn::scale(combined_loss(outputs[l], target, cfg), cfg.ds_weights[l]);
    total = l == 0 ? term : nn::add(total, term);
  }
  return total;
}

}  // namespace casseg
