#pragma once

// Differentiable operators over (batch, channel, z, y, x) tensors. This is
// exactly the set the two segmentation networks and their losses need.

#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <span>
#include <vector>

#include "casseg/gemm.hpp"
#include "casseg/tensor.hpp"

namespace casseg::nn {

using Int3 = std::array<int, 3>;

// While one is alive on this thread, piecewise ops fold their discrete
// choices (activation signs, pooling winners) into its digest. Two
// evaluations with equal digests ran on the same linear piece.
class BranchRecorder {
 public:
  BranchRecorder() : prev_(current()) { current() = this; }
  ~BranchRecorder() { current() = prev_; }
  BranchRecorder(const BranchRecorder&) = delete;
  BranchRecorder& operator=(const BranchRecorder&) = delete;

  std::uint64_t digest() const { return hash_; }
  static bool active() { return current() != nullptr; }
  static void note(std::uint64_t v) {
    if (auto* r = current()) r->hash_ = (r->hash_ ^ v) * 1099511628211ull;
  }

 private:
  static BranchRecorder*& current() {
    thread_local BranchRecorder* p = nullptr;
    return p;
  }
  BranchRecorder* prev_;
  std::uint64_t hash_ = 14695981039346656037ull;
};

struct Geom5 {
  std::int64_t n, c, d, h, w;
  std::int64_t spatial() const { return d * h * w; }
};

template <class T>
Geom5 geom5(const Tensor<T>& t, const char* what) {
  require(t.defined() && t.rank() == 5, ErrorKind::Shape,
          std::string(what) + " expects a 5-D tensor, got " + (t.defined() ? to_string(t.shape()) : "undefined"));
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), t.dim(4)};
}

namespace detail {

struct ConvGeometry {
  std::int64_t cin, d, h, w;
  std::int64_t cout;
  int kd, kh, kw;
  int sd, sh, sw;
  int pd, ph, pw;
  std::int64_t od, oh, ow;

  std::int64_t taps() const { return cin * kd * kh * kw; }
  std::int64_t in_spatial() const { return d * h * w; }
  std::int64_t out_spatial() const { return od * oh * ow; }
  bool pointwise() const { return kd == 1 && kh == 1 && kw == 1 && sd == 1 && sh == 1 && sw == 1; }
};

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

// Output z-slices per im2col chunk; keeps the column buffer around 4 MB of floats.
inline std::int64_t chunk_slices(const ConvGeometry& g) {
  constexpr std::int64_t kTargetElements = std::int64_t{1} << 20;
  const std::int64_t per_slice = g.taps() * g.oh * g.ow;
  return std::clamp<std::int64_t>(kTargetElements / std::max<std::int64_t>(per_slice, 1), 1, g.od);
}

// Valid output-x range [lo, hi) for unit x-stride and kernel tap c.
inline std::pair<std::int64_t, std::int64_t> unit_stride_range(const ConvGeometry& g, int c) {
  const std::int64_t lo = std::max<std::int64_t>(0, g.pw - c);
  const std::int64_t hi = std::min<std::int64_t>(g.ow, g.w + g.pw - c);
  return {lo, std::max(lo, hi)};
}

template <class T>
void im2col(const ConvGeometry& g, const T* x, std::int64_t oz0, std::int64_t oz1, T* cols) {
  const std::int64_t nc = (oz1 - oz0) * g.oh * g.ow;
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (int a = 0; a < g.kd; ++a) {
      for (int b = 0; b < g.kh; ++b) {
        for (int c = 0; c < g.kw; ++c, ++r) {
          T* row = cols + r * nc;
          const auto [xlo, xhi] = unit_stride_range(g, c);
          for (std::int64_t oz = oz0; oz < oz1; ++oz) {
            const std::int64_t iz = oz * g.sd - g.pd + a;
            for (std::int64_t oy = 0; oy < g.oh; ++oy) {
              const std::int64_t iy = oy * g.sh - g.ph + b;
              T* dst = row + ((oz - oz0) * g.oh + oy) * g.ow;
              if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) {
                std::fill(dst, dst + g.ow, T{});
                continue;
              }
              const T* src = x + ((ci * g.d + iz) * g.h + iy) * g.w;
              if (g.sw == 1) {
                std::fill(dst, dst + xlo, T{});
                std::copy(src + xlo - g.pw + c, src + xhi - g.pw + c, dst + xlo);
                std::fill(dst + xhi, dst + g.ow, T{});
              } else {
                for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                  const std::int64_t ix = ox * g.sw - g.pw + c;
                  dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T{};
                }
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const ConvGeometry& g, const T* cols, std::int64_t oz0, std::int64_t oz1, T* dx) {
  const std::int64_t nc = (oz1 - oz0) * g.oh * g.ow;
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (int a = 0; a < g.kd; ++a) {
      for (int b = 0; b < g.kh; ++b) {
        for (int c = 0; c < g.kw; ++c, ++r) {
          const T* row = cols + r * nc;
          const auto [xlo, xhi] = unit_stride_range(g, c);
          for (std::int64_t oz = oz0; oz < oz1; ++oz) {
            const std::int64_t iz = oz * g.sd - g.pd + a;
            if (iz < 0 || iz >= g.d) continue;
            for (std::int64_t oy = 0; oy < g.oh; ++oy) {
              const std::int64_t iy = oy * g.sh - g.ph + b;
              if (iy < 0 || iy >= g.h) continue;
              const T* src = row + ((oz - oz0) * g.oh + oy) * g.ow;
              T* dst = dx + ((ci * g.d + iz) * g.h + iy) * g.w;
              if (g.sw == 1) {
                for (std::int64_t ox = xlo; ox < xhi; ++ox) dst[ox - g.pw + c] += src[ox];
              } else {
                for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                  const std::int64_t ix = ox * g.sw - g.pw + c;
                  if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// 3-D convolution with symmetric zero "same" padding (k-1)/2 per axis.
// Output spatial size is ceil(dim / stride). Weights are (out, in, kz, ky, kx);
// bias (out) is optional (pass an undefined tensor).
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, const Int3& stride) {
  const Geom5 xs = geom5(x, "conv3d input");
  const Geom5 ws = geom5(w, "conv3d weight");
  require(ws.c == xs.c, ErrorKind::Shape,
          "conv3d channel mismatch: input has " + std::to_string(xs.c) + ", weight expects " + std::to_string(ws.c));
  require(ws.d % 2 == 1 && ws.h % 2 == 1 && ws.w % 2 == 1, ErrorKind::Unsupported,
          "conv3d kernel dims must be odd, got " + to_string(w.shape()));
  for (int s : stride) require(s >= 1, ErrorKind::Misuse, "conv3d stride must be >= 1");
  const bool has_bias = bias.defined();
  if (has_bias)
    require(bias.numel() == ws.n, ErrorKind::Shape, "conv3d bias length must equal output channels");

  detail::ConvGeometry g{xs.c,
                         xs.d,
                         xs.h,
                         xs.w,
                         ws.n,
                         static_cast<int>(ws.d),
                         static_cast<int>(ws.h),
                         static_cast<int>(ws.w),
                         stride[0],
                         stride[1],
                         stride[2],
                         static_cast<int>(ws.d / 2),
                         static_cast<int>(ws.h / 2),
                         static_cast<int>(ws.w / 2),
                         detail::ceil_div(xs.d, stride[0]),
                         detail::ceil_div(xs.h, stride[1]),
                         detail::ceil_div(xs.w, stride[2])};
  const std::int64_t batch = xs.n;
  const std::int64_t in_sp = g.in_spatial(), out_sp = g.out_spatial(), taps = g.taps();
  std::vector<T> out(static_cast<std::size_t>(batch * g.cout * out_sp));
  const T* xv = x.values().data();
  const T* wv = w.values().data();

  if (g.pointwise()) {
    for (std::int64_t n = 0; n < batch; ++n)
      gemm<T>(false, false, g.cout, out_sp, g.cin, T{1}, wv, g.cin, xv + n * g.cin * in_sp, in_sp, T{0},
              out.data() + n * g.cout * out_sp, out_sp);
  } else {
    const std::int64_t chunk = detail::chunk_slices(g);
    std::vector<T> cols(static_cast<std::size_t>(taps * chunk * g.oh * g.ow));
    for (std::int64_t n = 0; n < batch; ++n) {
      for (std::int64_t oz0 = 0; oz0 < g.od; oz0 += chunk) {
        const std::int64_t oz1 = std::min(g.od, oz0 + chunk);
        const std::int64_t nc = (oz1 - oz0) * g.oh * g.ow;
        detail::im2col(g, xv + n * g.cin * in_sp, oz0, oz1, cols.data());
        gemm<T>(false, false, g.cout, nc, taps, T{1}, wv, taps, cols.data(), nc, T{0},
                out.data() + n * g.cout * out_sp + oz0 * g.oh * g.ow, out_sp);
      }
    }
  }
  if (has_bias) {
    const T* bv = bias.values().data();
    for (std::int64_t n = 0; n < batch; ++n)
      for (std::int64_t co = 0; co < g.cout; ++co) {
        T* o = out.data() + (n * g.cout + co) * out_sp;
        for (std::int64_t i = 0; i < out_sp; ++i) o[i] += bv[co];
      }
  }

  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(
      "conv3d", {batch, g.cout, g.od, g.oh, g.ow}, std::move(out), std::move(inputs),
      [g, batch, has_bias](Node<T>& self) {
        Node<T>* xn = self.inputs[0].get();
        Node<T>* wn = self.inputs[1].get();
        Node<T>* bn = has_bias ? self.inputs[2].get() : nullptr;
        const std::int64_t in_sp = g.in_spatial(), out_sp = g.out_spatial(), taps = g.taps();
        const T* dy = self.grad.data();
        const T* xv = xn->value.data();
        const T* wv = wn->value.data();
        T* dx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        T* dw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;

        if (bn != nullptr && bn->requires_grad) {
          auto db = bn->ensure_grad();
          for (std::int64_t co = 0; co < g.cout; ++co) {
            double s = 0.0;
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* d = dy + (n * g.cout + co) * out_sp;
              for (std::int64_t i = 0; i < out_sp; ++i) s += d[i];
            }
            db[co] += static_cast<T>(s);
          }
        }

        if (g.pointwise()) {
          for (std::int64_t n = 0; n < batch; ++n) {
            const T* dyn = dy + n * g.cout * out_sp;
            if (dw) gemm<T>(false, true, g.cout, g.cin, out_sp, T{1}, dyn, out_sp, xv + n * g.cin * in_sp, in_sp, T{1},
                            dw, g.cin);
            if (dx) gemm<T>(true, false, g.cin, out_sp, g.cout, T{1}, wv, g.cin, dyn, out_sp, T{1},
                            dx + n * g.cin * in_sp, in_sp);
          }
          return;
        }
        const std::int64_t chunk = detail::chunk_slices(g);
        std::vector<T> cols(static_cast<std::size_t>(taps * chunk * g.oh * g.ow));
        for (std::int64_t n = 0; n < batch; ++n) {
          for (std::int64_t oz0 = 0; oz0 < g.od; oz0 += chunk) {
            const std::int64_t oz1 = std::min(g.od, oz0 + chunk);
            const std::int64_t nc = (oz1 - oz0) * g.oh * g.ow;
            const T* dyc = dy + n * g.cout * out_sp + oz0 * g.oh * g.ow;
            if (dw) {
              detail::im2col(g, xv + n * g.cin * in_sp, oz0, oz1, cols.data());
              gemm<T>(false, true, g.cout, taps, nc, T{1}, dyc, out_sp, cols.data(), nc, T{1}, dw, taps);
            }
            if (dx) {
              gemm<T>(true, false, taps, nc, g.cout, T{1}, wv, taps, dyc, out_sp, T{0}, cols.data(), nc);
              detail::col2im(g, cols.data(), oz0, oz1, dx + n * g.cin * in_sp);
            }
          }
        }
      });
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Int3& stride = {1, 1, 1}) {
  return conv3d(x, w, Tensor<T>(), stride);
}

// Transposed convolution with kernel == stride (non-overlapping upsampler).
// Weights are (in, out, sz, sy, sx); output spatial size is dim * stride.
template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w, const Int3& stride) {
  const Geom5 xs = geom5(x, "conv_transpose3d input");
  const Geom5 ws = geom5(w, "conv_transpose3d weight");
  for (int s : stride) require(s >= 1, ErrorKind::Misuse, "conv_transpose3d stride must be >= 1");
  require(ws.d == stride[0] && ws.h == stride[1] && ws.w == stride[2], ErrorKind::Unsupported,
          "conv_transpose3d requires kernel == stride, got kernel " + to_string(w.shape()));
  require(ws.n == xs.c, ErrorKind::Shape, "conv_transpose3d channel mismatch");

  const std::int64_t batch = xs.n, cin = xs.c, cout = ws.c;
  const int sd = stride[0], sh = stride[1], sw = stride[2];
  const std::int64_t taps = static_cast<std::int64_t>(sd) * sh * sw;
  const std::int64_t rows = cout * taps;
  const std::int64_t in_sp = xs.spatial();
  const std::int64_t od = xs.d * sd, oh = xs.h * sh, ow = xs.w * sw;
  const std::int64_t out_sp = od * oh * ow;

  // Maps (row = co*taps + tap, input voxel p) <-> output voxel.
  auto scatter_index = [=](std::int64_t row, std::int64_t p) {
    const std::int64_t co = row / taps, t = row % taps;
    const std::int64_t a = t / (sh * sw), b = (t / sw) % sh, c = t % sw;
    const std::int64_t z = p / (xs.h * xs.w), y = (p / xs.w) % xs.h, xx = p % xs.w;
    return co * out_sp + ((z * sd + a) * oh + (y * sh + b)) * ow + (xx * sw + c);
  };

  std::vector<T> out(static_cast<std::size_t>(batch * cout * out_sp));
  std::vector<T> tmp(static_cast<std::size_t>(rows * in_sp));
  const T* xv = x.values().data();
  const T* wv = w.values().data();
  for (std::int64_t n = 0; n < batch; ++n) {
    T* on = out.data() + n * cout * out_sp;
    T* dst = taps == 1 ? on : tmp.data();
    gemm<T>(true, false, rows, in_sp, cin, T{1}, wv, rows, xv + n * cin * in_sp, in_sp, T{0}, dst, in_sp);
    if (taps == 1) continue;
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t p = 0; p < in_sp; ++p) on[scatter_index(r, p)] = tmp[r * in_sp + p];
  }

  return make_result<T>("conv_transpose3d", {batch, cout, od, oh, ow}, std::move(out), {x, w},
                        [=](Node<T>& self) {
                          Node<T>* xn = self.inputs[0].get();
                          Node<T>* wn = self.inputs[1].get();
                          T* dx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
                          T* dw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
                          std::vector<T> dtmp(taps == 1 ? 0 : static_cast<std::size_t>(rows * in_sp));
                          for (std::int64_t n = 0; n < batch; ++n) {
                            const T* dyn = self.grad.data() + n * cout * out_sp;
                            const T* src = dyn;
                            if (taps != 1) {
                              for (std::int64_t r = 0; r < rows; ++r)
                                for (std::int64_t p = 0; p < in_sp; ++p) dtmp[r * in_sp + p] = dyn[scatter_index(r, p)];
                              src = dtmp.data();
                            }
                            if (dx)
                              gemm<T>(false, false, cin, in_sp, rows, T{1}, wn->value.data(), rows, src, in_sp, T{1},
                                      dx + n * cin * in_sp, in_sp);
                            if (dw)
                              gemm<T>(false, true, cin, rows, in_sp, T{1}, xn->value.data() + n * cin * in_sp, in_sp,
                                      src, in_sp, T{1}, dw, rows);
                          }
                        });
}

// Max pooling with stride == kernel, kernel components in {1, 2}. Ties go to
// the first voxel in scan order.
template <class T>
Tensor<T> max_pool3d(const Tensor<T>& x, const Int3& kernel) {
  const Geom5 s = geom5(x, "max_pool3d input");
  for (int k : kernel) require(k == 1 || k == 2, ErrorKind::Unsupported, "max_pool3d kernel components must be 1 or 2");
  require(s.d % kernel[0] == 0 && s.h % kernel[1] == 0 && s.w % kernel[2] == 0, ErrorKind::Shape,
          "max_pool3d: spatial dims " + to_string(x.shape()) + " not divisible by kernel");
  const int kd = kernel[0], kh = kernel[1], kw = kernel[2];
  const std::int64_t od = s.d / kd, oh = s.h / kh, ow = s.w / kw;
  const std::int64_t planes = s.n * s.c;
  const std::int64_t in_sp = s.spatial(), out_sp = od * oh * ow;
  std::vector<T> out(static_cast<std::size_t>(planes * out_sp));
  std::vector<std::int64_t> argmax(out.size());
  const T* xv = x.values().data();
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const T* src = xv + pl * in_sp;
    for (std::int64_t z = 0; z < od; ++z)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          std::int64_t best = -1;
          for (int a = 0; a < kd; ++a)
            for (int b = 0; b < kh; ++b)
              for (int c = 0; c < kw; ++c) {
                const std::int64_t i = ((z * kd + a) * s.h + (y * kh + b)) * s.w + (xx * kw + c);
                if (best < 0 || src[i] > src[best]) best = i;
              }
          const std::int64_t o = pl * out_sp + (z * oh + y) * ow + xx;
          out[o] = src[best];
          argmax[o] = pl * in_sp + best;
          if (BranchRecorder::active()) BranchRecorder::note(static_cast<std::uint64_t>(best));
        }
  }
  return make_result<T>("max_pool3d", {s.n, s.c, od, oh, ow}, std::move(out), {x},
                        [argmax = std::move(argmax)](Node<T>& self) {
                          Node<T>* xn = self.inputs[0].get();
                          auto dx = xn->ensure_grad();
                          for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += self.grad[o];
                        });
}

// Per (sample, channel) standardisation over spatial voxels (population
// variance), followed by a per-channel affine map.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5) {
  const Geom5 s = geom5(x, "instance_norm input");
  require(eps > 0.0, ErrorKind::Misuse, "instance_norm eps must be > 0");
  require(gamma.numel() == s.c && beta.numel() == s.c, ErrorKind::Shape,
          "instance_norm gamma/beta must have one entry per channel");
  const std::int64_t sp = s.spatial();
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  std::vector<T> xhat(out.size());
  std::vector<double> inv_std(static_cast<std::size_t>(s.n * s.c));
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c) {
      const std::int64_t off = (n * s.c + c) * sp;
      double mean = 0.0;
      for (std::int64_t i = 0; i < sp; ++i) mean += xv[off + i];
      mean /= static_cast<double>(sp);
      double var = 0.0;
      for (std::int64_t i = 0; i < sp; ++i) {
        const double d = xv[off + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(sp);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[n * s.c + c] = is;
      for (std::int64_t i = 0; i < sp; ++i) {
        const double h = (xv[off + i] - mean) * is;
        xhat[off + i] = static_cast<T>(h);
        out[off + i] = static_cast<T>(gv[c] * h + bv[c]);
      }
    }
  return make_result<T>(
      "instance_norm", x.shape(), std::move(out), {x, gamma, beta},
      [s, sp, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>* xn = self.inputs[0].get();
        Node<T>* gn = self.inputs[1].get();
        Node<T>* bn = self.inputs[2].get();
        const T* dy = self.grad.data();
        T* dx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        T* dg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
        T* db = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
        for (std::int64_t n = 0; n < s.n; ++n)
          for (std::int64_t c = 0; c < s.c; ++c) {
            const std::int64_t off = (n * s.c + c) * sp;
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::int64_t i = 0; i < sp; ++i) {
              sum_dy += dy[off + i];
              sum_dy_xhat += static_cast<double>(dy[off + i]) * xhat[off + i];
            }
            if (dg) dg[c] += static_cast<T>(sum_dy_xhat);
            if (db) db[c] += static_cast<T>(sum_dy);
            if (!dx) continue;
            const double g = gn->value[c];
            const double is = inv_std[n * s.c + c];
            const double m1 = sum_dy / static_cast<double>(sp);
            const double m2 = sum_dy_xhat / static_cast<double>(sp);
            for (std::int64_t i = 0; i < sp; ++i)
              dx[off + i] += static_cast<T>(g * is * (dy[off + i] - m1 - xhat[off + i] * m2));
          }
      });
}

// y = x for x >= 0, slope * x otherwise. slope = 0 is plain ReLU. The
// derivative at exactly 0 is taken as 1.
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  const T k = static_cast<T>(slope);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] >= T{0} ? xv[i] : k * xv[i];
  if (BranchRecorder::active())
    for (std::size_t i = 0; i < xv.size(); ++i) BranchRecorder::note(xv[i] >= T{0} ? 2 * i + 1 : 2 * i);
  return make_result<T>("leaky_relu", x.shape(), std::move(out), {x}, [k](Node<T>& self) {
    Node<T>* xn = self.inputs[0].get();
    auto dx = xn->ensure_grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xn->value[i] >= T{0} ? self.grad[i] : k * self.grad[i];
  });
}

// Softmax over the channel axis at every voxel, max-subtracted.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const Geom5 s = geom5(x, "softmax_channels input");
  require(s.c >= 2, ErrorKind::Shape, "softmax_channels needs at least 2 channels");
  const std::int64_t sp = s.spatial();
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const T* xv = x.values().data();
  for (std::int64_t n = 0; n < s.n; ++n) {
    const std::int64_t base = n * s.c * sp;
    for (std::int64_t i = 0; i < sp; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t c = 0; c < s.c; ++c) mx = std::max<double>(mx, xv[base + c * sp + i]);
      double sum = 0.0;
      for (std::int64_t c = 0; c < s.c; ++c) sum += std::exp(xv[base + c * sp + i] - mx);
      for (std::int64_t c = 0; c < s.c; ++c)
        out[base + c * sp + i] = static_cast<T>(std::exp(xv[base + c * sp + i] - mx) / sum);
    }
  }
  return make_result<T>("softmax_channels", x.shape(), std::move(out), {x}, [s, sp](Node<T>& self) {
    Node<T>* xn = self.inputs[0].get();
    auto dx = xn->ensure_grad();
    const T* y = self.value.data();
    const T* dy = self.grad.data();
    for (std::int64_t n = 0; n < s.n; ++n) {
      const std::int64_t base = n * s.c * sp;
      for (std::int64_t i = 0; i < sp; ++i) {
        double dot = 0.0;
        for (std::int64_t c = 0; c < s.c; ++c) dot += static_cast<double>(dy[base + c * sp + i]) * y[base + c * sp + i];
        for (std::int64_t c = 0; c < s.c; ++c) {
          const std::int64_t k = base + c * sp + i;
          dx[k] += static_cast<T>(y[k] * (dy[k] - dot));
        }
      }
    }
  });
}

// Concatenates along the channel axis, order preserved.
template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>> xs) {
  require(!xs.empty(), ErrorKind::Misuse, "concat_channels of an empty list");
  const Geom5 first = geom5(xs[0], "concat_channels input");
  std::int64_t channels = 0;
  std::vector<std::int64_t> offsets;
  for (const auto& t : xs) {
    const Geom5 g = geom5(t, "concat_channels input");
    require(g.n == first.n && g.d == first.d && g.h == first.h && g.w == first.w, ErrorKind::Shape,
            "concat_channels: " + to_string(t.shape()) + " does not match " + to_string(xs[0].shape()));
    offsets.push_back(channels);
    channels += g.c;
  }
  const std::int64_t sp = first.spatial();
  std::vector<T> out(static_cast<std::size_t>(first.n * channels * sp));
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::int64_t ck = xs[k].dim(1);
    const T* src = xs[k].values().data();
    for (std::int64_t n = 0; n < first.n; ++n)
      std::copy(src + n * ck * sp, src + (n + 1) * ck * sp, out.data() + (n * channels + offsets[k]) * sp);
  }
  return make_result<T>("concat_channels", {first.n, channels, first.d, first.h, first.w}, std::move(out),
                        std::vector<Tensor<T>>(xs.begin(), xs.end()), [=](Node<T>& self) {
                          for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                            Node<T>* in = self.inputs[k].get();
                            if (!in->requires_grad) continue;
                            const std::int64_t ck = in->shape[1];
                            auto dx = in->ensure_grad();
                            for (std::int64_t n = 0; n < first.n; ++n) {
                              const T* src = self.grad.data() + (n * channels + offsets[k]) * sp;
                              T* dst = dx.data() + n * ck * sp;
                              for (std::int64_t i = 0; i < ck * sp; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

template <class T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> xs) {
  return concat_channels<T>(std::span<const Tensor<T>>(xs.begin(), xs.size()));
}

template <class T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) {
  require(x.shape() == y.shape(), ErrorKind::Shape,
          "add: shape " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  const auto xv = x.values();
  const auto yv = y.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + yv[i];
  return make_result<T>("add", x.shape(), std::move(out), {x, y}, [](Node<T>& self) {
    accumulate_grad<T>(self.inputs[0].get(), self.grad);
    accumulate_grad<T>(self.inputs[1].get(), self.grad);
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y) {
  require(x.shape() == y.shape(), ErrorKind::Shape,
          "mul: shape " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  const auto xv = x.values();
  const auto yv = y.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * yv[i];
  return make_result<T>("mul", x.shape(), std::move(out), {x, y}, [](Node<T>& self) {
    Node<T>* a = self.inputs[0].get();
    Node<T>* b = self.inputs[1].get();
    if (a->requires_grad) {
      auto da = a->ensure_grad();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto db = b->ensure_grad();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += self.grad[i] * a->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  const T f = static_cast<T>(factor);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f * xv[i];
  return make_result<T>("scale", x.shape(), std::move(out), {x}, [f](Node<T>& self) {
    auto dx = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += f * self.grad[i];
  });
}

// Scalar sum of all elements (float64 accumulation).
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0.0;
  for (T v : x.values()) s += v;
  return make_result<T>("sum", {1}, {static_cast<T>(s)}, {x}, [](Node<T>& self) {
    auto dx = self.inputs[0]->ensure_grad();
    const T g = self.grad[0];
    for (auto& v : dx) v += g;
  });
}

// Nearest-neighbour upsampling by integer factors per spatial axis.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, const Int3& factor) {
  const Geom5 s = geom5(x, "upsample_nearest input");
  for (int f : factor) require(f >= 1, ErrorKind::Misuse, "upsample factor must be >= 1");
  if (factor == Int3{1, 1, 1}) return x;
  const std::int64_t od = s.d * factor[0], oh = s.h * factor[1], ow = s.w * factor[2];
  const std::int64_t planes = s.n * s.c, in_sp = s.spatial(), out_sp = od * oh * ow;
  std::vector<T> out(static_cast<std::size_t>(planes * out_sp));
  const T* xv = x.values().data();
  for (std::int64_t pl = 0; pl < planes; ++pl)
    for (std::int64_t z = 0; z < od; ++z)
      for (std::int64_t y = 0; y < oh; ++y) {
        const T* src = xv + pl * in_sp + ((z / factor[0]) * s.h + y / factor[1]) * s.w;
        T* dst = out.data() + pl * out_sp + (z * oh + y) * ow;
        for (std::int64_t xx = 0; xx < ow; ++xx) dst[xx] = src[xx / factor[2]];
      }
  return make_result<T>("upsample_nearest", {s.n, s.c, od, oh, ow}, std::move(out), {x}, [=](Node<T>& self) {
    auto dx = self.inputs[0]->ensure_grad();
    for (std::int64_t pl = 0; pl < planes; ++pl)
      for (std::int64_t z = 0; z < od; ++z)
        for (std::int64_t y = 0; y < oh; ++y) {
          T* dst = dx.data() + pl * in_sp + ((z / factor[0]) * s.h + y / factor[1]) * s.w;
          const T* src = self.grad.data() + pl * out_sp + (z * oh + y) * ow;
          for (std::int64_t xx = 0; xx < ow; ++xx) dst[xx / factor[2]] += src[xx];
        }
  });
}

}  // namespace casseg::nn
