#include "casseg/inference.hpp"

#include <algorithm>
#include <cmath>

namespace casseg {

ChannelStack ChannelStack::from_volumes(std::span<const Volume> volumes) {
  require(!volumes.empty(), ErrorKind::Misuse, "channel stack needs at least one volume");
  ChannelStack s;
  s.channels = static_cast<int>(volumes.size());
  s.dims = volumes[0].dims();
  for (const auto& v : volumes) {
    require(v.dims() == s.dims, ErrorKind::Shape, "channel volumes differ in dims");
    s.data.insert(s.data.end(), v.voxels().begin(), v.voxels().end());
  }
  return s;
}

std::vector<float> ChannelStack::window(const Dims3& origin, const Dims3& size) const {
  std::vector<float> out(static_cast<std::size_t>(channels * voxel_count(size)), 0.0f);
  const std::int64_t x0 = std::max<std::int64_t>(0, origin[2]);
  const std::int64_t x1 = std::min<std::int64_t>(dims[2], origin[2] + size[2]);
  if (x1 <= x0) return out;
  const std::int64_t vox = voxel_count(dims);
  for (int c = 0; c < channels; ++c)
    for (std::int64_t z = 0; z < size[0]; ++z) {
      const std::int64_t sz = origin[0] + z;
      if (sz < 0 || sz >= dims[0]) continue;
      for (std::int64_t y = 0; y < size[1]; ++y) {
        const std::int64_t sy = origin[1] + y;
        if (sy < 0 || sy >= dims[1]) continue;
        const float* src = data.data() + c * vox + (sz * dims[1] + sy) * dims[2];
        float* dst = out.data() + ((c * size[0] + z) * size[1] + y) * size[2];
        std::copy(src + x0, src + x1, dst + (x0 - origin[2]));
      }
    }
  return out;
}

std::vector<std::int64_t> tile_starts(std::int64_t dim, std::int64_t patch, double overlap) {
  require(overlap >= 0.0 && overlap < 1.0, ErrorKind::Misuse, "overlap_frac must lie in [0,1)");
  if (dim <= patch) return {0};
  const auto stride = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(patch * (1.0 - overlap))));
  std::vector<std::int64_t> starts;
  for (std::int64_t s = 0; s + patch < dim; s += stride) starts.push_back(s);
  starts.push_back(dim - patch);
  return starts;
}

namespace {

std::vector<float> tile_weights(const Dims3& patch, TileWeighting weighting) {
  std::vector<float> w(static_cast<std::size_t>(voxel_count(patch)), 1.0f);
  if (weighting == TileWeighting::Uniform) return w;
  // Separable Gaussian, sigma = patch / 8, peak 1, floored to keep every voxel covered.
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const double sigma = std::max(1e-3, patch[a] / 8.0);
    const double c = (patch[a] - 1) / 2.0;
    for (std::int64_t i = 0; i < patch[a]; ++i)
      axis[a].push_back(std::exp(-0.5 * ((i - c) / sigma) * ((i - c) / sigma)));
  }
  std::size_t k = 0;
  for (std::int64_t z = 0; z < patch[0]; ++z)
    for (std::int64_t y = 0; y < patch[1]; ++y)
      for (std::int64_t x = 0; x < patch[2]; ++x)
        w[k++] = static_cast<float>(std::max(1e-3, axis[0][z] * axis[1][y] * axis[2][x]));
  return w;
}

}  // namespace

ProbMap sliding_window_infer(const TilePredictor& predictor, const ChannelStack& input, const Dims3& patch,
                             double overlap_frac, TileWeighting weighting) {
  require(overlap_frac >= 0.0 && overlap_frac < 1.0, ErrorKind::Misuse, "overlap_frac must lie in [0,1)");
  // Pad up to one patch per axis, centring the data.
  Dims3 padded{}, pad_lo{};
  for (int a = 0; a < 3; ++a) {
    padded[a] = std::max(input.dims[a], patch[a]);
    pad_lo[a] = (padded[a] - input.dims[a]) / 2;
  }
  std::array<std::vector<std::int64_t>, 3> starts;
  for (int a = 0; a < 3; ++a) starts[a] = tile_starts(padded[a], patch[a], overlap_frac);

  const auto weights = tile_weights(patch, weighting);
  const std::int64_t patch_vox = voxel_count(patch);
  const std::int64_t out_vox = voxel_count(input.dims);
  ProbMap out;
  out.dims = input.dims;
  std::vector<double> acc, wsum(static_cast<std::size_t>(out_vox), 0.0);

  nn::NoGradGuard no_grad;
  for (auto sz : starts[0])
    for (auto sy : starts[1])
      for (auto sx : starts[2]) {
        const Dims3 origin{sz - pad_lo[0], sy - pad_lo[1], sx - pad_lo[2]};
        auto x = nn::Tensor<float>::from_data({1, input.channels, patch[0], patch[1], patch[2]},
                                              input.window(origin, patch));
        const auto probs = predictor(x);
        require(probs.rank() == 5 && probs.dim(0) == 1 && probs.dim(2) == patch[0] && probs.dim(3) == patch[1] &&
                    probs.dim(4) == patch[2],
                ErrorKind::Shape, "tile predictor returned shape " + nn::to_string(probs.shape()));
        if (out.classes == 0) {
          out.classes = static_cast<int>(probs.dim(1));
          acc.assign(static_cast<std::size_t>(out.classes * out_vox), 0.0);
        }
        require(probs.dim(1) == out.classes, ErrorKind::Shape, "tile predictor changed class count");
        const auto pv = probs.values();
        for (float v : pv)
          if (!std::isfinite(v)) fail(ErrorKind::Numeric, "non-finite network output during sliding-window inference");

        for (std::int64_t z = 0; z < patch[0]; ++z) {
          const std::int64_t oz = origin[0] + z;
          if (oz < 0 || oz >= input.dims[0]) continue;
          for (std::int64_t y = 0; y < patch[1]; ++y) {
            const std::int64_t oy = origin[1] + y;
            if (oy < 0 || oy >= input.dims[1]) continue;
            for (std::int64_t xx = 0; xx < patch[2]; ++xx) {
              const std::int64_t ox = origin[2] + xx;
              if (ox < 0 || ox >= input.dims[2]) continue;
              const std::int64_t pi = (z * patch[1] + y) * patch[2] + xx;
              const std::int64_t oi = (oz * input.dims[1] + oy) * input.dims[2] + ox;
              const double w = weights[pi];
              wsum[oi] += w;
              for (int c = 0; c < out.classes; ++c) acc[c * out_vox + oi] += w * pv[c * patch_vox + pi];
            }
          }
        }
      }

  out.data.resize(acc.size());
  for (int c = 0; c < out.classes; ++c)
    for (std::int64_t i = 0; i < out_vox; ++i)
      out.data[c * out_vox + i] = static_cast<float>(acc[c * out_vox + i] / wsum[i]);
  return out;
}

ProbMap sliding_window_infer(const Network<float>& net, const ChannelStack& input, double overlap_frac,
                             TileWeighting weighting) {
  require(input.channels == net.config().in_channels, ErrorKind::Shape,
          "inference input has " + std::to_string(input.channels) + " channels, network expects " +
              std::to_string(net.config().in_channels));
  TilePredictor predictor = [&net](const nn::Tensor<float>& x) {
    return nn::softmax_channels(net.forward(x).front());
  };
  return sliding_window_infer(predictor, input, net.config().patch_size, overlap_frac, weighting);
}

ProbMap ensemble(std::span<const ProbMap> maps) {
  require(!maps.empty(), ErrorKind::Misuse, "ensemble of zero probability maps");
  ProbMap out = maps[0];
  if (maps.size() == 1) return out;
  std::vector<double> acc(out.data.begin(), out.data.end());
  for (std::size_t k = 1; k < maps.size(); ++k) {
    require(maps[k].classes == out.classes && maps[k].dims == out.dims, ErrorKind::Shape,
            "ensemble members differ in shape");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += maps[k].data[i];
  }
  const double n = static_cast<double>(maps.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.data[i] = static_cast<float>(acc[i] / n);
  return out;
}

LabelMask argmax(const ProbMap& probs, const Spacing3& spacing) {
  LabelMask out(probs.dims, spacing);
  const std::int64_t vox = voxel_count(probs.dims);
  for (std::int64_t i = 0; i < vox; ++i) {
    int best = 0;
    for (int c = 1; c < probs.classes; ++c)
      if (probs.at(c, i) > probs.at(best, i)) best = c;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace casseg
