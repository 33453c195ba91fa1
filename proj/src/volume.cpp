#include "casseg/volume.hpp"

#include <algorithm>
#include <fstream>

#include "casseg/bytes.hpp"

namespace casseg {

namespace bytes {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> data(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size)))
    fail(ErrorKind::Io, "failed reading " + path.string());
  return data;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace bytes

void check_labels(const LabelMask& mask) {
  for (auto v : mask.voxels()) {
    if (v > kLesion) fail(ErrorKind::Misuse, "label mask contains value " + std::to_string(v));
  }
}

LabelMask binarize(const LabelMask& mask) {
  LabelMask out(mask.dims(), mask.spacing());
  auto src = mask.voxels();
  auto dst = out.voxels();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] != 0 ? 1 : 0;
  return out;
}

Volume to_float(const LabelMask& mask) {
  Volume out(mask.dims(), mask.spacing());
  std::copy(mask.voxels().begin(), mask.voxels().end(), out.voxels().begin());
  return out;
}

// --- MVOL -------------------------------------------------------------------

namespace {

constexpr std::uint8_t kMvolVersion = 0x01;

template <class T>
std::vector<std::uint8_t> encode(const VolumeT<T>& vol) {
  std::vector<std::uint8_t> out;
  out.reserve(kMvolHeaderBytes + vol.voxels().size() * sizeof(T));
  out.insert(out.end(), {'M', 'V', 'O', 'L', kMvolVersion, static_cast<std::uint8_t>(dtype_of<T>()), 0, 0});
  for (auto d : vol.dims()) bytes::put_u32(out, static_cast<std::uint32_t>(d));
  for (auto s : vol.spacing()) bytes::put_f32(out, s);
  if constexpr (std::is_same_v<T, float>) {
    for (float v : vol.voxels()) bytes::put_f32(out, v);
  } else {
    out.insert(out.end(), vol.voxels().begin(), vol.voxels().end());
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_mvol(const Volume& vol) { return encode(vol); }
std::vector<std::uint8_t> encode_mvol(const LabelMask& vol) { return encode(vol); }

AnyVolume decode_mvol(std::span<const std::uint8_t> data) {
  if (data.size() < 4 || !std::equal(data.begin(), data.begin() + 4, "MVOL"))
    fail(ErrorKind::Format, "missing MVOL magic");
  if (data.size() < kMvolHeaderBytes) fail(ErrorKind::Corruption, "truncated MVOL header");
  if (data[4] != kMvolVersion) fail(ErrorKind::Unsupported, "MVOL version " + std::to_string(data[4]));
  const std::uint8_t code = data[5];
  if (code != static_cast<std::uint8_t>(DType::Float32) && code != static_cast<std::uint8_t>(DType::UInt8))
    fail(ErrorKind::Unsupported, "unknown MVOL dtype code " + std::to_string(code));

  Dims3 dims{};
  Spacing3 spacing{};
  for (int a = 0; a < 3; ++a) {
    dims[a] = bytes::get_u32(data, 8 + 4 * a);
    spacing[a] = bytes::get_f32(data, 20 + 4 * a);
  }
  if (voxel_count(dims) == 0) fail(ErrorKind::Format, "MVOL dims must be positive");

  const std::size_t elem = code == static_cast<std::uint8_t>(DType::Float32) ? 4 : 1;
  const double implied = static_cast<double>(dims[0]) * static_cast<double>(dims[1]) * static_cast<double>(dims[2]);
  if (implied * static_cast<double>(elem) > static_cast<double>(data.size()))
    fail(ErrorKind::Corruption, "MVOL payload shorter than header-implied size (" + to_string(dims) + ")");
  const std::size_t expected = static_cast<std::size_t>(voxel_count(dims)) * elem;
  const std::size_t actual = data.size() - kMvolHeaderBytes;
  if (actual != expected)
    fail(ErrorKind::Corruption, "MVOL payload is " + std::to_string(actual) + " bytes, header implies " +
                                    std::to_string(expected));

  auto payload = data.subspan(kMvolHeaderBytes);
  if (elem == 4) {
    std::vector<float> voxels(static_cast<std::size_t>(voxel_count(dims)));
    for (std::size_t i = 0; i < voxels.size(); ++i) voxels[i] = bytes::get_f32(payload, 4 * i);
    return Volume(dims, spacing, std::move(voxels));
  }
  return LabelMask(dims, spacing, std::vector<std::uint8_t>(payload.begin(), payload.end()));
}

AnyVolume read_mvol(const std::filesystem::path& path) {
  try {
    return decode_mvol(bytes::read_file(path));
  } catch (const Error& e) {
    throw e.with_context(path.string());
  }
}

Volume read_image(const std::filesystem::path& path) {
  auto any = read_mvol(path);
  if (auto* v = std::get_if<Volume>(&any)) return std::move(*v);
  fail(ErrorKind::Unsupported, path.string() + ": expected float32 volume");
}

LabelMask read_mask(const std::filesystem::path& path) {
  auto any = read_mvol(path);
  if (auto* m = std::get_if<LabelMask>(&any)) return std::move(*m);
  fail(ErrorKind::Unsupported, path.string() + ": expected uint8 label volume");
}

void write_mvol(const Volume& vol, const std::filesystem::path& path) { bytes::write_file(path, encode(vol)); }
void write_mvol(const LabelMask& vol, const std::filesystem::path& path) { bytes::write_file(path, encode(vol)); }

// --- Resampling -------------------------------------------------------------

namespace {

std::int64_t round_half_away(double v) {
  return static_cast<std::int64_t>(v < 0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5));
}

struct AxisTaps {
  std::vector<std::int64_t> i0, i1, nearest;
  std::vector<double> w;
};

AxisTaps make_taps(std::int64_t in_n, std::int64_t out_n, double ratio) {
  AxisTaps t;
  t.i0.resize(out_n);
  t.i1.resize(out_n);
  t.nearest.resize(out_n);
  t.w.resize(out_n);
  const double max_c = static_cast<double>(in_n - 1);
  for (std::int64_t i = 0; i < out_n; ++i) {
    double c = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    c = std::clamp(c, 0.0, max_c);
    const auto lo = static_cast<std::int64_t>(std::floor(c));
    t.i0[i] = lo;
    t.i1[i] = std::min(lo + 1, in_n - 1);
    t.w[i] = c - static_cast<double>(lo);
    t.nearest[i] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(c + 0.5)), 0, in_n - 1);
  }
  return t;
}

template <class T>
VolumeT<T> resample_grid(const VolumeT<T>& vol, const Dims3& out_dims, const std::array<double, 3>& ratio,
                         const Spacing3& out_spacing, Interp mode) {
  if constexpr (std::is_same_v<T, std::uint8_t>) {
    require(mode == Interp::Nearest, ErrorKind::Misuse, "linear interpolation of a label volume");
  }
  const auto& in = vol.dims();
  const AxisTaps tz = make_taps(in[0], out_dims[0], ratio[0]);
  const AxisTaps ty = make_taps(in[1], out_dims[1], ratio[1]);
  const AxisTaps tx = make_taps(in[2], out_dims[2], ratio[2]);

  VolumeT<T> out(out_dims, out_spacing);
  for (std::int64_t z = 0; z < out_dims[0]; ++z) {
    for (std::int64_t y = 0; y < out_dims[1]; ++y) {
      for (std::int64_t x = 0; x < out_dims[2]; ++x) {
        if (mode == Interp::Nearest) {
          out(z, y, x) = vol(tz.nearest[z], ty.nearest[y], tx.nearest[x]);
          continue;
        }
        const double wz = tz.w[z], wy = ty.w[y], wx = tx.w[x];
        auto lerp_x = [&](std::int64_t zz, std::int64_t yy) {
          return (1.0 - wx) * vol(zz, yy, tx.i0[x]) + wx * vol(zz, yy, tx.i1[x]);
        };
        auto lerp_y = [&](std::int64_t zz) {
          return (1.0 - wy) * lerp_x(zz, ty.i0[y]) + wy * lerp_x(zz, ty.i1[y]);
        };
        out(z, y, x) = static_cast<T>((1.0 - wz) * lerp_y(tz.i0[z]) + wz * lerp_y(tz.i1[z]));
      }
    }
  }
  return out;
}

template <class T>
VolumeT<T> resample_spacing(const VolumeT<T>& vol, const Spacing3& target, Interp mode) {
  for (float t : target)
    require(std::isfinite(t) && t > 0.0f, ErrorKind::Misuse, "target spacing must be positive");
  const Dims3 out_dims = resampled_dims(vol.dims(), vol.spacing(), target);
  std::array<double, 3> ratio{};
  for (int a = 0; a < 3; ++a) ratio[a] = static_cast<double>(target[a]) / static_cast<double>(vol.spacing()[a]);
  return resample_grid(vol, out_dims, ratio, target, mode);
}

template <class T>
VolumeT<T> resample_dims(const VolumeT<T>& vol, const Dims3& dims, Interp mode) {
  std::array<double, 3> ratio{};
  Spacing3 spacing{};
  for (int a = 0; a < 3; ++a) {
    require(dims[a] > 0, ErrorKind::Misuse, "target dims must be positive");
    ratio[a] = static_cast<double>(vol.dims()[a]) / static_cast<double>(dims[a]);
    spacing[a] = static_cast<float>(vol.spacing()[a] * ratio[a]);
  }
  return resample_grid(vol, dims, ratio, spacing, mode);
}

template <class T>
VolumeT<T> crop_box(const VolumeT<T>& vol, const Box3& box) {
  const auto& d = vol.dims();
  for (int a = 0; a < 3; ++a) {
    if (box.hi[a] < box.lo[a]) fail(ErrorKind::InvalidBox, "box hi < lo on axis " + std::to_string(a));
    if (box.hi[a] < 0 || box.lo[a] >= d[a])
      fail(ErrorKind::InvalidBox, "box does not intersect the volume on axis " + std::to_string(a));
  }
  const Dims3 ext = box.extent();
  VolumeT<T> out(ext, vol.spacing());
  const std::int64_t x0 = std::max<std::int64_t>(box.lo[2], 0);
  const std::int64_t x1 = std::min<std::int64_t>(box.hi[2], d[2] - 1);
  for (std::int64_t z = 0; z < ext[0]; ++z) {
    const std::int64_t sz = box.lo[0] + z;
    if (sz < 0 || sz >= d[0]) continue;
    for (std::int64_t y = 0; y < ext[1]; ++y) {
      const std::int64_t sy = box.lo[1] + y;
      if (sy < 0 || sy >= d[1]) continue;
      const T* src = &vol(sz, sy, x0);
      std::copy(src, src + (x1 - x0 + 1), &out(z, y, x0 - box.lo[2]));
    }
  }
  return out;
}

}  // namespace

Dims3 resampled_dims(const Dims3& dims, const Spacing3& spacing, const Spacing3& target) {
  Dims3 out{};
  for (int a = 0; a < 3; ++a) {
    const double n = static_cast<double>(dims[a]) * static_cast<double>(spacing[a]) / static_cast<double>(target[a]);
    out[a] = std::max<std::int64_t>(1, round_half_away(n));
  }
  return out;
}

Volume resample(const Volume& vol, const Spacing3& target, Interp mode) { return resample_spacing(vol, target, mode); }
LabelMask resample(const LabelMask& mask, const Spacing3& target, Interp mode) {
  return resample_spacing(mask, target, mode);
}
Volume resample_to(const Volume& vol, const Dims3& dims, Interp mode) { return resample_dims(vol, dims, mode); }
LabelMask resample_to(const LabelMask& mask, const Dims3& dims, Interp mode) {
  return resample_dims(mask, dims, mode);
}

Volume crop(const Volume& vol, const Box3& box) { return crop_box(vol, box); }
LabelMask crop(const LabelMask& mask, const Box3& box) { return crop_box(mask, box); }

}  // namespace casseg
