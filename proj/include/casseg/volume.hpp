#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "casseg/error.hpp"

namespace casseg {

// Axis order is always (z, y, x); x varies fastest in memory.
using Dims3 = std::array<std::int64_t, 3>;
using Spacing3 = std::array<float, 3>;

inline std::int64_t voxel_count(const Dims3& d) { return d[0] * d[1] * d[2]; }

inline std::string to_string(const Dims3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

enum class DType : std::uint8_t { Float32 = 0x01, UInt8 = 0x02 };

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::Float32; }
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::UInt8; }

// Scalar field on a regular grid with per-axis spacing in millimetres.
template <class T>
class VolumeT {
 public:
  using value_type = T;

  VolumeT() = default;

  VolumeT(const Dims3& dims, const Spacing3& spacing, T fill = T{})
      : dims_(dims), spacing_(spacing) {
    validate_geometry();
    voxels_.assign(static_cast<std::size_t>(voxel_count(dims_)), fill);
  }

  VolumeT(const Dims3& dims, const Spacing3& spacing, std::vector<T> voxels)
      : dims_(dims), spacing_(spacing), voxels_(std::move(voxels)) {
    validate_geometry();
    require(static_cast<std::int64_t>(voxels_.size()) == voxel_count(dims_), ErrorKind::Shape,
            "voxel buffer length " + std::to_string(voxels_.size()) + " does not match dims " +
                to_string(dims_));
  }

  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  std::int64_t size() const { return static_cast<std::int64_t>(voxels_.size()); }
  bool empty() const { return voxels_.empty(); }

  std::span<const T> voxels() const { return voxels_; }
  std::span<T> voxels() { return voxels_; }
  const std::vector<T>& storage() const { return voxels_; }

  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return (z * dims_[1] + y) * dims_[2] + x;
  }
  bool contains(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < dims_[0] && y < dims_[1] && x < dims_[2];
  }

  T& operator()(std::int64_t z, std::int64_t y, std::int64_t x) { return voxels_[index(z, y, x)]; }
  const T& operator()(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return voxels_[index(z, y, x)];
  }
  T& operator[](std::int64_t i) { return voxels_[i]; }
  const T& operator[](std::int64_t i) const { return voxels_[i]; }

  bool operator==(const VolumeT&) const = default;

 private:
  void validate_geometry() const {
    for (int a = 0; a < 3; ++a) {
      require(dims_[a] > 0, ErrorKind::Shape, "volume dims must be positive, got " + to_string(dims_));
      require(std::isfinite(spacing_[a]) && spacing_[a] > 0.0f, ErrorKind::Shape,
              "volume spacing must be positive and finite");
    }
  }

  Dims3 dims_{0, 0, 0};
  Spacing3 spacing_{1.0f, 1.0f, 1.0f};
  std::vector<T> voxels_;
};

using Volume = VolumeT<float>;
using LabelMask = VolumeT<std::uint8_t>;

// Labels used throughout: background, organ (kidney), lesion (tumor).
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kOrgan = 1;
inline constexpr std::uint8_t kLesion = 2;

// Throws Misuse if any voxel is outside {0,1,2}.
void check_labels(const LabelMask& mask);

LabelMask binarize(const LabelMask& mask);  // label >= 1 -> 1
Volume to_float(const LabelMask& mask);

// --- MVOL file format -------------------------------------------------------

using AnyVolume = std::variant<Volume, LabelMask>;

inline constexpr std::size_t kMvolHeaderBytes = 32;

AnyVolume read_mvol(const std::filesystem::path& path);
Volume read_image(const std::filesystem::path& path);  // dtype must be float32
LabelMask read_mask(const std::filesystem::path& path);  // dtype must be uint8

void write_mvol(const Volume& vol, const std::filesystem::path& path);
void write_mvol(const LabelMask& vol, const std::filesystem::path& path);

// In-memory encode/decode; the file functions are thin wrappers.
std::vector<std::uint8_t> encode_mvol(const Volume& vol);
std::vector<std::uint8_t> encode_mvol(const LabelMask& vol);
AnyVolume decode_mvol(std::span<const std::uint8_t> bytes);

// --- Geometry ---------------------------------------------------------------

enum class Interp { Linear, Nearest };

// Output dims: max(1, round-half-away(dims * spacing / target)).
Dims3 resampled_dims(const Dims3& dims, const Spacing3& spacing, const Spacing3& target);

// Voxel centres are aligned: output voxel i samples input coordinate
// (i + 0.5) * ratio - 0.5, clamped to the edge.
Volume resample(const Volume& vol, const Spacing3& target_spacing, Interp mode);
LabelMask resample(const LabelMask& mask, const Spacing3& target_spacing, Interp mode);

// Resamples onto an explicit grid covering the same field of view.
Volume resample_to(const Volume& vol, const Dims3& dims, Interp mode);
LabelMask resample_to(const LabelMask& mask, const Dims3& dims, Interp mode);

// Inclusive voxel bounds per axis; may extend outside the grid.
struct Box3 {
  Dims3 lo{0, 0, 0};
  Dims3 hi{0, 0, 0};

  Dims3 extent() const { return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}; }
  bool contains(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return z >= lo[0] && z <= hi[0] && y >= lo[1] && y <= hi[1] && x >= lo[2] && x <= hi[2];
  }
  bool operator==(const Box3&) const = default;
};

inline Box3 full_box(const Dims3& dims) { return {{0, 0, 0}, {dims[0] - 1, dims[1] - 1, dims[2] - 1}}; }

// Out-of-grid parts of the box are zero-filled.
Volume crop(const Volume& vol, const Box3& box);
LabelMask crop(const LabelMask& mask, const Box3& box);

}  // namespace casseg
