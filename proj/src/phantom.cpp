#include "casseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace casseg {

namespace {

constexpr int kPlacementAttempts = 1000;
// Semi-axis range per axis as a fraction of the field of view.
constexpr std::array<double, 3> kRadiusLo{0.14, 0.12, 0.10};
constexpr std::array<double, 3> kRadiusHi{0.22, 0.18, 0.15};
constexpr double kMinRadiusVoxels = 2.0;

bool boxes_overlap(const Ellipsoid& a, const Ellipsoid& b, const Spacing3& spacing) {
  for (int ax = 0; ax < 3; ++ax) {
    const double gap = std::abs(a.center_mm[ax] - b.center_mm[ax]) - a.radii_mm[ax] - b.radii_mm[ax];
    if (gap > spacing[ax]) return false;  // separated by at least one voxel on this axis
  }
  return true;
}

}  // namespace

void PhantomSpec::validate() const {
  require(organ_count >= 1, ErrorKind::Config, "organ_count must be >= 1");
  require(lesion_radius_frac > 0.0 && lesion_radius_frac < 1.0, ErrorKind::Config,
          "lesion_radius_frac must lie in (0,1)");
  require(noise_sigma >= 0.0, ErrorKind::Config, "noise_sigma must be >= 0");
  for (int a = 0; a < 3; ++a) {
    require(dims[a] > 0, ErrorKind::Config, "phantom dims must be positive");
    require(spacing[a] > 0.0f, ErrorKind::Config, "phantom spacing must be positive");
  }
}

Phantom synth_phantom(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::array<double, 3> fov{};
  for (int a = 0; a < 3; ++a) fov[a] = static_cast<double>(spec.dims[a]) * spec.spacing[a];

  PhantomGeometry geo;
  int attempts = 0;
  while (static_cast<int>(geo.organs.size()) < spec.organ_count) {
    if (++attempts > kPlacementAttempts)
      fail(ErrorKind::Placement, "could not place " + std::to_string(spec.organ_count) +
                                     " disjoint organs in a " + to_string(spec.dims) + " grid");
    Ellipsoid e;
    bool fits = true;
    for (int a = 0; a < 3; ++a) {
      const double r = fov[a] * (kRadiusLo[a] + (kRadiusHi[a] - kRadiusLo[a]) * unit(rng));
      e.radii_mm[a] = std::max(r, kMinRadiusVoxels * spec.spacing[a]);
      const double lo = e.radii_mm[a] + spec.spacing[a];
      const double hi = fov[a] - e.radii_mm[a] - spec.spacing[a];
      if (hi < lo) {
        fits = false;
        break;
      }
      e.center_mm[a] = lo + (hi - lo) * unit(rng);
    }
    if (!fits) continue;
    if (std::any_of(geo.organs.begin(), geo.organs.end(),
                    [&](const Ellipsoid& o) { return boxes_overlap(o, e, spec.spacing); }))
      continue;
    geo.organs.push_back(e);
  }

  geo.lesion_host = static_cast<int>(unit(rng) * spec.organ_count) % spec.organ_count;
  const Ellipsoid& host = geo.organs[geo.lesion_host];
  geo.lesion_radius_mm =
      spec.lesion_radius_frac * *std::min_element(host.radii_mm.begin(), host.radii_mm.end());
  // Centre inside the inner half of the host, so the sphere stays within the host's bounding box.
  std::array<double, 3> u{};
  do {
    for (auto& c : u) c = 2.0 * unit(rng) - 1.0;
  } while (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] > 1.0);
  for (int a = 0; a < 3; ++a) geo.lesion_center_mm[a] = host.center_mm[a] + 0.5 * u[a] * host.radii_mm[a];

  Phantom out{Volume(spec.dims, spec.spacing), LabelMask(spec.dims, spec.spacing), geo};
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0 ? spec.noise_sigma : 1.0);
  const double r2 = geo.lesion_radius_mm * geo.lesion_radius_mm;
  for (std::int64_t z = 0; z < spec.dims[0]; ++z) {
    const double pz = (static_cast<double>(z) + 0.5) * spec.spacing[0];
    for (std::int64_t y = 0; y < spec.dims[1]; ++y) {
      const double py = (static_cast<double>(y) + 0.5) * spec.spacing[1];
      for (std::int64_t x = 0; x < spec.dims[2]; ++x) {
        const double px = (static_cast<double>(x) + 0.5) * spec.spacing[2];
        const std::array<double, 3> p{pz, py, px};
        std::uint8_t label = kBackground;
        for (const auto& o : geo.organs) {
          double s = 0.0;
          for (int a = 0; a < 3; ++a) {
            const double d = (p[a] - o.center_mm[a]) / o.radii_mm[a];
            s += d * d;
          }
          if (s <= 1.0) label = kOrgan;
        }
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) d2 += (p[a] - geo.lesion_center_mm[a]) * (p[a] - geo.lesion_center_mm[a]);
        if (d2 <= r2) label = kLesion;

        out.mask(z, y, x) = label;
        double v = spec.intensity_levels[label];
        if (spec.noise_sigma > 0) v += noise(rng);
        out.image(z, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

}  // namespace casseg
