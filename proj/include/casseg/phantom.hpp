#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "casseg/volume.hpp"

namespace casseg {

// Synthetic abdomen surrogate: axis-aligned organ ellipsoids plus one
// spherical lesion, on a uniform background with additive Gaussian noise.
struct PhantomSpec {
  Dims3 dims{48, 96, 96};
  Spacing3 spacing{2.0f, 1.0f, 1.0f};
  int organ_count = 2;
  // Lesion radius as a fraction of the host organ's smallest semi-axis (mm).
  double lesion_radius_frac = 0.45;
  // Background, organ, lesion. Lesion sits between the other two.
  std::array<double, 3> intensity_levels{0.0, 200.0, 100.0};
  double noise_sigma = 20.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Ellipsoid {
  std::array<double, 3> center_mm{};
  std::array<double, 3> radii_mm{};
};

struct PhantomGeometry {
  std::vector<Ellipsoid> organs;
  std::array<double, 3> lesion_center_mm{};
  double lesion_radius_mm = 0.0;
  int lesion_host = 0;
};

struct Phantom {
  Volume image;
  LabelMask mask;
  PhantomGeometry geometry;
};

// Deterministic in spec.seed. Throws Placement if the organs cannot be placed
// disjointly within the bounded number of attempts.
Phantom synth_phantom(const PhantomSpec& spec);

}  // namespace casseg
