#pragma once

// Synthetic multi-exposure scenes for tests and smoke runs.

#include "hsds/data.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace hsds {

struct ToyFixtureSpec {
  std::uint64_t seed = 7;
  int search_pairs = 8;
  int heldout_pairs = 4;
  int natural_images = 5;
  Index size = 48;
  /// Every n-th pair is written without a reference image (0 disables).
  int drop_reference_every = 4;
};

/// Scene radiance in [0, 4], three channels, CHW order.
Eigen::ArrayXd toy_radiance(std::uint64_t seed, Index size);

/// Exposure-fusion blend of two sources: per-pixel well-exposedness times local contrast,
/// smoothed with a Gaussian of width min(H, W) / 8.
Image fusion_reference(const Image& under, const Image& over);

/// Under and over exposures of a radiance map, plus their fusion_reference.
ExposurePair expose(const Eigen::ArrayXd& radiance, Index size, std::string id, bool with_reference);

/// Writes PNGs plus search.csv, heldout.csv and natural.txt into dir.
void write_toy_fixture(const std::filesystem::path& dir, const ToyFixtureSpec& spec = {});

}  // namespace hsds
