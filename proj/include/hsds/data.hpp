#pragma once

#include "hsds/image.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hsds {

using Rng = std::mt19937_64;

/// 64-bit FNV-1a; stable across platforms and runs.
std::uint64_t stable_hash(std::string_view text, std::uint64_t basis = 14695981039346656037ull);
/// Subsystem seed derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view subsystem);

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class MissingFile : public DataError {
 public:
  using DataError::DataError;
};
class MalformedManifest : public DataError {
 public:
  MalformedManifest(std::size_t row, const std::string& what)
      : DataError("manifest row " + std::to_string(row) + ": " + what), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};
class DuplicateId : public DataError {
 public:
  using DataError::DataError;
};
class DimensionMismatch : public DataError {
 public:
  using DataError::DataError;
};
class CropTooLarge : public DataError {
 public:
  using DataError::DataError;
};
class EmptyPool : public DataError {
 public:
  using DataError::DataError;
};

struct ExposurePair {
  Image under;
  Image over;
  std::optional<Image> reference;
  std::string id;
};

enum class Split { train, val, test };

struct ManifestEntry {
  std::string id;
  std::filesystem::path under;
  std::filesystem::path over;
  std::optional<std::filesystem::path> reference;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  Split split = Split::train;
};

/// Parses `id,under,over,reference` CSV. Relative paths resolve against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path, Split split = Split::train);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

ExposurePair load_exposure_pair(const ManifestEntry& entry);
std::vector<ExposurePair> load_pairs(const DatasetManifest& manifest);

/// Crops every image of the pair at one shared random offset.
ExposurePair random_crop_pair(const ExposurePair& pair, Index size, Rng& rng);

/// Deterministic 50/50 split by hashed id: (train, val).
std::pair<DatasetManifest, DatasetManifest> split_by_hash(const DatasetManifest& manifest, std::uint64_t seed);

struct NaturalPool {
  std::vector<Image> images;
  std::uint64_t rng_seed = 0;
};

/// Reads a pool list file: one image path per line, relative to the list's directory.
NaturalPool load_natural_pool(const std::filesystem::path& list, std::uint64_t seed);

/// One randomly chosen pool image, upsampled if needed and center-cropped to (height, width, channels).
Image sample_natural(const NaturalPool& pool, Index height, Index width, Index channels, Rng& rng);

/// Bilinear resize (align-corners=false convention).
Image resize_bilinear(const Image& img, Index height, Index width);

}  // namespace hsds
