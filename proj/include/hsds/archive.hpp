#pragma once

// Portable named-tensor archive:
//   8 bytes   magic "HSDSARC1"
//   8 bytes   little-endian u64 header length L
//   L bytes   UTF-8 JSON header {"tensors":[{"name","shape":[n,c,h,w],"offset"}], "meta":{...}}
//   payload   float64 little-endian values, each tensor at its byte offset from the payload start

#include "hsds/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace hsds {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorArchive {
  std::map<std::string, Tensor<double>> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const Tensor<double>& at(const std::string& name) const;
};

/// Writes to a sibling temporary file and renames, so a crash never leaves a truncated archive.
void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

}  // namespace hsds
