#include "hsds/archive.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace hsds {

namespace {

constexpr std::array<char, 8> kMagic{'H', 'S', 'D', 'S', 'A', 'R', 'C', '1'};

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

}  // namespace

const Tensor<double>& TensorArchive::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ArchiveError("archive has no tensor '" + name + "'");
  return it->second;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::json header;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    const Shape& s = t.shape();
    header["tensors"].push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(double);
  }
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot write " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : archive.tensors)
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!out) throw ArchiveError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open archive " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw ArchiveError(path.string() + ": not a tensor archive");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1ull << 30)) throw ArchiveError(path.string() + ": bad header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ArchiveError(path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(path.string() + ": header is not valid JSON: " + e.what());
  }
  const auto payload_start = in.tellg();
  TensorArchive archive;
  archive.meta = header.value("meta", nlohmann::json::object());
  try {
    for (const auto& jt : header.at("tensors")) {
      const auto dims = jt.at("shape").get<std::vector<Index>>();
      if (dims.size() != 4) throw ArchiveError(path.string() + ": tensor shape must have 4 dims");
      const Shape s{dims[0], dims[1], dims[2], dims[3]};
      Tensor<double> t(s);
      in.seekg(payload_start + static_cast<std::streamoff>(jt.at("offset").get<std::uint64_t>()));
      in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
      if (!in) throw ArchiveError(path.string() + ": truncated data for '" + jt.at("name").get<std::string>() + "'");
      archive.tensors.emplace(jt.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(path.string() + ": malformed header: " + e.what());
  }
  return archive;
}

}  // namespace hsds
