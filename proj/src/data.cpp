#include "hsds/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace hsds {

std::uint64_t stable_hash(std::string_view text, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view subsystem) {
  return stable_hash(subsystem, stable_hash(std::to_string(seed)));
}

namespace {

std::string trim(std::string s) {
  const auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path, Split split) {
  std::ifstream in(path);
  if (!in) throw MissingFile("manifest not found: " + path.string());
  const auto base = path.parent_path();

  DatasetManifest manifest;
  manifest.split = split;
  std::set<std::string> ids;
  std::string line;
  std::size_t row = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto cells = split_csv_row(line);
    if (!header_seen) {
      if (cells.size() != 4 || cells[0] != "id" || cells[1] != "under" || cells[2] != "over" ||
          cells[3] != "reference")
        throw MalformedManifest(row, "expected header 'id,under,over,reference'");
      header_seen = true;
      continue;
    }
    if (cells.size() != 4) throw MalformedManifest(row, "expected 4 columns, found " + std::to_string(cells.size()));
    if (cells[0].empty() || cells[1].empty() || cells[2].empty()) throw MalformedManifest(row, "empty required field");
    if (!ids.insert(cells[0]).second) throw DuplicateId("duplicate id '" + cells[0] + "' at row " + std::to_string(row));

    ManifestEntry e{cells[0], resolve(base, cells[1]), resolve(base, cells[2]), std::nullopt};
    if (!cells[3].empty()) e.reference = resolve(base, cells[3]);
    for (const auto* p : {&e.under, &e.over})
      if (!std::filesystem::exists(*p)) throw MissingFile("row " + std::to_string(row) + ": missing " + p->string());
    if (e.reference && !std::filesystem::exists(*e.reference))
      throw MissingFile("row " + std::to_string(row) + ": missing " + e.reference->string());
    manifest.entries.push_back(std::move(e));
  }
  if (!header_seen) throw MalformedManifest(row == 0 ? 1 : row, "missing header");
  return manifest;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  const auto base = path.parent_path();
  auto rel = [&](const std::filesystem::path& p) { return std::filesystem::relative(p, base).generic_string(); };
  out << "id,under,over,reference\n";
  for (const auto& e : manifest.entries)
    out << e.id << ',' << rel(e.under) << ',' << rel(e.over) << ',' << (e.reference ? rel(*e.reference) : "") << '\n';
}

ExposurePair load_exposure_pair(const ManifestEntry& entry) {
  ExposurePair pair{read_image(entry.under), read_image(entry.over), std::nullopt, entry.id};
  if (entry.reference) pair.reference = read_image(*entry.reference);
  auto extent = [](const Image& im) {
    return std::to_string(im.height()) + "x" + std::to_string(im.width()) + "x" + std::to_string(im.channels());
  };
  if (!pair.under.same_extent(pair.over))
    throw DimensionMismatch(entry.id + ": under " + extent(pair.under) + " vs over " + extent(pair.over));
  if (pair.reference && !pair.reference->same_extent(pair.under))
    throw DimensionMismatch(entry.id + ": reference " + extent(*pair.reference) + " vs under " + extent(pair.under));
  return pair;
}

std::vector<ExposurePair> load_pairs(const DatasetManifest& manifest) {
  std::vector<ExposurePair> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) out.push_back(load_exposure_pair(e));
  return out;
}

ExposurePair random_crop_pair(const ExposurePair& pair, Index size, Rng& rng) {
  const Index h = pair.under.height(), w = pair.under.width();
  if (size > std::min(h, w))
    throw CropTooLarge("crop " + std::to_string(size) + " exceeds " + std::to_string(h) + "x" + std::to_string(w));
  std::uniform_int_distribution<Index> dy(0, h - size), dx(0, w - size);
  const Index y = dy(rng);
  const Index x = dx(rng);
  ExposurePair out{pair.under.crop(y, x, size, size), pair.over.crop(y, x, size, size), std::nullopt, pair.id};
  if (pair.reference) out.reference = pair.reference->crop(y, x, size, size);
  return out;
}

std::pair<DatasetManifest, DatasetManifest> split_by_hash(const DatasetManifest& manifest, std::uint64_t seed) {
  auto entries = manifest.entries;
  const std::uint64_t basis = derive_seed(seed, "split");
  std::stable_sort(entries.begin(), entries.end(), [&](const ManifestEntry& a, const ManifestEntry& b) {
    return stable_hash(a.id, basis) < stable_hash(b.id, basis);
  });
  DatasetManifest train{{}, Split::train}, val{{}, Split::val};
  const std::size_t half = (entries.size() + 1) / 2;
  for (std::size_t i = 0; i < entries.size(); ++i) (i < half ? train : val).entries.push_back(entries[i]);
  return {train, val};
}

NaturalPool load_natural_pool(const std::filesystem::path& list, std::uint64_t seed) {
  std::ifstream in(list);
  if (!in) throw MissingFile("natural pool list not found: " + list.string());
  NaturalPool pool{{}, seed};
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto p = resolve(list.parent_path(), line);
    if (!std::filesystem::exists(p)) throw MissingFile("natural pool image missing: " + p.string());
    pool.images.push_back(read_image(p));
  }
  if (pool.images.empty()) throw EmptyPool("natural pool list is empty: " + list.string());
  return pool;
}

Image resize_bilinear(const Image& img, Index height, Index width) {
  const Index c = img.channels();
  Eigen::ArrayXd out(height * width * c);
  const double sy = static_cast<double>(img.height()) / height;
  const double sx = static_cast<double>(img.width()) / width;
  for (Index k = 0; k < c; ++k)
    for (Index i = 0; i < height; ++i) {
      const double fy = std::clamp((i + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height() - 1));
      const Index y0 = static_cast<Index>(std::floor(fy));
      const Index y1 = std::min(y0 + 1, img.height() - 1);
      const double ty = fy - y0;
      for (Index j = 0; j < width; ++j) {
        const double fx = std::clamp((j + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width() - 1));
        const Index x0 = static_cast<Index>(std::floor(fx));
        const Index x1 = std::min(x0 + 1, img.width() - 1);
        const double tx = fx - x0;
        const double top = (1 - tx) * img.at(k, y0, x0) + tx * img.at(k, y0, x1);
        const double bot = (1 - tx) * img.at(k, y1, x0) + tx * img.at(k, y1, x1);
        out[(k * height + i) * width + j] = (1 - ty) * top + ty * bot;
      }
    }
  return Image(height, width, c, std::move(out));
}

Image sample_natural(const NaturalPool& pool, Index height, Index width, Index channels, Rng& rng) {
  if (pool.images.empty()) throw EmptyPool("natural pool is empty");
  std::uniform_int_distribution<std::size_t> pick(0, pool.images.size() - 1);
  Image img = pool.images[pick(rng)];
  if (img.height() < height || img.width() < width) {
    const double scale = std::max(static_cast<double>(height) / img.height(), static_cast<double>(width) / img.width());
    img = resize_bilinear(img, static_cast<Index>(std::ceil(img.height() * scale)),
                          static_cast<Index>(std::ceil(img.width() * scale)));
  }
  img = img.crop((img.height() - height) / 2, (img.width() - width) / 2, height, width);
  if (channels == 3) return img.to_rgb();
  if (img.channels() == 3) {
    const Eigen::ArrayXXd y = img.luminance();
    Eigen::ArrayXd px(height * width);
    for (Index i = 0; i < height; ++i)
      for (Index j = 0; j < width; ++j) px[i * width + j] = std::clamp(y(i, j), 0.0, 1.0);
    return Image(height, width, 1, std::move(px));
  }
  return img;
}

}  // namespace hsds
