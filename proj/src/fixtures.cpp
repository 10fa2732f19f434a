#include "hsds/fixtures.hpp"

#include "hsds/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace hsds {

namespace {

constexpr double kDisplayGamma = 1.0 / 2.2;
constexpr double kWellExposedSigma = 0.2;

Image encode(const Eigen::ArrayXd& linear, Index size) {
  Eigen::ArrayXd px = linear.cwiseMax(0.0).cwiseMin(1.0).pow(kDisplayGamma);
  return Image(size, size, 3, std::move(px));
}

}  // namespace

Eigen::ArrayXd toy_radiance(std::uint64_t seed, Index size) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Index plane = size * size;
  Eigen::ArrayXd r(3 * plane);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = 0.6 + 0.8 * u(rng);
  const double gx = u(rng) - 0.5, gy = u(rng) - 0.5, base = 0.2 + 0.6 * u(rng);
  const double fx = 0.2 + 0.8 * u(rng), fy = 0.2 + 0.8 * u(rng), phase = 2 * std::numbers::pi * u(rng);
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      const double sx = static_cast<double>(x) / static_cast<double>(size);
      const double sy = static_cast<double>(y) / static_cast<double>(size);
      const double v = base * (1 + gx * sx + gy * sy) + 0.15 * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + phase);
      for (Index c = 0; c < 3; ++c) r[c * plane + y * size + x] = v * tint[static_cast<std::size_t>(c)];
    }
  const int shapes = 3 + static_cast<int>(u(rng) * 3);
  for (int s = 0; s < shapes; ++s) {
    const double cx = u(rng) * static_cast<double>(size), cy = u(rng) * static_cast<double>(size);
    const double rad = (0.1 + 0.25 * u(rng)) * static_cast<double>(size);
    const double level = 0.2 + 3.3 * u(rng);
    const bool disk = u(rng) < 0.5;
    std::array<double, 3> col{};
    for (auto& c : col) c = 0.4 + 0.6 * u(rng);
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const bool in = disk ? dx * dx + dy * dy < rad * rad : std::abs(dx) < rad && std::abs(dy) < 0.6 * rad;
        if (!in) continue;
        for (Index c = 0; c < 3; ++c) r[c * plane + y * size + x] = level * col[static_cast<std::size_t>(c)];
      }
  }
  return r.cwiseMax(0.0).cwiseMin(4.0);
}

Image fusion_reference(const Image& under, const Image& over) {
  const Index h = under.height(), w = under.width(), plane = h * w;
  const double blur = static_cast<double>(std::min(h, w)) / 8.0;
  const Index k = 2 * static_cast<Index>(std::ceil(3 * blur)) + 1;
  const Plane kernel = gaussian_kernel(k, blur);
  auto weights = [&](const Image& img) {
    auto mono = [&](Index y, Index x) {
      y = std::clamp<Index>(y, 0, h - 1);
      x = std::clamp<Index>(x, 0, w - 1);
      return (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0;
    };
    Plane padded(h + k - 1, w + k - 1);
    for (Index y = 0; y < padded.rows(); ++y)
      for (Index x = 0; x < padded.cols(); ++x) {
        const Index sy = y - k / 2, sx = x - k / 2;
        double well = 1.0;
        for (Index c = 0; c < 3; ++c) {
          const double z = img.at(c, std::clamp<Index>(sy, 0, h - 1), std::clamp<Index>(sx, 0, w - 1)) - 0.5;
          well *= std::exp(-z * z / (2 * kWellExposedSigma * kWellExposedSigma));
        }
        const double lap =
            std::abs(mono(sy - 1, sx) + mono(sy + 1, sx) + mono(sy, sx - 1) + mono(sy, sx + 1) - 4 * mono(sy, sx));
        padded(y, x) = well * (lap + 1e-3) + 1e-12;
      }
    return correlate_valid(padded, kernel);
  };
  const Plane wu = weights(under), wo = weights(over);
  Eigen::ArrayXd px(3 * plane);
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        px[c * plane + y * w + x] = (wu(y, x) * under.at(c, y, x) + wo(y, x) * over.at(c, y, x)) / (wu(y, x) + wo(y, x));
  return Image(h, w, 3, std::move(px));
}

ExposurePair expose(const Eigen::ArrayXd& radiance, Index size, std::string id, bool with_reference) {
  ExposurePair p{encode(0.25 * radiance, size), encode(1.5 * radiance, size), std::nullopt, std::move(id)};
  if (with_reference) p.reference = fusion_reference(p.under, p.over);
  return p;
}

void write_toy_fixture(const std::filesystem::path& dir, const ToyFixtureSpec& spec) {
  std::filesystem::create_directories(dir / "images");
  auto emit = [&](const std::string& name, int count, int offset) {
    DatasetManifest m;
    for (int i = 0; i < count; ++i) {
      const int k = offset + i;
      char id[32];
      std::snprintf(id, sizeof id, "%s%02d", name == "search" ? "s" : "h", i);
      const bool ref = spec.drop_reference_every <= 0 || (k + 1) % spec.drop_reference_every != 0;
      const auto rad = toy_radiance(derive_seed(spec.seed, "scene:" + std::to_string(k)), spec.size);
      const auto p = expose(rad, spec.size, id, ref);
      ManifestEntry e{id, dir / "images" / (std::string(id) + "_under.png"), dir / "images" / (std::string(id) + "_over.png"),
                      std::nullopt};
      write_png(e.under, p.under);
      write_png(e.over, p.over);
      if (p.reference) {
        e.reference = dir / "images" / (std::string(id) + "_ref.png");
        write_png(*e.reference, *p.reference);
      }
      m.entries.push_back(std::move(e));
    }
    write_manifest(dir / (name + ".csv"), m);
  };
  emit("search", spec.search_pairs, 0);
  emit("heldout", spec.heldout_pairs, spec.search_pairs);

  std::ofstream list(dir / "natural.txt");
  list << "# natural-light positives\n";
  for (int i = 0; i < spec.natural_images; ++i) {
    const auto rad = toy_radiance(derive_seed(spec.seed, "natural:" + std::to_string(i)), spec.size + 8);
    const std::string name = "natural_" + std::to_string(i) + ".png";
    write_png(dir / "images" / name, encode(1.3 * rad / (1.0 + rad), spec.size + 8));
    list << "images/" << name << '\n';
  }
}

}  // namespace hsds
