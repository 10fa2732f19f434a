#pragma once

// Frozen feature extractors and the hybrid-supervised contrastive constraint.

#include "hsds/archive.hpp"
#include "hsds/autodiff.hpp"
#include "hsds/data.hpp"

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hsds {

class ExtractorUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class EmptyNegatives : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ExtractorBackend { pretrained_vgg16, deterministic_fallback };

/// Frozen image -> per-layer features map. Implementations must be deterministic.
template <typename Scalar>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<ad::Var<Scalar>> extract(const ad::Var<Scalar>& image) const = 0;
  virtual std::size_t layer_count() const = 0;
  virtual std::string backend_name() const = 0;
};

/// Sequential conv/ReLU/pool stack whose ReLU outputs are the feature layers.
template <typename Scalar>
class ConvFeatureExtractor final : public FeatureExtractor<Scalar> {
 public:
  enum class StageKind { conv_relu, avg_pool, max_pool };
  struct Stage {
    StageKind kind;
    ad::Var<Scalar> weight;
    ad::Var<Scalar> bias;
  };

  ConvFeatureExtractor(ExtractorBackend backend, std::vector<Stage> stages, std::vector<std::size_t> taps,
                       std::optional<std::pair<std::array<double, 3>, std::array<double, 3>>> normalization = std::nullopt)
      : backend_(backend), stages_(std::move(stages)), taps_(std::move(taps)), normalization_(normalization) {}

  std::vector<ad::Var<Scalar>> extract(const ad::Var<Scalar>& image) const override {
    if (image.shape().c != 3) throw ShapeMismatch("feature extractor expects 3 channels, got " + image.shape().str());
    ad::Var<Scalar> x = image;
    if (normalization_) {
      Tensor<Scalar> scale(Shape{1, 3, 1, 1}), shift(Shape{1, 3, 1, 1});
      for (Index c = 0; c < 3; ++c) {
        scale[c] = static_cast<Scalar>(1.0 / normalization_->second[static_cast<std::size_t>(c)]);
        shift[c] = static_cast<Scalar>(-normalization_->first[static_cast<std::size_t>(c)] /
                                       normalization_->second[static_cast<std::size_t>(c)]);
      }
      x = ad::add(ad::mul(x, ad::constant(scale)), ad::constant(shift));
    }
    std::vector<ad::Var<Scalar>> feats;
    std::size_t next_tap = 0;
    for (std::size_t s = 0; s < stages_.size() && next_tap < taps_.size(); ++s) {
      const auto& st = stages_[s];
      switch (st.kind) {
        case StageKind::conv_relu:
          x = ad::relu(ad::conv2d(x, st.weight, st.bias,
                                  ad::same_padding(st.weight.shape().h, st.weight.shape().w)));
          break;
        case StageKind::avg_pool: x = ad::avg_pool2(x); break;
        case StageKind::max_pool: x = ad::max_pool2(x); break;
      }
      if (s == taps_[next_tap]) {
        feats.push_back(x);
        ++next_tap;
      }
    }
    return feats;
  }

  std::size_t layer_count() const override { return taps_.size(); }
  std::string backend_name() const override {
    return backend_ == ExtractorBackend::pretrained_vgg16 ? "pretrained_vgg16" : "deterministic_fallback";
  }

 private:
  ExtractorBackend backend_;
  std::vector<Stage> stages_;
  std::vector<std::size_t> taps_;
  std::optional<std::pair<std::array<double, 3>, std::array<double, 3>>> normalization_;
};

inline constexpr std::uint64_t kFallbackExtractorSeed = 0x5eedf00dULL;

/// Four conv3x3+ReLU stages (3->8->8, pool, 8->16->16) with fixed-seed He-normal weights.
template <typename Scalar>
std::shared_ptr<FeatureExtractor<Scalar>> make_fallback_extractor(std::uint64_t seed = kFallbackExtractorSeed) {
  using E = ConvFeatureExtractor<Scalar>;
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  auto conv = [&](Index cin, Index cout) {
    Tensor<Scalar> w(Shape{cout, cin, 3, 3});
    const double sd = std::sqrt(2.0 / static_cast<double>(cin * 9));
    for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(sd * g(rng));
    Tensor<Scalar> b(Shape{cout, 1, 1, 1});
    for (Index i = 0; i < b.size(); ++i) b[i] = static_cast<Scalar>(0.01 * g(rng));
    return typename E::Stage{E::StageKind::conv_relu, ad::constant(std::move(w)), ad::constant(std::move(b))};
  };
  std::vector<typename E::Stage> stages{conv(3, 8), conv(8, 8), {E::StageKind::avg_pool, {}, {}}, conv(8, 16), conv(16, 16)};
  return std::make_shared<E>(ExtractorBackend::deterministic_fallback, std::move(stages), std::vector<std::size_t>{0, 1, 3, 4});
}

/// VGG-16 up to relu2_2 from an archive with torchvision names features.{0,2,5,7}.{weight,bias};
/// the feature layers are relu1_1, relu1_2, relu2_1, relu2_2.
template <typename Scalar>
std::shared_ptr<FeatureExtractor<Scalar>> load_vgg16_extractor(const std::filesystem::path& weights) {
  using E = ConvFeatureExtractor<Scalar>;
  TensorArchive ar;
  try {
    ar = read_archive(weights);
  } catch (const std::exception& e) {
    throw ExtractorUnavailable(std::string("VGG-16 weights unavailable: ") + e.what());
  }
  const std::array<std::pair<int, Shape>, 4> convs{{{0, {64, 3, 3, 3}}, {2, {64, 64, 3, 3}}, {5, {128, 64, 3, 3}}, {7, {128, 128, 3, 3}}}};
  std::vector<typename E::Stage> stages;
  for (const auto& [idx, shape] : convs) {
    const std::string base = "features." + std::to_string(idx);
    if (!ar.tensors.count(base + ".weight") || !ar.tensors.count(base + ".bias"))
      throw ExtractorUnavailable("VGG-16 archive lacks " + base);
    const auto& w = ar.at(base + ".weight");
    const auto& b = ar.at(base + ".bias");
    if (!(w.shape() == shape) || b.size() != shape.n)
      throw ExtractorUnavailable("VGG-16 archive: unexpected shape for " + base + " " + w.shape().str());
    if (idx == 5) stages.push_back({E::StageKind::max_pool, {}, {}});
    stages.push_back({E::StageKind::conv_relu, ad::constant(w.template cast<Scalar>()),
                      ad::constant(b.reshaped(Shape{shape.n, 1, 1, 1}).template cast<Scalar>())});
  }
  std::pair<std::array<double, 3>, std::array<double, 3>> norm{{0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}};
  return std::make_shared<E>(ExtractorBackend::pretrained_vgg16, std::move(stages), std::vector<std::size_t>{0, 1, 3, 4}, norm);
}

template <typename Scalar>
std::vector<ad::Var<Scalar>> extract_features(const FeatureExtractor<Scalar>* g, const ad::Var<Scalar>& img) {
  if (!g) throw ExtractorUnavailable("no feature extractor loaded");
  return g->extract(img);
}

inline constexpr double kContrastEpsilon = 1e-8;

/// Per-sample mean squared difference, shape (N,1,1,1).
template <typename Scalar>
ad::Var<Scalar> mse_per_sample(const ad::Var<Scalar>& a, const ad::Var<Scalar>& b) {
  const Index per = a.shape().sample();
  return ad::affine(ad::sum_per_sample(ad::square(ad::sub(a, b))), Scalar(1) / static_cast<Scalar>(per));
}

/// Negative sample: the under/over exposures of one pair (batched like the fused image).
template <typename Scalar>
using NegativePair = std::pair<Tensor<Scalar>, Tensor<Scalar>>;

/// Sum over layers of MSE(F, P) / (sum over negatives of MSE(F, u) + MSE(F, o) + eps),
/// averaged over the batch.
template <typename Scalar>
ad::Var<Scalar> gamma_p(const FeatureExtractor<Scalar>* g, const ad::Var<Scalar>& fused, const Tensor<Scalar>& positive,
                        const std::vector<NegativePair<Scalar>>& negatives) {
  if (!g) throw ExtractorUnavailable("no feature extractor loaded");
  if (negatives.empty()) throw EmptyNegatives("gamma_p: at least one negative pair is required");
  const auto F = g->extract(fused);
  const auto P = g->extract(ad::constant(positive));
  std::vector<std::vector<ad::Var<Scalar>>> U, O;
  for (const auto& [u, o] : negatives) {
    U.push_back(g->extract(ad::constant(u)));
    O.push_back(g->extract(ad::constant(o)));
  }
  ad::Var<Scalar> total;
  for (std::size_t i = 0; i < F.size(); ++i) {
    auto num = mse_per_sample(F[i], P[i]);
    ad::Var<Scalar> den;
    for (std::size_t m = 0; m < negatives.size(); ++m) {
      auto d = ad::add(mse_per_sample(F[i], U[m][i]), mse_per_sample(F[i], O[m][i]));
      den = den.defined() ? ad::add(den, d) : d;
    }
    auto term = ad::div(num, ad::affine(den, Scalar(1), static_cast<Scalar>(kContrastEpsilon)));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return ad::mean(total);
}

/// Gamma_R (reference positive, skipped when absent) + Gamma_N (natural positive).
template <typename Scalar>
ad::Var<Scalar> gamma_h(const FeatureExtractor<Scalar>* g, const ad::Var<Scalar>& fused,
                        const std::optional<Tensor<Scalar>>& reference, const Tensor<Scalar>& natural,
                        const std::vector<NegativePair<Scalar>>& negatives) {
  auto gn = gamma_p(g, fused, natural, negatives);
  if (!reference) return gn;
  return ad::add(gamma_p(g, fused, *reference, negatives), gn);
}

}  // namespace hsds
