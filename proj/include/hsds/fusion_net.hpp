#pragma once

// Fusion network: feature-attention merge of the two exposures, then a
// Retinex-style dual stream. The intensity and illumination blocks are each a
// chain of searchable edges unrolled T times with shared weights; their
// product is mapped to RGB by a 1x1 conv + sigmoid head.

#include "hsds/ops_space.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace hsds {

struct FusionConfig {
  Index width = 16;
  Index stream_edges = 2;
  Index iterations = 3;
};

inline nlohmann::json to_json(const FusionConfig& c) {
  return {{"width", c.width}, {"stream_edges", c.stream_edges}, {"iterations", c.iterations}};
}
inline FusionConfig fusion_config_from_json(const nlohmann::json& j) {
  return FusionConfig{j.at("width").get<Index>(), j.at("stream_edges").get<Index>(), j.at("iterations").get<Index>()};
}

enum class ModelMode { supernet, finalized };

template <typename Scalar>
struct FusionModel {
  FusionConfig config;
  // fixed layers (part of omega)
  ad::Var<Scalar> stem_weight, stem_bias;      // 3 -> width, 3x3
  ad::Var<Scalar> head_under_w, head_under_b;  // width -> 1, 1x1
  ad::Var<Scalar> head_over_w, head_over_b;    // width -> 1, 1x1
  ad::Var<Scalar> out_weight, out_bias;        // width -> 3, 1x1
  // searchable edges: attention encoder, then intensity block, then illumination block
  ArchParams<Scalar> arch;

  std::size_t attention_begin() const { return 0; }
  std::size_t intensity_begin() const { return 2; }
  std::size_t illumination_begin() const { return 2 + static_cast<std::size_t>(config.stream_edges); }

  ModelMode mode() const {
    for (const auto& e : arch.edges)
      if (!e.finalized) return ModelMode::supernet;
    return ModelMode::finalized;
  }
};

namespace detail {
template <typename Scalar>
ad::Var<Scalar> conv1x1(const ad::Var<Scalar>& x, const ad::Var<Scalar>& w, const ad::Var<Scalar>& b) {
  return ad::conv2d(x, w, b, ad::ConvGeometry{});
}
}  // namespace detail

template <typename Scalar>
FusionModel<Scalar> make_fusion_model(const FusionConfig& cfg, Rng& rng, std::size_t retain_p = 2,
                                      std::optional<double> theta = std::nullopt, double alpha_noise = 1e-3,
                                      bool scale_for_mixing = true) {
  if (cfg.width < 1 || cfg.stream_edges < 1 || cfg.iterations < 1)
    throw std::invalid_argument("fusion model: width, stream_edges and iterations must be >= 1");
  FusionModel<Scalar> m;
  m.config = cfg;
  const Index c = cfg.width;
  m.stem_weight = ad::parameter(kaiming_uniform<Scalar>(Shape{c, 3, 3, 3}, rng));
  m.stem_bias = ad::parameter(Tensor<Scalar>(Shape{c, 1, 1, 1}));
  m.head_under_w = ad::parameter(kaiming_uniform<Scalar>(Shape{1, c, 1, 1}, rng));
  m.head_under_b = ad::parameter(Tensor<Scalar>(Shape{1, 1, 1, 1}));
  m.head_over_w = ad::parameter(kaiming_uniform<Scalar>(Shape{1, c, 1, 1}, rng));
  m.head_over_b = ad::parameter(Tensor<Scalar>(Shape{1, 1, 1, 1}));
  m.out_weight = ad::parameter(kaiming_uniform<Scalar>(Shape{3, c, 1, 1}, rng));
  m.out_bias = ad::parameter(Tensor<Scalar>(Shape{3, 1, 1, 1}));

  m.arch.retain_p = retain_p;
  m.arch.theta = theta;
  auto add_edges = [&](const std::string& prefix, Index count) {
    for (Index i = 0; i < count; ++i) m.arch.edges.push_back(make_mixed_edge<Scalar>(prefix + "." + std::to_string(i), c, rng));
  };
  add_edges("attention", 2);
  add_edges("intensity", cfg.stream_edges);
  add_edges("illumination", cfg.stream_edges);
  for (auto& e : m.arch.edges) {
    init_alpha(e, rng, alpha_noise);
    if (scale_for_mixing) rescale_for_mixing(e);
  }
  return m;
}

/// Named network weights (omega). Finalized edges contribute only their retained candidates.
template <typename Scalar>
std::vector<std::pair<std::string, ad::Var<Scalar>>> named_omega(const FusionModel<Scalar>& m) {
  std::vector<std::pair<std::string, ad::Var<Scalar>>> out{
      {"stem.weight", m.stem_weight},       {"stem.bias", m.stem_bias},
      {"head_under.weight", m.head_under_w}, {"head_under.bias", m.head_under_b},
      {"head_over.weight", m.head_over_w},   {"head_over.bias", m.head_over_b},
      {"out.weight", m.out_weight},          {"out.bias", m.out_bias}};
  for (const auto& e : m.arch.edges) {
    for (const auto& op : e.candidates) {
      if (e.finalized) {
        const auto& r = e.finalized->retained;
        if (std::none_of(r.begin(), r.end(), [&](const auto& p) { return p.first == op.kind; })) continue;
      }
      out.emplace_back(e.name + "." + op_name(op.kind) + ".weight", op.weight);
      out.emplace_back(e.name + "." + op_name(op.kind) + ".bias", op.bias);
    }
  }
  return out;
}

template <typename Scalar>
std::vector<ad::Var<Scalar>> omega_parameters(const FusionModel<Scalar>& m) {
  std::vector<ad::Var<Scalar>> out;
  for (auto& [name, v] : named_omega(m)) out.push_back(v);
  return out;
}

template <typename Scalar>
std::vector<ad::Var<Scalar>> alpha_parameters(const FusionModel<Scalar>& m) {
  std::vector<ad::Var<Scalar>> out;
  for (const auto& e : m.arch.edges) out.push_back(e.alpha);
  return out;
}

/// x_{t+1} = block(x_t), T times.
template <typename Scalar, typename Block>
ad::Var<Scalar> iterate(Block&& block, ad::Var<Scalar> x, Index times) {
  for (Index t = 0; t < times; ++t) x = block(x);
  return x;
}

template <typename Scalar>
ad::Var<Scalar> apply_edges(const FusionModel<Scalar>& m, std::size_t begin, std::size_t count, ad::Var<Scalar> x) {
  for (std::size_t e = begin; e < begin + count; ++e) x = mixed_forward(m.arch.edges[e], x);
  return x;
}

/// Shared encoder on both sources, per-source attention logits, softmax across sources.
/// Returns the merged features; attention maps are written to *attention when requested.
template <typename Scalar>
ad::Var<Scalar> attention_merge(const FusionModel<Scalar>& m, const ad::Var<Scalar>& under, const ad::Var<Scalar>& over,
                                std::pair<ad::Var<Scalar>, ad::Var<Scalar>>* attention = nullptr) {
  if (!(under.shape() == over.shape())) throw ShapeMismatch("attention_merge", under.shape(), over.shape());
  if (under.shape().c != 3) throw ShapeMismatch("attention_merge: expected 3-channel input, got " + under.shape().str());
  const Index n = under.shape().n;
  // both sources share one encoder pass
  auto both = ad::concat_batch(under, over);
  auto feat = ad::leaky_relu(ad::conv2d(both, m.stem_weight, m.stem_bias, ad::same_padding(3, 3)),
                             static_cast<Scalar>(kLeakySlope));
  feat = apply_edges(m, m.attention_begin(), 2, feat);
  auto f_u = ad::slice_batch(feat, 0, n);
  auto f_o = ad::slice_batch(feat, n, n);
  auto l_u = detail::conv1x1(f_u, m.head_under_w, m.head_under_b);
  auto l_o = detail::conv1x1(f_o, m.head_over_w, m.head_over_b);
  // two-way softmax: a_u = sigmoid(l_u - l_o)
  auto a_u = ad::sigmoid(ad::sub(l_u, l_o));
  auto a_o = ad::affine(a_u, Scalar(-1), Scalar(1));
  if (attention) *attention = {a_u, a_o};
  return ad::add(ad::mul(f_u, a_u), ad::mul(f_o, a_o));
}

template <typename Scalar>
ad::Var<Scalar> intensity_stream(const FusionModel<Scalar>& m, const ad::Var<Scalar>& f) {
  const auto k = static_cast<std::size_t>(m.config.stream_edges);
  return iterate<Scalar>([&](const ad::Var<Scalar>& x) { return apply_edges(m, m.intensity_begin(), k, x); }, f,
                         m.config.iterations);
}

template <typename Scalar>
ad::Var<Scalar> illumination_stream(const FusionModel<Scalar>& m, const ad::Var<Scalar>& f) {
  const auto k = static_cast<std::size_t>(m.config.stream_edges);
  return ad::sigmoid(iterate<Scalar>([&](const ad::Var<Scalar>& x) { return apply_edges(m, m.illumination_begin(), k, x); },
                                     f, m.config.iterations));
}

/// intensity * illumination -> 1x1 conv -> sigmoid.
template <typename Scalar>
ad::Var<Scalar> compose_output(const FusionModel<Scalar>& m, const ad::Var<Scalar>& intensity,
                               const ad::Var<Scalar>& illumination) {
  if (!(intensity.shape() == illumination.shape()))
    throw ShapeMismatch("compose_output", intensity.shape(), illumination.shape());
  return ad::sigmoid(detail::conv1x1(ad::mul(intensity, illumination), m.out_weight, m.out_bias));
}

template <typename Scalar>
ad::Var<Scalar> forward(const FusionModel<Scalar>& m, const ad::Var<Scalar>& under, const ad::Var<Scalar>& over) {
  auto merged = attention_merge(m, under, over);
  return compose_output(m, intensity_stream(m, merged), illumination_stream(m, merged));
}

template <typename Scalar>
void set_requires_grad(const std::vector<ad::Var<Scalar>>& params, bool on) {
  for (auto v : params) v.set_requires_grad(on);
}

template <typename Scalar>
void zero_grad(const std::vector<ad::Var<Scalar>>& params) {
  for (auto v : params) v.zero_grad();
}

/// Inference-only forward on plain tensors; gradients are not tracked.
template <typename Scalar>
Tensor<Scalar> fuse(const FusionModel<Scalar>& m, const Tensor<Scalar>& under, const Tensor<Scalar>& over) {
  auto omega = omega_parameters(m);
  auto alpha = alpha_parameters(m);
  std::vector<bool> saved;
  for (const auto& v : omega) saved.push_back(v.requires_grad());
  for (const auto& v : alpha) saved.push_back(v.requires_grad());
  set_requires_grad(omega, false);
  set_requires_grad(alpha, false);
  Tensor<Scalar> out = forward(m, ad::constant(under), ad::constant(over)).value();
  std::size_t i = 0;
  for (auto v : omega) v.set_requires_grad(saved[i++]);
  for (auto v : alpha) v.set_requires_grad(saved[i++]);
  return out;
}

}  // namespace hsds
