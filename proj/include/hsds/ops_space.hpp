#pragma once

#include "hsds/autodiff.hpp"
#include "hsds/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hsds {

enum class OpKind { conv1x1, conv3x3, conv5x5, conv7x7, conv1x3, conv3x1, conv1x5, conv5x1, dil3x3, dil5x5, dil7x7 };

inline constexpr std::array<OpKind, 11> kOpKinds{OpKind::conv1x1, OpKind::conv3x3, OpKind::conv5x5, OpKind::conv7x7,
                                                 OpKind::conv1x3, OpKind::conv3x1, OpKind::conv1x5, OpKind::conv5x1,
                                                 OpKind::dil3x3,  OpKind::dil5x5,  OpKind::dil7x7};

struct OpSpec {
  std::string_view name;
  Index kernel_h;
  Index kernel_w;
  Index dilation;
};

inline constexpr OpSpec op_spec(OpKind kind) {
  switch (kind) {
    case OpKind::conv1x1: return {"conv1x1", 1, 1, 1};
    case OpKind::conv3x3: return {"conv3x3", 3, 3, 1};
    case OpKind::conv5x5: return {"conv5x5", 5, 5, 1};
    case OpKind::conv7x7: return {"conv7x7", 7, 7, 1};
    case OpKind::conv1x3: return {"conv1x3", 1, 3, 1};
    case OpKind::conv3x1: return {"conv3x1", 3, 1, 1};
    case OpKind::conv1x5: return {"conv1x5", 1, 5, 1};
    case OpKind::conv5x1: return {"conv5x1", 5, 1, 1};
    case OpKind::dil3x3: return {"dil3x3", 3, 3, 2};
    case OpKind::dil5x5: return {"dil5x5", 5, 5, 2};
    case OpKind::dil7x7: return {"dil7x7", 7, 7, 2};
  }
  return {"?", 0, 0, 0};
}

inline std::string op_name(OpKind kind) { return std::string(op_spec(kind).name); }

inline OpKind op_kind_from_name(std::string_view name) {
  for (OpKind k : kOpKinds)
    if (op_spec(k).name == name) return k;
  throw std::invalid_argument("unknown op kind '" + std::string(name) + "'");
}

inline constexpr double kLeakySlope = 0.2;

/// Kaiming-uniform weights for a LeakyReLU(0.2) conv, zero bias.
template <typename Scalar>
Tensor<Scalar> kaiming_uniform(const Shape& weight_shape, Rng& rng) {
  const double fan_in = static_cast<double>(weight_shape.c * weight_shape.h * weight_shape.w);
  const double bound = std::sqrt(6.0 / ((1.0 + kLeakySlope * kLeakySlope) * fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<Scalar> t(weight_shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(u(rng));
  return t;
}

/// conv(kind) -> LeakyReLU(0.2), channel- and size-preserving.
template <typename Scalar>
struct CandidateOp {
  OpKind kind;
  ad::Var<Scalar> weight;
  ad::Var<Scalar> bias;

  Index dilation() const { return op_spec(kind).dilation; }
  Index channels() const { return weight.shape().n; }
};

template <typename Scalar>
CandidateOp<Scalar> make_candidate(OpKind kind, Index channels, Rng& rng) {
  const OpSpec s = op_spec(kind);
  return CandidateOp<Scalar>{kind, ad::parameter(kaiming_uniform<Scalar>(Shape{channels, channels, s.kernel_h, s.kernel_w}, rng)),
                             ad::parameter(Tensor<Scalar>(Shape{channels, 1, 1, 1}))};
}

template <typename Scalar>
ad::Var<Scalar> apply(const CandidateOp<Scalar>& op, const ad::Var<Scalar>& x) {
  const OpSpec s = op_spec(op.kind);
  auto y = ad::conv2d(x, op.weight, op.bias, ad::same_padding(s.kernel_h, s.kernel_w, s.dilation));
  return ad::leaky_relu(y, static_cast<Scalar>(kLeakySlope));
}

/// All eleven primitives mapping channels -> channels, in declaration order.
template <typename Scalar>
std::vector<CandidateOp<Scalar>> build_candidate_set(Index channels, Rng& rng) {
  if (channels < 1) throw std::invalid_argument("build_candidate_set: channels must be >= 1");
  std::vector<CandidateOp<Scalar>> ops;
  ops.reserve(kOpKinds.size());
  for (OpKind k : kOpKinds) ops.push_back(make_candidate<Scalar>(k, channels, rng));
  return ops;
}

template <typename Scalar>
struct FinalizedEdge {
  std::vector<std::pair<OpKind, Scalar>> retained;  // descending weight
  std::vector<Scalar> source_alpha;                 // logits at finalization, one per candidate
};

/// One searchable position: candidates mixed by softmax over the logits of active candidates.
/// alpha holds one logit per original candidate; inactive logits are ignored.
template <typename Scalar>
struct MixedEdge {
  std::string name;
  std::vector<CandidateOp<Scalar>> candidates;
  ad::Var<Scalar> alpha;
  std::vector<bool> active;
  std::optional<FinalizedEdge<Scalar>> finalized;

  std::size_t active_count() const { return static_cast<std::size_t>(std::count(active.begin(), active.end(), true)); }

  std::vector<Scalar> active_alpha() const {
    std::vector<Scalar> out;
    for (std::size_t i = 0; i < active.size(); ++i)
      if (active[i]) out.push_back(alpha.value()[static_cast<Index>(i)]);
    return out;
  }

  std::vector<std::size_t> active_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < active.size(); ++i)
      if (active[i]) out.push_back(i);
    return out;
  }
};

template <typename Scalar>
MixedEdge<Scalar> make_mixed_edge(std::string name, Index channels, Rng& rng) {
  MixedEdge<Scalar> e;
  e.name = std::move(name);
  e.candidates = build_candidate_set<Scalar>(channels, rng);
  e.alpha = ad::parameter(Tensor<Scalar>(Shape{1, 1, 1, static_cast<Index>(e.candidates.size())}));
  e.active.assign(e.candidates.size(), true);
  return e;
}

/// Architecture logits: zeros plus N(0, noise^2).
template <typename Scalar>
void init_alpha(MixedEdge<Scalar>& edge, Rng& rng, double noise = 1e-3) {
  std::normal_distribution<double> g(0.0, 1.0);
  auto& a = edge.alpha.mutable_value();
  for (Index i = 0; i < a.size(); ++i) a[i] = static_cast<Scalar>(noise * g(rng));
}

template <typename Scalar>
struct ArchParams {
  std::vector<MixedEdge<Scalar>> edges;
  std::optional<double> theta;  // nullopt: half the uniform weight of the edge's active set
  std::size_t retain_p = 2;

  double theta_for(std::size_t active) const { return theta ? *theta : 0.5 / static_cast<double>(active); }
};

/// Softmax over the active logits, full-length with zeros at inactive positions.
template <typename Scalar>
ad::Var<Scalar> arch_weights(const MixedEdge<Scalar>& edge) {
  if (edge.active_count() == 0) throw std::logic_error("arch_weights: edge '" + edge.name + "' has no active candidate");
  return ad::softmax(edge.alpha, edge.active);
}

/// Weights of the active candidates, in candidate order.
template <typename Scalar>
std::vector<Scalar> active_weights(const MixedEdge<Scalar>& edge) {
  const auto w = arch_weights(edge).value();
  std::vector<Scalar> out;
  for (std::size_t i : edge.active_indices()) out.push_back(w[static_cast<Index>(i)]);
  return out;
}

/// Sum_i weight_i * out_i for a (K,) weight Var and K same-shaped outputs.
template <typename Scalar>
ad::Var<Scalar> weighted_sum(const ad::Var<Scalar>& weights, const std::vector<std::pair<Index, ad::Var<Scalar>>>& outs) {
  ad::Var<Scalar> acc;
  for (const auto& [i, y] : outs) {
    auto term = ad::mul(y, ad::pick(weights, i));
    acc = acc.defined() ? ad::add(acc, term) : term;
  }
  return acc;
}

/// Mixed operation with a caller-supplied candidate evaluator op_eval(index, x).
template <typename Scalar, typename OpEval>
ad::Var<Scalar> mixed_forward(const MixedEdge<Scalar>& edge, const ad::Var<Scalar>& x, OpEval&& op_eval) {
  if (edge.finalized) {
    const auto& fe = *edge.finalized;
    Tensor<Scalar> w(Shape{1, 1, 1, static_cast<Index>(fe.retained.size())});
    std::vector<std::pair<Index, ad::Var<Scalar>>> outs;
    for (std::size_t r = 0; r < fe.retained.size(); ++r) {
      const auto idx = static_cast<std::size_t>(std::find(kOpKinds.begin(), kOpKinds.end(), fe.retained[r].first) -
                                                kOpKinds.begin());
      w[static_cast<Index>(r)] = fe.retained[r].second;
      outs.emplace_back(static_cast<Index>(r), op_eval(idx, x));
    }
    return weighted_sum(ad::constant(std::move(w)), outs);
  }
  const auto w = arch_weights(edge);
  std::vector<std::pair<Index, ad::Var<Scalar>>> outs;
  for (std::size_t i : edge.active_indices()) outs.emplace_back(static_cast<Index>(i), op_eval(i, x));
  return weighted_sum(w, outs);
}

/// Rescales the candidate kernels so the mixture keeps the second moment of a single op.
/// Independent LeakyReLU outputs share a mean, so with s = sum w_k^2 the mixture's second
/// moment is s + c (1 - s) of one op, c = (1 - a)^2 / (pi (1 + a^2)) for slope a.
template <typename Scalar>
void rescale_for_mixing(MixedEdge<Scalar>& edge) {
  double sq = 0;
  std::vector<std::size_t> used;
  if (edge.finalized) {
    for (const auto& [kind, w] : edge.finalized->retained) {
      sq += static_cast<double>(w) * static_cast<double>(w);
      used.push_back(static_cast<std::size_t>(std::find(kOpKinds.begin(), kOpKinds.end(), kind) - kOpKinds.begin()));
    }
  } else {
    for (Scalar w : active_weights(edge)) sq += static_cast<double>(w) * static_cast<double>(w);
    used = edge.active_indices();
  }
  const double a = kLeakySlope;
  const double c = (1 - a) * (1 - a) / (std::numbers::pi * (1 + a * a));
  const auto gain = static_cast<Scalar>(1.0 / std::sqrt(sq + c * (1 - sq)));
  for (std::size_t i : used) edge.candidates[i].weight.mutable_value().array() *= gain;
}

template <typename Scalar>
ad::Var<Scalar> mixed_forward(const MixedEdge<Scalar>& edge, const ad::Var<Scalar>& x) {
  if (!edge.candidates.empty() && x.shape().c != edge.candidates.front().channels())
    throw ShapeMismatch("mixed_forward(" + edge.name + "): input has " + std::to_string(x.shape().c) +
                        " channels, ops expect " + std::to_string(edge.candidates.front().channels()));
  return mixed_forward(edge, x, [&](std::size_t i, const ad::Var<Scalar>& in) { return apply(edge.candidates[i], in); });
}

// ---------------------------------------------------------------------------
// Architecture JSON: per edge, candidate kinds, active mask, alpha and (when finalized) the retained set.

template <typename Scalar>
nlohmann::json arch_to_json(const ArchParams<Scalar>& arch) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : arch.edges) {
    nlohmann::json je;
    je["name"] = e.name;
    std::vector<std::string> kinds;
    for (const auto& c : e.candidates) kinds.push_back(op_name(c.kind));
    je["candidates"] = kinds;
    je["active"] = e.active;
    std::vector<double> alpha;
    for (Index i = 0; i < e.alpha.value().size(); ++i) alpha.push_back(static_cast<double>(e.alpha.value()[i]));
    je["alpha"] = alpha;
    if (e.finalized) {
      nlohmann::json r = nlohmann::json::array();
      for (const auto& [k, w] : e.finalized->retained) r.push_back({{"kind", op_name(k)}, {"weight", static_cast<double>(w)}});
      je["retained"] = r;
    }
    edges.push_back(std::move(je));
  }
  nlohmann::json j;
  j["edges"] = std::move(edges);
  j["theta"] = arch.theta ? nlohmann::json(*arch.theta) : nlohmann::json(nullptr);
  j["retain_p"] = arch.retain_p;
  return j;
}

/// Applies masks, logits and retained sets from JSON onto an already-built ArchParams with matching edges.
template <typename Scalar>
void arch_apply_json(ArchParams<Scalar>& arch, const nlohmann::json& j) {
  const auto& edges = j.at("edges");
  if (edges.size() != arch.edges.size())
    throw std::runtime_error("architecture has " + std::to_string(edges.size()) + " edges, model expects " +
                             std::to_string(arch.edges.size()));
  arch.theta = j.at("theta").is_null() ? std::nullopt : std::optional<double>(j.at("theta").get<double>());
  arch.retain_p = j.at("retain_p").get<std::size_t>();
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const auto& je = edges[k];
    auto& e = arch.edges[k];
    if (je.at("name").get<std::string>() != e.name)
      throw std::runtime_error("architecture edge " + std::to_string(k) + " is '" + je.at("name").get<std::string>() +
                               "', model expects '" + e.name + "'");
    const auto kinds = je.at("candidates").get<std::vector<std::string>>();
    const auto active = je.at("active").get<std::vector<bool>>();
    const auto alpha = je.at("alpha").get<std::vector<double>>();
    if (kinds.size() != e.candidates.size() || active.size() != kinds.size() || alpha.size() != kinds.size())
      throw std::runtime_error("architecture edge '" + e.name + "' has inconsistent candidate lists");
    for (std::size_t i = 0; i < kinds.size(); ++i)
      if (op_kind_from_name(kinds[i]) != e.candidates[i].kind)
        throw std::runtime_error("architecture edge '" + e.name + "' candidate order differs");
    e.active = active;
    if (e.active_count() == 0) throw std::runtime_error("architecture edge '" + e.name + "' has no active candidate");
    for (std::size_t i = 0; i < alpha.size(); ++i) e.alpha.mutable_value()[static_cast<Index>(i)] = static_cast<Scalar>(alpha[i]);
    e.finalized.reset();
    if (je.contains("retained")) {
      FinalizedEdge<Scalar> fe;
      for (const auto& r : je.at("retained"))
        fe.retained.emplace_back(op_kind_from_name(r.at("kind").get<std::string>()), static_cast<Scalar>(r.at("weight").get<double>()));
      fe.source_alpha.assign(alpha.begin(), alpha.end());
      e.finalized = std::move(fe);
    }
  }
}

}  // namespace hsds
