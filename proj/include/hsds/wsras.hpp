#pragma once

// Weighted structure refinement: gradual pruning of the weakest candidate on
// each edge while the search runs, then retention of the top-P candidates with
// frozen renormalized weights.

#include "hsds/ops_space.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

namespace hsds {

struct PruneEvent {
  std::size_t edge_index = 0;
  OpKind pruned_kind = OpKind::conv1x1;
  double weight_at_prune = 0.0;
  double theta = 0.0;
  long step = 0;
};

inline nlohmann::json to_json(const PruneEvent& e) {
  return {{"edge_index", e.edge_index},
          {"pruned_kind", op_name(e.pruned_kind)},
          {"weight_at_prune", e.weight_at_prune},
          {"theta", e.theta},
          {"step", e.step}};
}

inline PruneEvent prune_event_from_json(const nlohmann::json& j) {
  return PruneEvent{j.at("edge_index").get<std::size_t>(), op_kind_from_name(j.at("pruned_kind").get<std::string>()),
                    j.at("weight_at_prune").get<double>(), j.at("theta").get<double>(), j.at("step").get<long>()};
}

/// Index of the minimum; exact ties go to the lowest index.
template <typename Scalar>
std::size_t tie_break(std::span<const Scalar> weights) {
  if (weights.empty()) throw std::invalid_argument("tie_break: empty weight vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < weights.size(); ++i)
    if (weights[i] < weights[best]) best = i;
  return best;
}

/// Deactivates at most one candidate per edge: the weakest, if its weight is below theta and
/// the edge still has more than retain_p active candidates.
template <typename Scalar>
std::vector<PruneEvent> prune_step(ArchParams<Scalar>& arch, long step) {
  std::vector<PruneEvent> events;
  for (std::size_t e = 0; e < arch.edges.size(); ++e) {
    auto& edge = arch.edges[e];
    if (edge.finalized) continue;
    const std::size_t n_active = edge.active_count();
    if (n_active <= arch.retain_p) continue;
    const auto idx = edge.active_indices();
    const auto w = active_weights(edge);
    const std::size_t k = tie_break(std::span<const Scalar>(w));
    const double theta = arch.theta_for(n_active);
    if (static_cast<double>(w[k]) < theta) {
      edge.active[idx[k]] = false;
      events.push_back(PruneEvent{e, edge.candidates[idx[k]].kind, static_cast<double>(w[k]), theta, step});
    }
  }
  return events;
}

/// Top-P active candidates per edge with softmax-renormalized fixed weights, ordered by
/// descending weight (ties: earlier candidate first).
template <typename Scalar>
std::vector<FinalizedEdge<Scalar>> retention_finalize(const ArchParams<Scalar>& arch) {
  std::vector<FinalizedEdge<Scalar>> out;
  out.reserve(arch.edges.size());
  for (const auto& edge : arch.edges) {
    const auto idx = edge.active_indices();
    const auto w = active_weights(edge);
    std::vector<std::size_t> order(idx.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    order.resize(std::min(arch.retain_p, order.size()));

    // softmax over the retained logits == retained weights renormalized
    Scalar mx = edge.alpha.value()[static_cast<Index>(idx[order.front()])];
    std::vector<Scalar> ex;
    Scalar z = 0;
    for (std::size_t r : order) {
      ex.push_back(std::exp(edge.alpha.value()[static_cast<Index>(idx[r])] - mx));
      z += ex.back();
    }
    FinalizedEdge<Scalar> fe;
    for (std::size_t r = 0; r < order.size(); ++r) fe.retained.emplace_back(edge.candidates[idx[order[r]]].kind, ex[r] / z);
    for (Index i = 0; i < edge.alpha.value().size(); ++i) fe.source_alpha.push_back(edge.alpha.value()[i]);
    out.push_back(std::move(fe));
  }
  return out;
}

/// Installs finalized edges; the edges then mix only their retained candidates with frozen weights.
template <typename Scalar>
void apply_finalization(ArchParams<Scalar>& arch, const std::vector<FinalizedEdge<Scalar>>& finalized) {
  if (finalized.size() != arch.edges.size()) throw std::invalid_argument("apply_finalization: edge count mismatch");
  for (std::size_t e = 0; e < finalized.size(); ++e) arch.edges[e].finalized = finalized[e];
}

}  // namespace hsds
