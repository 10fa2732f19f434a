#include "hsds/wsras.hpp"
#include "test_util.hpp"

#include <bit>
#include <cmath>

using namespace hsds;

namespace {

ArchParams<double> arch_from_weights(const std::vector<std::vector<double>>& per_edge, std::size_t p,
                                     std::optional<double> theta) {
  Rng rng(2);
  ArchParams<double> arch;
  arch.retain_p = p;
  arch.theta = theta;
  for (const auto& w : per_edge) {
    auto e = make_mixed_edge<double>("e" + std::to_string(arch.edges.size()), 1, rng);
    for (std::size_t i = 0; i < e.active.size(); ++i) {
      e.active[i] = i < w.size();
      e.alpha.mutable_value()[static_cast<Index>(i)] = i < w.size() ? std::log(w[i]) : 0.0;
    }
    arch.edges.push_back(std::move(e));
  }
  return arch;
}

/// Best P-subset by exhaustive search over all subsets (sum of weights), lowest indices on ties.
std::vector<std::size_t> brute_force_top(const std::vector<double>& w, std::size_t p) {
  const std::size_t n = w.size();
  const std::size_t k = std::min(p, n);
  std::vector<std::size_t> best;
  double best_sum = -1;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != k) continue;
    double s = 0;
    std::vector<std::size_t> pick;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) {
        s += w[i];
        pick.push_back(i);
      }
    if (s > best_sum + 1e-15) {
      best_sum = s;
      best = pick;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("tie break picks the lowest index among minima") {
  const std::vector<double> a{0.2, 0.2, 0.6}, b{0.6, 0.2, 0.2}, c{0.1};
  CHECK(tie_break(std::span<const double>(a)) == 0);
  CHECK(tie_break(std::span<const double>(b)) == 1);
  CHECK(tie_break(std::span<const double>(c)) == 0);
  CHECK_THROWS(tie_break(std::span<const double>()));
}

TEST_CASE("prune step rule") {
  SUBCASE("weakest candidate below theta is removed") {
    auto arch = arch_from_weights({{0.4, 0.35, 0.15, 0.10}}, 2, 0.12);
    const auto events = prune_step(arch, 7);
    REQUIRE(events.size() == 1);
    CHECK(events[0].pruned_kind == kOpKinds[3]);
    CHECK(events[0].weight_at_prune == doctest::Approx(0.10));
    CHECK(events[0].step == 7);
    CHECK(arch.edges[0].active_count() == 3);
    const auto w = active_weights(arch.edges[0]);
    CHECK(w[0] == doctest::Approx(0.4 / 0.9));
  }
  SUBCASE("floor at P") {
    auto arch = arch_from_weights({{0.5, 0.5}}, 2, 0.99);
    CHECK(prune_step(arch, 0).empty());
  }
  SUBCASE("threshold not met") {
    auto arch = arch_from_weights({{0.34, 0.33, 0.33}}, 2, 0.1);
    CHECK(prune_step(arch, 0).empty());
  }
  SUBCASE("at most one per edge per call; default theta is half the uniform weight") {
    auto arch = arch_from_weights({{0.7, 0.1, 0.1, 0.1}, {0.26, 0.25, 0.25, 0.24}}, 1, std::nullopt);
    const auto events = prune_step(arch, 0);
    REQUIRE(events.size() == 1);
    CHECK(events[0].edge_index == 0);
    CHECK(events[0].pruned_kind == kOpKinds[1]);
    CHECK(events[0].theta == doctest::Approx(0.125));
    CHECK(arch.edges[1].active_count() == 4);
  }
  SUBCASE("pruned candidates never return") {
    auto arch = arch_from_weights({{0.5, 0.3, 0.1, 0.06, 0.04}}, 2, 0.2);
    std::vector<bool> seen_inactive(11, false);
    for (int s = 0; s < 6; ++s) {
      const std::size_t before = arch.edges[0].active_count();
      prune_step(arch, s);
      CHECK(arch.edges[0].active_count() <= before);
      CHECK(arch.edges[0].active_count() >= 2);
      for (std::size_t i = 0; i < 5; ++i) {
        if (seen_inactive[i]) CHECK_FALSE(arch.edges[0].active[i]);
        if (!arch.edges[0].active[i]) seen_inactive[i] = true;
      }
    }
    CHECK(arch.edges[0].active_count() == 2);
  }
}

TEST_CASE("prune event json round trip") {
  const PruneEvent e{3, OpKind::dil5x5, 0.0123, 0.05, 42};
  const auto back = prune_event_from_json(to_json(e));
  CHECK(back.edge_index == 3);
  CHECK(back.pruned_kind == OpKind::dil5x5);
  CHECK(back.weight_at_prune == 0.0123);
  CHECK(back.step == 42);
}

TEST_CASE("retention keeps the top P with renormalized weights") {
  SUBCASE("0.5, 0.3, 0.2 with P = 2") {
    const auto fe = retention_finalize(arch_from_weights({{0.5, 0.3, 0.2}}, 2, 0.1));
    REQUIRE(fe[0].retained.size() == 2);
    CHECK(fe[0].retained[0].first == kOpKinds[0]);
    CHECK(fe[0].retained[0].second == doctest::Approx(0.625).epsilon(1e-14));
    CHECK(fe[0].retained[1].second == doctest::Approx(0.375).epsilon(1e-14));
  }
  SUBCASE("P = 1 keeps the argmax at weight one") {
    const auto fe = retention_finalize(arch_from_weights({{0.2, 0.5, 0.3}}, 1, 0.1));
    REQUIRE(fe[0].retained.size() == 1);
    CHECK(fe[0].retained[0].first == kOpKinds[1]);
    CHECK(fe[0].retained[0].second == 1.0);
  }
  SUBCASE("P above the active count keeps everything unchanged") {
    const auto fe = retention_finalize(arch_from_weights({{0.2, 0.5, 0.3}}, 5, 0.1));
    REQUIRE(fe[0].retained.size() == 3);
    CHECK(fe[0].retained[0].second == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(fe[0].retained[2].second == doctest::Approx(0.2).epsilon(1e-14));
  }
  SUBCASE("matches brute force on random edges") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> w(11);
      double z = 0;
      for (auto& v : w) z += (v = u(rng));
      for (auto& v : w) v /= z;
      const std::size_t p = 1 + static_cast<std::size_t>(trial % 4);
      const auto fe = retention_finalize(arch_from_weights({w}, p, 0.1));
      auto expect = brute_force_top(w, p);
      std::vector<std::size_t> got;
      for (const auto& [kind, weight] : fe[0].retained)
        got.push_back(static_cast<std::size_t>(std::find(kOpKinds.begin(), kOpKinds.end(), kind) - kOpKinds.begin()));
      std::sort(got.begin(), got.end());
      CHECK(got == expect);
      double s = 0;
      for (const auto& r : fe[0].retained) s += r.second;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("finalized forward equals the supernet restricted to retained ops") {
  Rng rng(5);
  auto arch = arch_from_weights({{0.1, 0.4, 0.3, 0.2}}, 2, 0.05);
  auto& e = arch.edges[0];
  const auto x = ad::constant(test::random_tensor(Shape{1, 1, 6, 6}, 3));

  // supernet over exactly the retained pair
  auto restricted = e;
  std::fill(restricted.active.begin(), restricted.active.end(), false);
  restricted.active[1] = restricted.active[2] = true;
  const auto expect = mixed_forward(restricted, x).value();

  apply_finalization(arch, retention_finalize(arch));
  const auto got = mixed_forward(arch.edges[0], x).value();
  CHECK((got.array() - expect.array()).abs().maxCoeff() < 1e-14);

  SUBCASE("retaining everything reproduces the supernet") {
    auto full = arch_from_weights({{0.1, 0.4, 0.3, 0.2}}, 4, 0.05);
    const auto before = mixed_forward(full.edges[0], x).value();
    apply_finalization(full, retention_finalize(full));
    const auto after = mixed_forward(full.edges[0], x).value();
    CHECK((after.array() - before.array()).abs().maxCoeff() < 1e-6);
  }
}
