#include "hsds/bilevel.hpp"
#include "test_util.hpp"

using namespace hsds;

namespace {

const std::vector<ExposurePair>& toy_pairs() {
  static const auto pairs = load_pairs(load_manifest(test::toy_fixture_dir() / "search.csv"));
  return pairs;
}

const NaturalPool& toy_pool() {
  static const auto pool = load_natural_pool(test::toy_fixture_dir() / "natural.txt", 5);
  return pool;
}

SearchConfig tiny_search(std::uint64_t seed = 3) {
  SearchConfig c;
  c.seed = seed;
  c.fusion = FusionConfig{2, 2, 1};
  c.crop = 12;
  c.batch_size = 2;
  c.search_epochs = 2;
  return c;
}

std::shared_ptr<const FeatureExtractor<double>> extractor() {
  static const std::shared_ptr<const FeatureExtractor<double>> g = make_fallback_extractor<double>();
  return g;
}

Batch<double> toy_batch(std::uint64_t seed, Index crop = 12, std::size_t count = 2) {
  Rng rng(seed);
  std::vector<ExposurePair> picked;
  for (std::size_t i = 0; i < count; ++i) picked.push_back(random_crop_pair(toy_pairs()[(seed + i) % toy_pairs().size()], crop, rng));
  return make_batch<double>(picked);
}

Tensor<double> toy_natural(std::uint64_t seed, Index crop = 12) {
  Rng rng(seed);
  return sample_natural(toy_pool(), crop, crop, 3, rng).to_tensor<double>();
}

using Snapshot = std::vector<Tensor<double>>;

Snapshot values_of(const std::vector<ad::Var<double>>& ps) {
  Snapshot out;
  for (const auto& p : ps) out.push_back(p.value());
  return out;
}

bool bitwise_equal(const Snapshot& a, const Snapshot& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].shape() == b[i].shape()) || !(a[i].array() == b[i].array()).all()) return false;
  return true;
}

/// Gamma_H after one plain gradient step on omega under the given beta; every value is restored.
double gamma_after_virtual_step(SearchState<double>& s, const Batch<double>& val, const Tensor<double>& natural,
                                const Tensor<double>& beta) {
  auto& omega = s.omega_opt.params;
  const auto saved_omega = values_of(omega);
  const auto saved_beta = s.loss.beta.value();
  s.loss.beta.mutable_value() = beta;
  activate(s, ParamGroup::omega);
  auto f = forward(s.model, ad::constant(val.under), ad::constant(val.over));
  ad::backward(fusion_loss(s.loss, s.extractor.get(), val, f).total);
  for (auto& p : omega) p.mutable_value().array() -= s.config.lr_omega * p.grad().array();
  s.omega_opt.zero_grad();
  auto f2 = forward(s.model, ad::constant(val.under), ad::constant(val.over));
  const double g = contrast_loss(s.extractor.get(), val, f2, natural).item();
  for (std::size_t i = 0; i < omega.size(); ++i) omega[i].mutable_value() = saved_omega[i];
  s.loss.beta.mutable_value() = saved_beta;
  return g;
}

SearchData<double> toy_search_data(std::uint64_t seed) {
  const auto [tr, va] = split_by_hash(load_manifest(test::toy_fixture_dir() / "search.csv"), seed);
  return {load_pairs(tr), load_pairs(va), load_natural_pool(test::toy_fixture_dir() / "natural.txt", derive_seed(seed, "natural"))};
}

}  // namespace

TEST_CASE("configuration defaults and validation") {
  const SearchConfig s;
  CHECK(s.lr_alpha == 2e-1);
  CHECK(s.lr_beta == 3e-2);
  CHECK(s.lr_omega == 2e-4);
  CHECK(s.batch_size == 2);
  const TrainConfig t;
  CHECK(t.epochs == 60);
  CHECK(t.batch_size == 10);
  CHECK(t.lr == 1e-4);
  SearchConfig bad = s;
  bad.lr_beta = 0;
  CHECK_THROWS(bad.validate());
  TrainConfig bad_t = t;
  bad_t.epochs = 0;
  CHECK_THROWS(bad_t.validate());
}

TEST_CASE("each step touches only its own parameter group") {
  auto s = make_search_state<double>(tiny_search(), extractor());
  std::mt19937_64 pick(9);
  for (int i = 0; i < 30; ++i) {
    const auto train = toy_batch(100 + static_cast<std::uint64_t>(i)), val = toy_batch(200 + static_cast<std::uint64_t>(i));
    const auto nat = toy_natural(300 + static_cast<std::uint64_t>(i));
    const auto om = values_of(s.omega_opt.params), al = values_of(s.alpha_opt.params), be = values_of(s.beta_opt.params);
    switch (pick() % 3) {
      case 0:
        step_omega(s, train);
        CHECK(bitwise_equal(al, values_of(s.alpha_opt.params)));
        CHECK(bitwise_equal(be, values_of(s.beta_opt.params)));
        CHECK_FALSE(bitwise_equal(om, values_of(s.omega_opt.params)));
        break;
      case 1:
        step_beta(s, val, nat);
        CHECK(bitwise_equal(om, values_of(s.omega_opt.params)));
        CHECK(bitwise_equal(al, values_of(s.alpha_opt.params)));
        break;
      default:
        step_alpha(s, val);
        CHECK(bitwise_equal(om, values_of(s.omega_opt.params)));
        CHECK(bitwise_equal(be, values_of(s.beta_opt.params)));
        CHECK_FALSE(bitwise_equal(al, values_of(s.alpha_opt.params)));
    }
  }
}

TEST_CASE("zero learning rates leave parameters unchanged") {
  auto s = make_search_state<double>(tiny_search(), extractor());
  s.omega_opt.lr = s.alpha_opt.lr = s.beta_opt.lr = 0;
  const auto om = values_of(s.omega_opt.params), al = values_of(s.alpha_opt.params), be = values_of(s.beta_opt.params);
  const auto b = toy_batch(1);
  step_omega(s, b);
  step_beta(s, b, toy_natural(2));
  step_alpha(s, b);
  CHECK(bitwise_equal(om, values_of(s.omega_opt.params)));
  CHECK(bitwise_equal(al, values_of(s.alpha_opt.params)));
  CHECK(bitwise_equal(be, values_of(s.beta_opt.params)));
}

TEST_CASE("a small omega step lowers the training loss on its batch") {
  auto s = make_search_state<double>(tiny_search(), extractor());
  s.omega_opt.lr = 1e-4;
  const auto b = toy_batch(4);
  const double before = step_omega(s, b);
  auto f = forward(s.model, ad::constant(b.under), ad::constant(b.over));
  const double after = fusion_loss(s.loss, s.extractor.get(), b, f).total.item();
  CHECK(after < before);
}

TEST_CASE("non-finite inputs abort the step") {
  auto s = make_search_state<double>(tiny_search(), extractor());
  auto b = toy_batch(5);
  b.under[3] = std::numeric_limits<double>::quiet_NaN();
  b.samples[0].under[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(step_omega(s, b), NonFiniteLoss);
  CHECK_THROWS_AS(step_alpha(s, b), NonFiniteLoss);
  CHECK_THROWS_AS(step_beta(s, b, toy_natural(1)), NonFiniteLoss);
}

TEST_CASE("beta hypergradient matches finite differences in beta") {
  auto cfg = tiny_search(7);
  cfg.lr_omega = 1e-2;
  auto s = make_search_state<double>(cfg, extractor());
  s.loss.beta.mutable_value() = test::random_tensor(s.loss.beta.shape(), 8, -1, 1);
  const auto val = toy_batch(11);
  const auto nat = toy_natural(12);
  const auto om = values_of(s.omega_opt.params);

  beta_hypergradient(s, val, nat);
  const Tensor<double> analytic = s.loss.beta.grad();
  CHECK(bitwise_equal(om, values_of(s.omega_opt.params)));

  Tensor<double> numeric(analytic.shape());
  const double h = 1e-4;
  for (Index k = 0; k < numeric.size(); ++k) {
    Tensor<double> p = s.loss.beta.value(), m = p;
    p[k] += h;
    m[k] -= h;
    numeric[k] = (gamma_after_virtual_step(s, val, nat, p) - gamma_after_virtual_step(s, val, nat, m)) / (2 * h);
  }
  const double scale = std::max(analytic.array().matrix().norm(), numeric.array().matrix().norm());
  CHECK(scale > 0);
  CHECK((analytic.array() - numeric.array()).matrix().norm() / scale < 1e-3);
  // softmax shift invariance
  CHECK(std::abs(analytic.array().sum()) < 1e-12 * std::max(1.0, scale) + 1e-15);
}

TEST_CASE("beta stays a valid simplex after a step") {
  auto s = make_search_state<double>(tiny_search(), extractor());
  step_beta(s, toy_batch(13), toy_natural(14));
  const auto w = ad::softmax(ad::constant(s.loss.beta.value()), std::vector<bool>(kLossCount, true)).value();
  CHECK(w.array().sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(w.array().minCoeff() > 0);
  CHECK(s.loss.beta.value().array().isFinite().all());
}

TEST_CASE("alpha steps") {
  auto s = make_search_state<double>(tiny_search(), extractor());
  const auto val = toy_batch(15);

  SUBCASE("a single-candidate edge keeps weight one") {
    auto& e = s.model.arch.edges[3];
    std::fill(e.active.begin(), e.active.end(), false);
    e.active[6] = true;
    step_alpha(s, val);
    CHECK(active_weights(e)[0] == 1.0);
  }
  SUBCASE("alpha gradient matches finite differences") {
    const auto a0 = s.model.arch.edges[4].alpha.value();
    const double err = test::fd_rel_error(
        [&](const ad::Var<double>& a) {
          auto m = s.model;
          m.arch.edges[4].alpha = a;
          auto f = forward(m, ad::constant(val.under), ad::constant(val.over));
          return fusion_loss(s.loss, s.extractor.get(), val, f).total;
        },
        a0);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("toy search is deterministic and respects the retention floor") {
  const auto cfg = tiny_search(21);
  const auto data = toy_search_data(cfg.seed);
  REQUIRE(data.train.size() + data.val.size() == 8);
  const auto a = run_search<double>(cfg, data, extractor());
  const auto b = run_search<double>(cfg, data, extractor());
  CHECK(arch_to_json(a.model.arch) == arch_to_json(b.model.arch));
  CHECK(loss_report(a.loss).dump() == loss_report(b.loss).dump());
  CHECK(history_csv(a.history) == history_csv(b.history));
  REQUIRE(a.prunes.size() == b.prunes.size());
  for (std::size_t i = 0; i < a.prunes.size(); ++i) CHECK(to_json(a.prunes[i]) == to_json(b.prunes[i]));
  for (const auto& e : a.model.arch.edges) CHECK(e.active_count() >= cfg.retain_p);
  for (const auto& p : a.prunes) CHECK(p.weight_at_prune < p.theta);
  CHECK(a.history.size() == 2 * steps_per_epoch(data.train.size(), cfg.batch_size));
  for (std::size_t i = 1; i < a.history.size(); ++i) CHECK(a.history[i].step == a.history[i - 1].step + 1);
}

TEST_CASE("contrastive term falls across a short search, averaged over seeds") {
  double first = 0, last = 0;
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    auto cfg = tiny_search(seed);
    cfg.search_epochs = 3;
    const auto s = run_search<double>(cfg, toy_search_data(seed), extractor());
    for (const auto& h : s.history) {
      if (h.epoch == 0) first += h.gamma_h;
      if (h.epoch == 2) last += h.gamma_h;
    }
  }
  CHECK(last <= first);
}

TEST_CASE("post-search training") {
  auto search = run_search<double>(tiny_search(22), toy_search_data(22), extractor());
  apply_finalization(search.model.arch, retention_finalize(search.model.arch));
  const auto arch = arch_to_json(search.model.arch);
  const auto loss = loss_params_from_report<double>(loss_report(search.loss));
  const auto& pairs = toy_pairs();
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 4;
  tc.lr = 2e-3;
  tc.crop = 16;
  tc.seed = 5;
  auto fresh = [&](int epochs) {
    TrainConfig c = tc;
    c.epochs = epochs;
    return make_train_state<double>(c, make_trained_model_skeleton<double>(search.model.config, arch, c.seed), loss, extractor());
  };

  SUBCASE("no remaining epochs leaves the initialization") {
    auto s = fresh(1);
    const auto init = values_of(s.opt.params);
    s.epochs_done = 1;
    run_train(s, pairs);
    CHECK(bitwise_equal(init, values_of(s.opt.params)));
  }
  SUBCASE("loss falls and resuming matches an uninterrupted run") {
    auto full = fresh(tc.epochs);
    const double before = evaluate_fusion_loss(full.model, full.loss, extractor().get(), pairs);
    run_train(full, pairs);
    REQUIRE(full.epoch_loss.size() == 4);
    const double after = evaluate_fusion_loss(full.model, full.loss, extractor().get(), pairs);
    CHECK(after < before);

    auto first = fresh(2);
    run_train(first, pairs);
    const auto ckpt = train_checkpoint(first);
    auto resumed = fresh(tc.epochs);
    load_train_checkpoint(resumed, ckpt);
    CHECK(resumed.epochs_done == 2);
    run_train(resumed, pairs);
    CHECK(bitwise_equal(values_of(full.opt.params), values_of(resumed.opt.params)));
    CHECK(full.epoch_loss == resumed.epoch_loss);
  }
  SUBCASE("beta is frozen during training") {
    auto s = fresh(1);
    const auto beta = s.loss.beta.value();
    run_train(s, pairs);
    CHECK((s.loss.beta.value().array() == beta.array()).all());
  }
}
