#pragma once

// Alternating first-order search over network weights (omega), loss logits
// (beta) and architecture logits (alpha), plus the plain post-search trainer.
//
// The beta hypergradient differentiates Gamma_H at the one-step response
//   omega' = omega - lr_omega * grad_omega L(omega; w(beta)).
// With v = grad Gamma_H at omega', dGamma/dw_k = -lr_omega * <v, grad_omega L_k>,
// and the directional derivative <v, grad L_k> is taken by central differences
// of the forward losses along v, so only first derivatives are ever formed.

#include "hsds/archive.hpp"
#include "hsds/contrastive.hpp"
#include "hsds/data.hpp"
#include "hsds/fusion_net.hpp"
#include "hsds/losses.hpp"
#include "hsds/wsras.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsds {

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Adam.

template <typename Scalar>
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<ad::Var<Scalar>> params;
  std::vector<Tensor<Scalar>> m, v;
  long t = 0;

  Adam() = default;
  Adam(std::vector<ad::Var<Scalar>> ps, double learning_rate) : lr(learning_rate), params(std::move(ps)) {
    for (const auto& p : params) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
    }
  }

  /// One update from the accumulated gradients; parameters without a gradient are skipped.
  void step() {
    ++t;
    const double c1 = 1 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.has_grad()) continue;
      const auto g = p.grad().array().template cast<double>();
      auto& mi = m[i].array();
      auto& vi = v[i].array();
      mi = (beta1 * mi.template cast<double>() + (1 - beta1) * g).template cast<Scalar>();
      vi = (beta2 * vi.template cast<double>() + (1 - beta2) * g.square()).template cast<Scalar>();
      const auto upd = (lr * (mi.template cast<double>() / c1) / ((vi.template cast<double>() / c2).sqrt() + eps));
      p.mutable_value().array() -= upd.template cast<Scalar>();
    }
  }

  void zero_grad() {
    for (auto& p : params) p.zero_grad();
  }
};

// ---------------------------------------------------------------------------
// Configuration.

struct SearchConfig {
  double lr_alpha = 2e-1;
  double lr_beta = 3e-2;
  double lr_omega = 2e-4;
  int search_epochs = 10;
  int batch_size = 2;
  Index crop = 256;
  std::uint64_t seed = 0;
  std::size_t retain_p = 2;
  std::optional<double> theta;  // nullopt: 0.5 / |active|
  double alpha_noise = 1e-3;
  /// Step along v (in units of |v|) for the directional derivatives of the beta hypergradient.
  double fd_step = 1e-3;
  FusionConfig fusion;

  void validate() const {
    if (!(lr_alpha > 0 && lr_beta > 0 && lr_omega > 0)) throw std::invalid_argument("search: learning rates must be > 0");
    if (search_epochs < 1 || batch_size < 1 || crop < 8) throw std::invalid_argument("search: epochs, batch_size >= 1 and crop >= 8 required");
    if (retain_p < 1) throw std::invalid_argument("search: retain_p must be >= 1");
  }
};

struct TrainConfig {
  int epochs = 60;
  int batch_size = 10;
  double lr = 1e-4;
  Index crop = 256;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batch_size < 1 || crop < 8 || !(lr >= 0)) throw std::invalid_argument("train: invalid batch_size, crop or lr");
  }
};

// ---------------------------------------------------------------------------
// Batches.

template <typename Scalar>
struct Batch {
  Tensor<Scalar> under;  // (N,3,H,W)
  Tensor<Scalar> over;
  std::vector<PairTensors<Scalar>> samples;  // per-sample views, N = 1 each
  std::vector<std::string> ids;

  Index size() const { return under.shape().n; }
};

template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_batch: no tensors");
  Shape s = parts.front().shape();
  for (const auto& p : parts)
    if (!(p.shape() == s)) throw ShapeMismatch("stack_batch", s, p.shape());
  const Index per = s.size();
  s.n *= static_cast<Index>(parts.size());
  Tensor<Scalar> out(s);
  for (std::size_t i = 0; i < parts.size(); ++i) out.array().segment(static_cast<Index>(i) * per, per) = parts[i].array();
  return out;
}

template <typename Scalar>
Batch<Scalar> make_batch(const std::vector<ExposurePair>& pairs) {
  Batch<Scalar> b;
  std::vector<Tensor<Scalar>> us, os;
  for (const auto& p : pairs) {
    ExposurePair rgb{p.under.to_rgb(), p.over.to_rgb(), std::nullopt, p.id};
    if (p.reference) rgb.reference = p.reference->to_rgb();
    b.samples.push_back(pair_tensors<Scalar>(rgb));
    us.push_back(b.samples.back().under);
    os.push_back(b.samples.back().over);
    b.ids.push_back(p.id);
  }
  b.under = stack_batch(us);
  b.over = stack_batch(os);
  return b;
}

// ---------------------------------------------------------------------------
// Objectives.

template <typename Scalar>
struct BatchLoss {
  ad::Var<Scalar> total;
  /// values[i][k]: candidate k on sample i (nullopt when masked for that sample).
  std::vector<std::array<std::optional<Scalar>, kLossCount>> values;
  std::vector<Tensor<Scalar>> weights;
};

/// Mean over samples of combine(beta, sample, f_i).
template <typename Scalar>
BatchLoss<Scalar> fusion_loss(const LossParams<Scalar>& loss, const FeatureExtractor<Scalar>* g, const Batch<Scalar>& b,
                              const ad::Var<Scalar>& fused) {
  BatchLoss<Scalar> out;
  const Index n = b.size();
  for (Index i = 0; i < n; ++i) {
    auto r = combine(loss, b.samples[static_cast<std::size_t>(i)], ad::slice_batch(fused, i, 1), g);
    out.total = out.total.defined() ? ad::add(out.total, r.total) : r.total;
    out.values.push_back(r.values);
    out.weights.push_back(r.weights);
  }
  out.total = ad::affine(out.total, Scalar(1) / static_cast<Scalar>(n));
  return out;
}

/// Mean over samples of Gamma_H, each sample's own exposures serving as its negative pair.
template <typename Scalar>
ad::Var<Scalar> contrast_loss(const FeatureExtractor<Scalar>* g, const Batch<Scalar>& b, const ad::Var<Scalar>& fused,
                              const Tensor<Scalar>& natural) {
  ad::Var<Scalar> total;
  const Index n = b.size();
  for (Index i = 0; i < n; ++i) {
    const auto& s = b.samples[static_cast<std::size_t>(i)];
    auto gh = gamma_h(g, ad::slice_batch(fused, i, 1), s.reference, natural, {{s.under, s.over}});
    total = total.defined() ? ad::add(total, gh) : gh;
  }
  return ad::affine(total, Scalar(1) / static_cast<Scalar>(n));
}

// ---------------------------------------------------------------------------
// Search state and steps.

struct HistoryRecord {
  long step = 0;
  int epoch = 0;
  double l_train = 0;
  double l_val = 0;
  double gamma_h = 0;
};

template <typename Scalar>
struct SearchState {
  SearchConfig config;
  long t = 0;
  FusionModel<Scalar> model;
  LossParams<Scalar> loss;
  std::shared_ptr<const FeatureExtractor<Scalar>> extractor;
  Adam<Scalar> omega_opt, alpha_opt, beta_opt;
  std::vector<HistoryRecord> history;
  std::vector<PruneEvent> prunes;
};

template <typename Scalar>
SearchState<Scalar> make_search_state(const SearchConfig& cfg, std::shared_ptr<const FeatureExtractor<Scalar>> extractor) {
  cfg.validate();
  SearchState<Scalar> s;
  s.config = cfg;
  Rng rng(derive_seed(cfg.seed, "model"));
  s.model = make_fusion_model<Scalar>(cfg.fusion, rng, cfg.retain_p, cfg.theta, cfg.alpha_noise);
  s.loss = make_loss_params<Scalar>();
  s.extractor = std::move(extractor);
  s.omega_opt = Adam<Scalar>(omega_parameters(s.model), cfg.lr_omega);
  s.alpha_opt = Adam<Scalar>(alpha_parameters(s.model), cfg.lr_alpha);
  s.beta_opt = Adam<Scalar>({s.loss.beta}, cfg.lr_beta);
  return s;
}

enum class ParamGroup { omega, alpha, beta };

/// Enables gradients for exactly one parameter group and clears all gradients.
template <typename Scalar>
void activate(SearchState<Scalar>& s, ParamGroup g) {
  for (auto* opt : {&s.omega_opt, &s.alpha_opt, &s.beta_opt}) {
    opt->zero_grad();
    set_requires_grad(opt->params, false);
  }
  auto& opt = g == ParamGroup::omega ? s.omega_opt : g == ParamGroup::alpha ? s.alpha_opt : s.beta_opt;
  set_requires_grad(opt.params, true);
}

template <typename Scalar>
void check_finite(Scalar v, const char* what, long step) {
  if (!std::isfinite(static_cast<double>(v)))
    throw NonFiniteLoss(std::string(what) + " is not finite at step " + std::to_string(step));
}

/// omega <- Adam(grad_omega L_train); returns L_train before the update.
template <typename Scalar>
double step_omega(SearchState<Scalar>& s, const Batch<Scalar>& train) {
  activate(s, ParamGroup::omega);
  auto f = forward(s.model, ad::constant(train.under), ad::constant(train.over));
  auto l = fusion_loss(s.loss, s.extractor.get(), train, f).total;
  check_finite(l.item(), "L_train", s.t);
  ad::backward(l);
  s.omega_opt.step();
  s.omega_opt.zero_grad();
  return static_cast<double>(l.item());
}

/// alpha <- Adam(grad_alpha L_val) with omega held fixed; returns L_val before the update.
template <typename Scalar>
double step_alpha(SearchState<Scalar>& s, const Batch<Scalar>& val) {
  activate(s, ParamGroup::alpha);
  auto f = forward(s.model, ad::constant(val.under), ad::constant(val.over));
  auto l = fusion_loss(s.loss, s.extractor.get(), val, f).total;
  check_finite(l.item(), "L_val", s.t);
  ad::backward(l);
  s.alpha_opt.step();
  s.alpha_opt.zero_grad();
  return static_cast<double>(l.item());
}

namespace detail {

template <typename Scalar>
std::vector<Tensor<Scalar>> snapshot(const std::vector<ad::Var<Scalar>>& ps) {
  std::vector<Tensor<Scalar>> out;
  for (const auto& p : ps) out.push_back(p.value());
  return out;
}

template <typename Scalar>
void restore(std::vector<ad::Var<Scalar>>& ps, const std::vector<Tensor<Scalar>>& saved) {
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].mutable_value() = saved[i];
}

/// Per-sample candidate values (nullopt entries stay nullopt) at the current omega.
template <typename Scalar>
std::vector<std::array<std::optional<Scalar>, kLossCount>> candidate_values(SearchState<Scalar>& s, const Batch<Scalar>& b) {
  auto f = forward(s.model, ad::constant(b.under), ad::constant(b.over));
  return fusion_loss(s.loss, s.extractor.get(), b, f).values;
}

}  // namespace detail

struct BetaStepInfo {
  double gamma_h = 0;  // at the virtual response omega'
  std::vector<double> grad_w;  // dGamma/dw_k, summed over samples
};

/// Hypergradient of Gamma_H w.r.t. beta through the one-step response. Leaves every
/// parameter value unchanged and writes the result into beta's gradient.
template <typename Scalar>
BetaStepInfo beta_hypergradient(SearchState<Scalar>& s, const Batch<Scalar>& val, const Tensor<Scalar>& natural) {
  auto& omega = s.omega_opt.params;
  const auto saved = detail::snapshot(omega);
  const Scalar lr = static_cast<Scalar>(s.config.lr_omega);

  // virtual step omega' = omega - lr * grad L(omega; w(beta))
  activate(s, ParamGroup::omega);
  {
    auto f = forward(s.model, ad::constant(val.under), ad::constant(val.over));
    auto l = fusion_loss(s.loss, s.extractor.get(), val, f).total;
    check_finite(l.item(), "L_val (virtual step)", s.t);
    ad::backward(l);
  }
  for (auto& p : omega)
    if (p.has_grad()) p.mutable_value().array() -= lr * p.grad().array();
  s.omega_opt.zero_grad();

  // v = grad Gamma_H at omega'
  BetaStepInfo info;
  std::vector<Tensor<Scalar>> v;
  double vnorm2 = 0;
  {
    auto f = forward(s.model, ad::constant(val.under), ad::constant(val.over));
    auto gh = contrast_loss(s.extractor.get(), val, f, natural);
    check_finite(gh.item(), "Gamma_H", s.t);
    info.gamma_h = static_cast<double>(gh.item());
    ad::backward(gh);
    for (auto& p : omega) {
      v.push_back(p.grad());
      vnorm2 += static_cast<double>(v.back().array().square().sum());
    }
    s.omega_opt.zero_grad();
  }
  set_requires_grad(omega, false);

  const Index n = val.size();
  std::vector<std::vector<double>> dw(static_cast<std::size_t>(n), std::vector<double>(kLossCount, 0.0));
  const double vnorm = std::sqrt(vnorm2);
  if (vnorm > 0) {
    const Scalar eps = static_cast<Scalar>(s.config.fd_step / vnorm);
    auto shift = [&](Scalar sign) {
      for (std::size_t i = 0; i < omega.size(); ++i)
        omega[i].mutable_value().array() = saved[i].array() + sign * eps * v[i].array();
    };
    shift(Scalar(1));
    const auto plus = detail::candidate_values(s, val);
    shift(Scalar(-1));
    const auto minus = detail::candidate_values(s, val);
    for (Index i = 0; i < n; ++i)
      for (std::size_t k = 0; k < kLossCount; ++k) {
        const auto& a = plus[static_cast<std::size_t>(i)][k];
        const auto& b = minus[static_cast<std::size_t>(i)][k];
        if (!a || !b) continue;
        const double dir = static_cast<double>(*a - *b) / (2 * static_cast<double>(eps));
        dw[static_cast<std::size_t>(i)][k] = -static_cast<double>(lr) * dir / static_cast<double>(n);
      }
  }
  detail::restore(omega, saved);

  // chain through each sample's masked softmax
  info.grad_w.assign(kLossCount, 0.0);
  Tensor<Scalar> gbeta(s.loss.beta.shape());
  for (Index i = 0; i < n; ++i) {
    const auto mask = evaluable_mask(s.loss, val.samples[static_cast<std::size_t>(i)].reference.has_value(),
                                     s.extractor != nullptr);
    const auto w = ad::softmax(ad::constant(s.loss.beta.value()), mask).value();
    const auto& c = dw[static_cast<std::size_t>(i)];
    double wc = 0;
    for (std::size_t k = 0; k < kLossCount; ++k) wc += static_cast<double>(w[static_cast<Index>(k)]) * c[k];
    for (std::size_t k = 0; k < kLossCount; ++k) {
      info.grad_w[k] += c[k];
      if (mask[k]) gbeta[static_cast<Index>(k)] += static_cast<Scalar>(static_cast<double>(w[static_cast<Index>(k)]) * (c[k] - wc));
    }
  }
  activate(s, ParamGroup::beta);
  s.loss.beta.node()->grad = gbeta;
  return info;
}

/// beta <- Adam(d Gamma_H / d beta); returns Gamma_H at the virtual response.
template <typename Scalar>
double step_beta(SearchState<Scalar>& s, const Batch<Scalar>& val, const Tensor<Scalar>& natural) {
  auto info = beta_hypergradient(s, val, natural);
  for (double g : info.grad_w) check_finite(g, "beta hypergradient", s.t);
  s.beta_opt.step();
  s.beta_opt.zero_grad();
  return info.gamma_h;
}

// ---------------------------------------------------------------------------
// Search driver.

template <typename Scalar>
struct SearchData {
  std::vector<ExposurePair> train;
  std::vector<ExposurePair> val;
  NaturalPool pool;
};

/// Deterministic order of indices [0, n) for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> d(0, i - 1);
    std::swap(idx[i - 1], idx[d(rng)]);
  }
  return idx;
}

template <typename Scalar>
Batch<Scalar> cropped_batch(const std::vector<ExposurePair>& pairs, const std::vector<std::size_t>& order, std::size_t start,
                            std::size_t count, Index crop, Rng& rng) {
  std::vector<ExposurePair> picked;
  for (std::size_t j = 0; j < count; ++j) picked.push_back(random_crop_pair(pairs[order[(start + j) % order.size()]], crop, rng));
  return make_batch<Scalar>(picked);
}

template <typename Scalar>
struct SearchHooks {
  std::function<void(const SearchState<Scalar>&, int epoch, const std::vector<PruneEvent>&)> on_epoch;
};

/// Steps per epoch: one per train batch.
inline std::size_t steps_per_epoch(std::size_t train_size, int batch) {
  return (train_size + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch);
}

template <typename Scalar>
SearchState<Scalar> run_search(const SearchConfig& cfg, const SearchData<Scalar>& data,
                               std::shared_ptr<const FeatureExtractor<Scalar>> extractor, const SearchHooks<Scalar>& hooks = {}) {
  if (data.train.empty() || data.val.empty()) throw std::invalid_argument("run_search: train and val splits must be non-empty");
  if (data.pool.images.empty()) throw EmptyPool("run_search: natural pool is empty");
  auto s = make_search_state<Scalar>(cfg, std::move(extractor));
  const auto bsz = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.search_epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "search-epoch:" + std::to_string(epoch)));
    const auto torder = epoch_order(data.train.size(), rng);
    const auto vorder = epoch_order(data.val.size(), rng);
    const std::size_t steps = steps_per_epoch(data.train.size(), cfg.batch_size);
    for (std::size_t k = 0; k < steps; ++k) {
      const std::size_t count = std::min(bsz, data.train.size() - k * bsz);
      auto train = cropped_batch<Scalar>(data.train, torder, k * bsz, count, cfg.crop, rng);
      auto val = cropped_batch<Scalar>(data.val, vorder, k * bsz, count, cfg.crop, rng);
      const auto natural = sample_natural(data.pool, cfg.crop, cfg.crop, 3, rng).template to_tensor<Scalar>();
      HistoryRecord rec;
      rec.step = s.t;
      rec.epoch = epoch;
      rec.l_train = step_omega(s, train);
      rec.gamma_h = step_beta(s, val, natural);
      rec.l_val = step_alpha(s, val);
      s.history.push_back(rec);
      ++s.t;
    }
    auto events = prune_step(s.model.arch, s.t);
    s.prunes.insert(s.prunes.end(), events.begin(), events.end());
    if (hooks.on_epoch) hooks.on_epoch(s, epoch, events);
  }
  for (auto* opt : {&s.omega_opt, &s.alpha_opt, &s.beta_opt}) set_requires_grad(opt->params, false);
  return s;
}

inline std::string history_csv(const std::vector<HistoryRecord>& h) {
  std::string out = "step,epoch,l_train,l_val,gamma_h\n";
  char buf[160];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%ld,%d,%.17g,%.17g,%.17g\n", r.step, r.epoch, r.l_train, r.l_val, r.gamma_h);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: every parameter and optimizer moment, plus JSON metadata.

template <typename Scalar>
void put_adam(TensorArchive& ar, const std::string& prefix, const Adam<Scalar>& opt,
              const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < opt.params.size(); ++i) {
    ar.tensors[prefix + ".m." + names[i]] = opt.m[i].template cast<double>();
    ar.tensors[prefix + ".v." + names[i]] = opt.v[i].template cast<double>();
  }
  ar.meta[prefix + ".t"] = opt.t;
}

template <typename Scalar>
void get_adam(const TensorArchive& ar, const std::string& prefix, Adam<Scalar>& opt, const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < opt.params.size(); ++i) {
    opt.m[i] = ar.at(prefix + ".m." + names[i]).template cast<Scalar>();
    opt.v[i] = ar.at(prefix + ".v." + names[i]).template cast<Scalar>();
    if (!(opt.m[i].shape() == opt.params[i].shape())) throw ArchiveError("optimizer state shape mismatch for " + names[i]);
  }
  opt.t = ar.meta.at(prefix + ".t").get<long>();
}

template <typename Scalar>
std::vector<std::string> omega_names(const FusionModel<Scalar>& m) {
  std::vector<std::string> out;
  for (const auto& [name, v] : named_omega(m)) out.push_back(name);
  return out;
}

template <typename Scalar>
void put_omega(TensorArchive& ar, const FusionModel<Scalar>& m) {
  for (const auto& [name, v] : named_omega(m)) ar.tensors["omega." + name] = v.value().template cast<double>();
}

template <typename Scalar>
void get_omega(const TensorArchive& ar, FusionModel<Scalar>& m) {
  for (auto& [name, v] : named_omega(m)) {
    const auto& t = ar.at("omega." + name);
    if (!(t.shape() == v.shape())) throw ArchiveError("weight shape mismatch for " + name + ": " + t.shape().str());
    v.mutable_value() = t.template cast<Scalar>();
  }
}

template <typename Scalar>
TensorArchive search_checkpoint(const SearchState<Scalar>& s, int epoch) {
  TensorArchive ar;
  put_omega(ar, s.model);
  ar.tensors["beta"] = s.loss.beta.value().template cast<double>();
  put_adam(ar, "adam_omega", s.omega_opt, omega_names(s.model));
  std::vector<std::string> edge_names;
  for (const auto& e : s.model.arch.edges) edge_names.push_back(e.name);
  put_adam(ar, "adam_alpha", s.alpha_opt, edge_names);
  put_adam(ar, "adam_beta", s.beta_opt, {"beta"});
  ar.meta["kind"] = "search";
  ar.meta["epoch"] = epoch;
  ar.meta["step"] = s.t;
  ar.meta["arch"] = arch_to_json(s.model.arch);
  ar.meta["fusion"] = to_json(s.model.config);
  return ar;
}

// ---------------------------------------------------------------------------
// Post-search training.

template <typename Scalar>
struct TrainState {
  TrainConfig config;
  FusionModel<Scalar> model;
  LossParams<Scalar> loss;
  std::shared_ptr<const FeatureExtractor<Scalar>> extractor;
  Adam<Scalar> opt;
  int epochs_done = 0;
  std::vector<double> epoch_loss;  // mean training loss per completed epoch
};

/// Fresh weights for a finalized architecture. arch_json carries the searched edges.
template <typename Scalar>
FusionModel<Scalar> make_trained_model_skeleton(const FusionConfig& fusion, const nlohmann::json& arch_json,
                                                std::uint64_t seed) {
  Rng rng(derive_seed(seed, "train-model"));
  auto m = make_fusion_model<Scalar>(fusion, rng, 2, std::nullopt, 0.0, false);
  arch_apply_json(m.arch, arch_json);
  if (m.mode() != ModelMode::finalized) throw std::invalid_argument("training requires a finalized architecture");
  for (auto& e : m.arch.edges) rescale_for_mixing(e);
  return m;
}

template <typename Scalar>
TrainState<Scalar> make_train_state(const TrainConfig& cfg, FusionModel<Scalar> model, LossParams<Scalar> loss,
                                    std::shared_ptr<const FeatureExtractor<Scalar>> extractor) {
  cfg.validate();
  TrainState<Scalar> s;
  s.config = cfg;
  s.model = std::move(model);
  s.loss = std::move(loss);
  s.loss.beta.set_requires_grad(false);
  s.extractor = std::move(extractor);
  auto omega = omega_parameters(s.model);
  for (auto a : alpha_parameters(s.model)) a.set_requires_grad(false);
  set_requires_grad(omega, true);
  s.opt = Adam<Scalar>(std::move(omega), cfg.lr);
  return s;
}

template <typename Scalar>
TensorArchive train_checkpoint(const TrainState<Scalar>& s) {
  TensorArchive ar;
  put_omega(ar, s.model);
  ar.tensors["beta"] = s.loss.beta.value().template cast<double>();
  put_adam(ar, "adam_omega", s.opt, omega_names(s.model));
  ar.meta["kind"] = "train";
  ar.meta["epochs_done"] = s.epochs_done;
  ar.meta["epoch_loss"] = s.epoch_loss;
  ar.meta["arch"] = arch_to_json(s.model.arch);
  ar.meta["fusion"] = to_json(s.model.config);
  return ar;
}

/// Restores weights, optimizer moments and progress from a train checkpoint.
template <typename Scalar>
void load_train_checkpoint(TrainState<Scalar>& s, const TensorArchive& ar) {
  if (ar.meta.value("kind", "") != "train") throw ArchiveError("not a training checkpoint");
  get_omega(ar, s.model);
  s.loss.beta.mutable_value() = ar.at("beta").template cast<Scalar>();
  get_adam(ar, "adam_omega", s.opt, omega_names(s.model));
  s.epochs_done = ar.meta.at("epochs_done").get<int>();
  s.epoch_loss = ar.meta.at("epoch_loss").get<std::vector<double>>();
}

template <typename Scalar>
struct TrainHooks {
  std::function<void(const TrainState<Scalar>&)> on_epoch;
};

/// Trains until cfg.epochs are done, continuing from s.epochs_done.
template <typename Scalar>
void run_train(TrainState<Scalar>& s, const std::vector<ExposurePair>& train, const TrainHooks<Scalar>& hooks = {}) {
  if (train.empty()) throw std::invalid_argument("run_train: no training pairs");
  const auto bsz = static_cast<std::size_t>(s.config.batch_size);
  for (int epoch = s.epochs_done; epoch < s.config.epochs; ++epoch) {
    Rng rng(derive_seed(s.config.seed, "train-epoch:" + std::to_string(epoch)));
    const auto order = epoch_order(train.size(), rng);
    const std::size_t steps = steps_per_epoch(train.size(), s.config.batch_size);
    double sum = 0;
    for (std::size_t k = 0; k < steps; ++k) {
      const std::size_t count = std::min(bsz, train.size() - k * bsz);
      auto b = cropped_batch<Scalar>(train, order, k * bsz, count, s.config.crop, rng);
      auto f = forward(s.model, ad::constant(b.under), ad::constant(b.over));
      auto l = fusion_loss(s.loss, s.extractor.get(), b, f).total;
      check_finite(l.item(), "training loss", epoch);
      ad::backward(l);
      s.opt.step();
      s.opt.zero_grad();
      sum += static_cast<double>(l.item());
    }
    s.epoch_loss.push_back(sum / static_cast<double>(steps));
    s.epochs_done = epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(s);
  }
}

/// Mean fusion loss over fixed (uncropped) pairs, without touching any state.
template <typename Scalar>
double evaluate_fusion_loss(const FusionModel<Scalar>& m, const LossParams<Scalar>& loss, const FeatureExtractor<Scalar>* g,
                            const std::vector<ExposurePair>& pairs) {
  double sum = 0;
  for (const auto& p : pairs) {
    auto b = make_batch<Scalar>({p});
    auto f = ad::constant(fuse(m, b.under, b.over));
    sum += static_cast<double>(fusion_loss(loss, g, b, f).total.item());
  }
  return sum / static_cast<double>(pairs.size());
}

}  // namespace hsds
