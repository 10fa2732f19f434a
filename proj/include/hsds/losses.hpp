#pragma once

// Searchable loss space: 17 (family, reference) candidates mixed by softmax(beta).

#include "hsds/autodiff.hpp"
#include "hsds/contrastive.hpp"
#include "hsds/data.hpp"
#include "hsds/mef_ssim.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hsds {

class NotColorImage : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class NoEvaluableCandidates : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class LossFamily { L1, L2, SSIM, MEF_SSIM, GRAD, PERC, PSNR, COLOR, TV };
enum class LossRef { over, under, reference, max_grad_pair, source_pair, none };

struct LossCandidate {
  LossFamily family;
  LossRef ref;
  std::string_view name;
};

inline constexpr std::size_t kLossCount = 17;

inline constexpr std::array<LossCandidate, kLossCount> kLossCandidates{{
    {LossFamily::L1, LossRef::over, "l1_over"},
    {LossFamily::L1, LossRef::under, "l1_under"},
    {LossFamily::L1, LossRef::reference, "l1_ref"},
    {LossFamily::L2, LossRef::over, "l2_over"},
    {LossFamily::L2, LossRef::under, "l2_under"},
    {LossFamily::L2, LossRef::reference, "l2_ref"},
    {LossFamily::SSIM, LossRef::over, "ssim_over"},
    {LossFamily::SSIM, LossRef::under, "ssim_under"},
    {LossFamily::SSIM, LossRef::reference, "ssim_ref"},
    {LossFamily::MEF_SSIM, LossRef::source_pair, "mef_ssim_pair"},
    {LossFamily::GRAD, LossRef::max_grad_pair, "grad_maxpair"},
    {LossFamily::PERC, LossRef::over, "perc_over"},
    {LossFamily::PERC, LossRef::under, "perc_under"},
    {LossFamily::PERC, LossRef::reference, "perc_ref"},
    {LossFamily::PSNR, LossRef::reference, "psnr_ref"},
    {LossFamily::COLOR, LossRef::reference, "color_ref"},
    {LossFamily::TV, LossRef::none, "tv"},
}};

inline constexpr bool is_valid_candidate(LossFamily f, LossRef r) {
  const bool single = r == LossRef::over || r == LossRef::under || r == LossRef::reference;
  switch (f) {
    case LossFamily::L1:
    case LossFamily::L2:
    case LossFamily::SSIM:
    case LossFamily::PERC: return single;
    case LossFamily::MEF_SSIM: return r == LossRef::source_pair;
    case LossFamily::GRAD: return r == LossRef::max_grad_pair;
    case LossFamily::PSNR:
    case LossFamily::COLOR: return r == LossRef::reference;
    case LossFamily::TV: return r == LossRef::none;
  }
  return false;
}

inline std::size_t loss_index(std::string_view name) {
  for (std::size_t k = 0; k < kLossCount; ++k)
    if (kLossCandidates[k].name == name) return k;
  throw std::invalid_argument("unknown loss candidate '" + std::string(name) + "'");
}

/// Under/over exposures and optional reference as batched tensors. The reference is
/// present for every sample of the batch or for none.
template <typename Scalar>
struct PairTensors {
  Tensor<Scalar> under;
  Tensor<Scalar> over;
  std::optional<Tensor<Scalar>> reference;
};

template <typename Scalar>
PairTensors<Scalar> pair_tensors(const ExposurePair& p) {
  PairTensors<Scalar> t{p.under.template to_tensor<Scalar>(), p.over.template to_tensor<Scalar>(), std::nullopt};
  if (p.reference) t.reference = p.reference->template to_tensor<Scalar>();
  return t;
}

template <typename Scalar>
struct LossParams {
  ad::Var<Scalar> beta;       // (1,1,1,17) logits
  std::vector<bool> enabled;  // empty = all candidates enabled
};

template <typename Scalar>
LossParams<Scalar> make_loss_params() {
  return {ad::parameter(Tensor<Scalar>(Shape{1, 1, 1, static_cast<Index>(kLossCount)})), {}};
}

// ---------------------------------------------------------------------------
// Individual candidates. All return a scalar Var (batch mean).

namespace detail {

inline void require_same(const Shape& a, const Shape& b, const char* where) {
  if (!(a == b)) throw ShapeMismatch(where, a, b);
}

}  // namespace detail

template <typename Scalar>
ad::Var<Scalar> pixel_loss(const ad::Var<Scalar>& f, const Tensor<Scalar>& r, int norm) {
  detail::require_same(f.shape(), r.shape(), "pixel_loss");
  if (norm != 1 && norm != 2) throw std::invalid_argument("pixel_loss: norm must be 1 or 2");
  auto d = ad::sub_const(f, r);
  return ad::mean(norm == 1 ? ad::abs(d) : ad::square(d));
}

inline constexpr Index kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

template <typename Scalar>
Tensor<Scalar> gaussian_window(Index size, double sigma) {
  Tensor<Scalar> k(Shape{1, 1, size, size});
  std::vector<double> g(static_cast<std::size_t>(size));
  double total = 0;
  for (Index i = 0; i < size; ++i) {
    const double x = static_cast<double>(i) - static_cast<double>(size - 1) / 2;
    total += (g[static_cast<std::size_t>(i)] = std::exp(-x * x / (2 * sigma * sigma)));
  }
  for (Index i = 0; i < size; ++i)
    for (Index j = 0; j < size; ++j)
      k(0, 0, i, j) = static_cast<Scalar>(g[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(j)] / (total * total));
  return k;
}

/// Mean SSIM map over all pixels, per channel, dynamic range 1. Local statistics use the
/// Gaussian window over a border-replicated image.
template <typename Scalar>
ad::Var<Scalar> ssim(const ad::Var<Scalar>& x, const Tensor<Scalar>& y) {
  detail::require_same(x.shape(), y.shape(), "ssim");
  if (std::min(x.shape().h, x.shape().w) < 2) throw ImageTooSmall("ssim: images must be at least 2x2, got " + x.shape().str());
  const auto win = gaussian_window<Scalar>(kSsimWindow, kSsimSigma);
  const Index pad = kSsimWindow / 2;
  auto blur = [&](const ad::Var<Scalar>& v) { return ad::filter_valid(ad::pad_replicate(v, pad), win); };
  const Scalar c1 = static_cast<Scalar>(kSsimK1 * kSsimK1);
  const Scalar c2 = static_cast<Scalar>(kSsimK2 * kSsimK2);
  const auto yv = ad::constant(y);
  const auto mu_x = blur(x);
  const auto mu_y = blur(yv);
  const auto sxx = ad::sub(blur(ad::square(x)), ad::square(mu_x));
  const auto syy = ad::sub(blur(ad::square(yv)), ad::square(mu_y));
  const auto sxy = ad::sub(blur(ad::mul(x, yv)), ad::mul(mu_x, mu_y));
  const auto num = ad::mul(ad::affine(ad::mul(mu_x, mu_y), Scalar(2), c1), ad::affine(sxy, Scalar(2), c2));
  const auto den = ad::mul(ad::affine(ad::add(ad::square(mu_x), ad::square(mu_y)), Scalar(1), c1),
                           ad::affine(ad::add(sxx, syy), Scalar(1), c2));
  return ad::mean(ad::div(num, den));
}

template <typename Scalar>
ad::Var<Scalar> ssim_loss(const ad::Var<Scalar>& f, const Tensor<Scalar>& r) {
  return ad::affine(ssim(f, r), Scalar(-1), Scalar(1));
}

/// 1 - MEF-SSIM of f against the (under, over) stack, averaged over samples and channels.
template <typename Scalar>
ad::Var<Scalar> mef_ssim_loss(const ad::Var<Scalar>& f, const Tensor<Scalar>& under, const Tensor<Scalar>& over) {
  detail::require_same(f.shape(), under.shape(), "mef_ssim_loss");
  detail::require_same(under.shape(), over.shape(), "mef_ssim_loss");
  const Shape s = f.shape();
  if (std::min(s.h, s.w) < kMefSsimWindow)
    throw ImageTooSmall("mef_ssim_loss: images must be at least 8x8, got " + s.str());
  const Scalar c2 = static_cast<Scalar>(kSsimK2 * kSsimK2);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(s.n * s.c);
  std::vector<MefDesired<Scalar>> desired;
  Scalar score = 0;
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      desired.push_back(mef_desired<Scalar>(under.plane(n, c), over.plane(n, c)));
      score += mef_ssim_score(desired.back(), f.value().plane(n, c), c2);
    }
  return ad::detail::make_op<Scalar>(
      Tensor<Scalar>::scalar(Scalar(1) - score * inv), {f.node()},
      [desired = std::move(desired), c2, inv](ad::Node<Scalar>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        const Shape& sh = in.value.shape();
        Tensor<Scalar> g(sh);
        RowPlane<Scalar> gp(sh.h, sh.w);
        std::size_t k = 0;
        for (Index n = 0; n < sh.n; ++n)
          for (Index c = 0; c < sh.c; ++c) {
            gp.setZero();
            mef_ssim_score(desired[k++], in.value.plane(n, c), c2, &gp);
            g.plane(n, c) = gp * (-self.grad[0] * inv);
          }
        in.accumulate(g.array());
      });
}

inline constexpr double kGradEpsilon = 1e-18;

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> sobel_kernels() {
  Tensor<Scalar> kx(Shape{1, 1, 3, 3}), ky(Shape{1, 1, 3, 3});
  const int sx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) {
      kx(0, 0, i, j) = static_cast<Scalar>(sx[i][j]);
      ky(0, 0, i, j) = static_cast<Scalar>(sx[j][i]);
    }
  return {kx, ky};
}

/// Per-channel Sobel magnitude over valid positions: (N, C, H-2, W-2).
template <typename Scalar>
ad::Var<Scalar> sobel_magnitude(const ad::Var<Scalar>& x) {
  if (std::min(x.shape().h, x.shape().w) < 3) throw ImageTooSmall("sobel: images must be at least 3x3");
  const auto [kx, ky] = sobel_kernels<Scalar>();
  const auto gx = ad::filter_valid(x, kx);
  const auto gy = ad::filter_valid(x, ky);
  return ad::sqrt(ad::affine(ad::add(ad::square(gx), ad::square(gy)), Scalar(1), static_cast<Scalar>(kGradEpsilon)));
}

template <typename Scalar>
ad::Var<Scalar> grad_loss(const ad::Var<Scalar>& f, const Tensor<Scalar>& under, const Tensor<Scalar>& over) {
  detail::require_same(f.shape(), under.shape(), "grad_loss");
  detail::require_same(under.shape(), over.shape(), "grad_loss");
  const auto gu = sobel_magnitude(ad::constant(under)).value();
  const auto go = sobel_magnitude(ad::constant(over)).value();
  Tensor<Scalar> target(gu.shape(), gu.array().max(go.array()));
  return ad::mean(ad::abs(ad::sub_const(sobel_magnitude(f), target)));
}

/// Sum over layers of the mean squared difference between feature maps.
template <typename Scalar>
ad::Var<Scalar> feature_distance(const std::vector<ad::Var<Scalar>>& a, const std::vector<ad::Var<Scalar>>& b) {
  ad::Var<Scalar> total;
  for (std::size_t l = 0; l < a.size(); ++l) {
    auto t = ad::mean(ad::square(ad::sub(a[l], b[l])));
    total = total.defined() ? ad::add(total, t) : t;
  }
  return total;
}

template <typename Scalar>
ad::Var<Scalar> perceptual_loss(const ad::Var<Scalar>& f, const Tensor<Scalar>& r, const FeatureExtractor<Scalar>* g) {
  detail::require_same(f.shape(), r.shape(), "perceptual_loss");
  return feature_distance(extract_features(g, f), extract_features(g, ad::constant(r)));
}

inline constexpr double kPsnrCap = 100.0;

/// -min(10 log10(1 / MSE), 100) per sample, averaged over the batch.
template <typename Scalar>
ad::Var<Scalar> psnr_loss(const ad::Var<Scalar>& f, const Tensor<Scalar>& r) {
  detail::require_same(f.shape(), r.shape(), "psnr_loss");
  const auto mse = mse_per_sample(f, ad::constant(r));
  const Index n = mse.shape().n;
  Tensor<Scalar> out(mse.shape());
  for (Index i = 0; i < n; ++i) {
    const Scalar m = mse.value()[i];
    const Scalar p = m > 0 ? Scalar(-10) * std::log10(m) : std::numeric_limits<Scalar>::infinity();
    out[i] = -std::min(p, static_cast<Scalar>(kPsnrCap));
  }
  auto neg = ad::detail::make_op<Scalar>(std::move(out), {mse.node()}, [](ad::Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    typename Tensor<Scalar>::Array g = Tensor<Scalar>::Array::Zero(in.value.size());
    for (Index i = 0; i < g.size(); ++i) {
      const Scalar m = in.value[i];
      if (self.value[i] > static_cast<Scalar>(-kPsnrCap)) g[i] = self.grad[i] * Scalar(10) / (m * std::log(Scalar(10)));
    }
    in.accumulate(g);
  });
  return ad::mean(neg);
}

inline constexpr double kColorMinNorm = 1e-6;

/// Mean angle (radians) between RGB vectors of f and r over all pixels.
template <typename Scalar>
ad::Var<Scalar> color_loss(const ad::Var<Scalar>& f, const Tensor<Scalar>& r) {
  detail::require_same(f.shape(), r.shape(), "color_loss");
  const Shape s = f.shape();
  if (s.c != 3) throw NotColorImage("color_loss: expected 3 channels, got " + s.str());
  const Index px = s.n * s.plane();
  const auto& fv = f.value();
  Scalar total = 0;
  for (Index n = 0; n < s.n; ++n)
    for (Index p = 0; p < s.plane(); ++p) {
      Scalar dot = 0, nf = 0, nr = 0;
      for (Index c = 0; c < 3; ++c) {
        const Index i = n * s.sample() + c * s.plane() + p;
        dot += fv[i] * r[i];
        nf += fv[i] * fv[i];
        nr += r[i] * r[i];
      }
      nf = std::sqrt(nf);
      nr = std::sqrt(nr);
      if (nf < kColorMinNorm || nr < kColorMinNorm) continue;
      total += std::acos(std::clamp(dot / (nf * nr), Scalar(-1), Scalar(1)));
    }
  return ad::detail::make_op<Scalar>(Tensor<Scalar>::scalar(total / static_cast<Scalar>(px)), {f.node()},
                                     [r, px](ad::Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    const Shape& sh = in.value.shape();
    const auto& x = in.value;
    typename Tensor<Scalar>::Array g = Tensor<Scalar>::Array::Zero(x.size());
    const Scalar scale = self.grad[0] / static_cast<Scalar>(px);
    for (Index n = 0; n < sh.n; ++n)
      for (Index p = 0; p < sh.plane(); ++p) {
        Index idx[3];
        Scalar dot = 0, nf = 0, nr = 0;
        for (Index c = 0; c < 3; ++c) {
          idx[c] = n * sh.sample() + c * sh.plane() + p;
          dot += x[idx[c]] * r[idx[c]];
          nf += x[idx[c]] * x[idx[c]];
          nr += r[idx[c]] * r[idx[c]];
        }
        nf = std::sqrt(nf);
        nr = std::sqrt(nr);
        if (nf < kColorMinNorm || nr < kColorMinNorm) continue;
        const Scalar cs = dot / (nf * nr);
        const Scalar sn2 = Scalar(1) - cs * cs;
        if (sn2 <= Scalar(0)) continue;
        const Scalar k = -scale / std::sqrt(sn2);
        for (Index c = 0; c < 3; ++c)
          g[idx[c]] += k * (r[idx[c]] / (nf * nr) - cs * x[idx[c]] / (nf * nf));
      }
    in.accumulate(g);
  });
}

/// (sum dx^2 + sum dy^2) / (H W C), averaged over the batch.
template <typename Scalar>
ad::Var<Scalar> tv_loss(const ad::Var<Scalar>& f) {
  const Shape s = f.shape();
  if (s.h < 2 || s.w < 2) throw ImageTooSmall("tv_loss: images must be at least 2x2, got " + s.str());
  Tensor<Scalar> kx(Shape{1, 1, 1, 2}), ky(Shape{1, 1, 2, 1});
  kx[0] = ky[0] = Scalar(-1);
  kx[1] = ky[1] = Scalar(1);
  const auto dx = ad::sum(ad::square(ad::filter_valid(f, kx)));
  const auto dy = ad::sum(ad::square(ad::filter_valid(f, ky)));
  return ad::affine(ad::add(dx, dy), Scalar(1) / static_cast<Scalar>(s.size()));
}

// ---------------------------------------------------------------------------

inline bool requires_reference(const LossCandidate& c) { return c.ref == LossRef::reference; }

/// Which candidates can be evaluated for the given inputs.
template <typename Scalar>
std::vector<bool> evaluable_mask(const LossParams<Scalar>& params, bool has_reference, bool has_extractor) {
  std::vector<bool> mask(kLossCount);
  for (std::size_t k = 0; k < kLossCount; ++k) {
    const auto& c = kLossCandidates[k];
    bool on = params.enabled.empty() || params.enabled[k];
    if (requires_reference(c) && !has_reference) on = false;
    if (c.family == LossFamily::PERC && !has_extractor) on = false;
    mask[k] = on;
  }
  return mask;
}

template <typename Scalar>
struct CombineResult {
  ad::Var<Scalar> total;
  std::array<std::optional<Scalar>, kLossCount> values{};
  Tensor<Scalar> weights;  // renormalized over evaluable candidates, zero elsewhere
};

/// Evaluates candidate k. Features of f are passed in so perceptual terms share one pass.
template <typename Scalar>
ad::Var<Scalar> candidate_loss(std::size_t k, const ad::Var<Scalar>& f, const PairTensors<Scalar>& pair,
                               const FeatureExtractor<Scalar>* g, const std::vector<ad::Var<Scalar>>* f_features = nullptr) {
  const auto& c = kLossCandidates.at(k);
  auto target = [&]() -> const Tensor<Scalar>& {
    switch (c.ref) {
      case LossRef::over: return pair.over;
      case LossRef::under: return pair.under;
      case LossRef::reference:
        if (!pair.reference) throw std::invalid_argument(std::string(c.name) + " requires a reference image");
        return *pair.reference;
      default: return pair.over;
    }
  };
  switch (c.family) {
    case LossFamily::L1: return pixel_loss(f, target(), 1);
    case LossFamily::L2: return pixel_loss(f, target(), 2);
    case LossFamily::SSIM: return ssim_loss(f, target());
    case LossFamily::MEF_SSIM: return mef_ssim_loss(f, pair.under, pair.over);
    case LossFamily::GRAD: return grad_loss(f, pair.under, pair.over);
    case LossFamily::PERC:
      if (f_features) {
        detail::require_same(f.shape(), target().shape(), "perceptual_loss");
        return feature_distance(*f_features, extract_features(g, ad::constant(target())));
      }
      return perceptual_loss(f, target(), g);
    case LossFamily::PSNR: return psnr_loss(f, target());
    case LossFamily::COLOR: return color_loss(f, target());
    case LossFamily::TV: return tv_loss(f);
  }
  throw std::logic_error("unhandled loss family");
}

/// sum_k w_k L_k(f) with w = softmax(beta) over the evaluable candidates.
template <typename Scalar>
CombineResult<Scalar> combine(const LossParams<Scalar>& params, const PairTensors<Scalar>& pair, const ad::Var<Scalar>& f,
                              const FeatureExtractor<Scalar>* g) {
  if (params.beta.shape().size() != static_cast<Index>(kLossCount))
    throw ShapeMismatch("combine: beta must hold 17 logits, got " + params.beta.shape().str());
  const auto mask = evaluable_mask(params, pair.reference.has_value(), g != nullptr);
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
    throw NoEvaluableCandidates("combine: every loss candidate is masked");
  const auto w = ad::softmax(params.beta, mask);
  CombineResult<Scalar> res;
  res.weights = w.value();
  std::optional<std::vector<ad::Var<Scalar>>> feats;
  for (std::size_t k = 0; k < kLossCount; ++k) {
    if (!mask[k]) continue;
    if (kLossCandidates[k].family == LossFamily::PERC && !feats) feats = g->extract(f);
    auto l = candidate_loss(k, f, pair, g, feats ? &*feats : nullptr);
    res.values[k] = l.item();
    auto term = ad::mul(ad::pick(w, static_cast<Index>(k)), l);
    res.total = res.total.defined() ? ad::add(res.total, term) : term;
  }
  return res;
}

/// Candidate name -> softmax(beta) weight over all 17 logits.
template <typename Scalar>
nlohmann::json loss_report(const LossParams<Scalar>& params) {
  const auto w = ad::softmax(ad::constant(params.beta.value())).value();
  nlohmann::ordered_json j;
  for (std::size_t k = 0; k < kLossCount; ++k) j[std::string(kLossCandidates[k].name)] = static_cast<double>(w[static_cast<Index>(k)]);
  return nlohmann::json::parse(j.dump());
}

/// Logits reproducing a report's weights (log w); missing names are rejected.
template <typename Scalar>
LossParams<Scalar> loss_params_from_report(const nlohmann::json& j) {
  auto p = make_loss_params<Scalar>();
  for (std::size_t k = 0; k < kLossCount; ++k) {
    const std::string name(kLossCandidates[k].name);
    if (!j.contains(name)) throw std::invalid_argument("loss report lacks '" + name + "'");
    const double w = j.at(name).get<double>();
    if (!(w > 0)) throw std::invalid_argument("loss report weight for '" + name + "' must be positive");
    p.beta.mutable_value()[static_cast<Index>(k)] = static_cast<Scalar>(std::log(w));
  }
  return p;
}

}  // namespace hsds
