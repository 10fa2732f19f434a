#include "hsds/losses.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <cmath>
#include <numbers>

using namespace hsds;
using hsds::test::fd_rel_error;
using hsds::test::random_tensor;
using namespace hsds::oracle;

namespace {

/// Mean SSIM with an 11x11 Gaussian (sigma 1.5) over a border-replicated plane, range 1.
double ssim_oracle(const Grid& a, const Grid& b) {
  const int r = 5;
  double k[11][11], z = 0;
  for (int i = -r; i <= r; ++i)
    for (int j = -r; j <= r; ++j) z += k[i + r][j + r] = std::exp(-(i * i + j * j) / (2 * 1.5 * 1.5));
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  for (Index y = 0; y < a.h; ++y)
    for (Index x = 0; x < a.w; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = -r; i <= r; ++i)
        for (int j = -r; j <= r; ++j) {
          const Index yy = std::clamp<Index>(y + i, 0, a.h - 1), xx = std::clamp<Index>(x + j, 0, a.w - 1);
          const double wk = k[i + r][j + r] / z, va = a(yy, xx), vb = b(yy, xx);
          ma += wk * va;
          mb += wk * vb;
          saa += wk * va * va;
          sbb += wk * vb * vb;
          sab += wk * va * vb;
        }
      saa -= ma * ma;
      sbb -= mb * mb;
      sab -= ma * mb;
      total += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
    }
  return total / static_cast<double>(a.h * a.w);
}

/// Sobel magnitude over valid positions.
Grid sobel_oracle(const Grid& g) {
  Grid out(g.h - 2, g.w - 2);
  for (Index y = 1; y + 1 < g.h; ++y)
    for (Index x = 1; x + 1 < g.w; ++x) {
      const double gx = (g(y - 1, x + 1) + 2 * g(y, x + 1) + g(y + 1, x + 1)) - (g(y - 1, x - 1) + 2 * g(y, x - 1) + g(y + 1, x - 1));
      const double gy = (g(y + 1, x - 1) + 2 * g(y + 1, x) + g(y + 1, x + 1)) - (g(y - 1, x - 1) + 2 * g(y - 1, x) + g(y - 1, x + 1));
      out(y - 1, x - 1) = std::sqrt(gx * gx + gy * gy + 1e-18);
    }
  return out;
}

/// The fallback extractor rebuilt from its recipe: conv3x3+ReLU (3->8, 8->8), 2x2 mean pool,
/// conv3x3+ReLU (8->16, 16->16); He-normal weights and 0.01-scaled biases from one normal stream.
struct OracleExtractor {
  struct Conv {
    Index cin, cout;
    std::vector<double> w, b;
  };
  std::vector<Conv> convs;

  explicit OracleExtractor(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto [cin, cout] : {std::pair<Index, Index>{3, 8}, {8, 8}, {8, 16}, {16, 16}}) {
      Conv c{cin, cout, {}, {}};
      const double sd = std::sqrt(2.0 / static_cast<double>(cin * 9));
      for (Index i = 0; i < cout * cin * 9; ++i) c.w.push_back(sd * g(rng));
      for (Index i = 0; i < cout; ++i) c.b.push_back(0.01 * g(rng));
      convs.push_back(std::move(c));
    }
  }

  static std::vector<Grid> conv_relu(const Conv& c, const std::vector<Grid>& x) {
    const Index h = x[0].h, w = x[0].w;
    std::vector<Grid> out;
    for (Index o = 0; o < c.cout; ++o) {
      Grid g(h, w);
      for (Index y = 0; y < h; ++y)
        for (Index xx = 0; xx < w; ++xx) {
          double s = c.b[static_cast<std::size_t>(o)];
          for (Index i = 0; i < c.cin; ++i)
            for (Index a = 0; a < 3; ++a)
              for (Index b = 0; b < 3; ++b) {
                const Index yy = y + a - 1, xq = xx + b - 1;
                if (yy < 0 || yy >= h || xq < 0 || xq >= w) continue;
                s += c.w[static_cast<std::size_t>(((o * c.cin + i) * 3 + a) * 3 + b)] * x[static_cast<std::size_t>(i)](yy, xq);
              }
          g(y, xx) = std::max(s, 0.0);
        }
      out.push_back(std::move(g));
    }
    return out;
  }

  static std::vector<Grid> pool(const std::vector<Grid>& x) {
    std::vector<Grid> out;
    for (const auto& g : x) {
      Grid p(g.h / 2, g.w / 2);
      for (Index y = 0; y < p.h; ++y)
        for (Index xx = 0; xx < p.w; ++xx)
          p(y, xx) = (g(2 * y, 2 * xx) + g(2 * y + 1, 2 * xx) + g(2 * y, 2 * xx + 1) + g(2 * y + 1, 2 * xx + 1)) / 4;
      out.push_back(std::move(p));
    }
    return out;
  }

  std::vector<std::vector<Grid>> layers(const Tensor<double>& img) const {
    std::vector<Grid> x;
    for (Index c = 0; c < 3; ++c) x.push_back(plane_of(img, 0, c));
    std::vector<std::vector<Grid>> out;
    x = conv_relu(convs[0], x);
    out.push_back(x);
    x = conv_relu(convs[1], x);
    out.push_back(x);
    x = conv_relu(convs[2], pool(x));
    out.push_back(x);
    x = conv_relu(convs[3], x);
    out.push_back(x);
    return out;
  }
};

double perceptual_oracle(const OracleExtractor& e, const Tensor<double>& a, const Tensor<double>& b) {
  const auto la = e.layers(a), lb = e.layers(b);
  double total = 0;
  for (std::size_t l = 0; l < la.size(); ++l) {
    double s = 0, n = 0;
    for (std::size_t c = 0; c < la[l].size(); ++c)
      for (std::size_t i = 0; i < la[l][c].v.size(); ++i) {
        const double d = la[l][c].v[i] - lb[l][c].v[i];
        s += d * d;
        n += 1;
      }
    total += s / n;
  }
  return total;
}

Tensor<double> constant(Shape s, double v) { return Tensor<double>(s, v); }

double value(const ad::Var<double>& v) { return v.value()[0]; }

PairTensors<double> random_pair(Index side, std::uint64_t seed, bool with_ref = true) {
  const Shape s{1, 3, side, side};
  PairTensors<double> p{random_tensor(s, seed, 0.05, 0.6), random_tensor(s, seed + 1, 0.4, 0.95), std::nullopt};
  if (with_ref) p.reference = random_tensor(s, seed + 2, 0.1, 0.9);
  return p;
}

/// Smooth structured plane pair: shared gradient and sinusoid, different exposure curves.
PairTensors<double> structured_pair(Index side) {
  const Shape s{1, 3, side, side};
  PairTensors<double> p{Tensor<double>(s), Tensor<double>(s), std::nullopt};
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < side; ++y)
      for (Index x = 0; x < side; ++x) {
        const double r = 0.5 + 0.3 * std::sin(0.4 * x + 0.1 * c) * std::cos(0.3 * y) + 0.01 * (x - y);
        p.under(0, c, y, x) = 0.8 * r * r;
        p.over(0, c, y, x) = std::min(1.0, 0.3 + 0.9 * r);
      }
  return p;
}

}  // namespace

TEST_CASE("candidate space has 17 valid entries") {
  CHECK(kLossCandidates.size() == 17);
  for (const auto& c : kLossCandidates) CHECK(is_valid_candidate(c.family, c.ref));
  CHECK_FALSE(is_valid_candidate(LossFamily::MEF_SSIM, LossRef::over));
  CHECK_FALSE(is_valid_candidate(LossFamily::TV, LossRef::reference));
  CHECK_FALSE(is_valid_candidate(LossFamily::PSNR, LossRef::under));
  int refs = 0;
  for (const auto& c : kLossCandidates) refs += c.ref == LossRef::reference;
  CHECK(refs == 6);
  CHECK(loss_index("tv") == 16);
  CHECK_THROWS(loss_index("nope"));
}

TEST_CASE("pixel losses") {
  const Shape s{1, 3, 8, 8};
  const auto r = random_tensor(s, 1, 0, 1);
  CHECK(value(pixel_loss(ad::constant(r), r, 1)) == 0.0);
  CHECK(value(pixel_loss(ad::constant(constant(s, 0.5)), constant(s, 0.25), 1)) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(value(pixel_loss(ad::constant(constant(s, 0.5)), constant(s, 0.25), 2)) == doctest::Approx(0.0625).epsilon(1e-15));
  CHECK_THROWS_AS(pixel_loss(ad::constant(r), constant(Shape{1, 3, 8, 9}, 0.0), 1), ShapeMismatch);
}

TEST_CASE("ssim loss") {
  const Shape s{1, 1, 16, 16};
  SUBCASE("identical images") {
    const auto r = random_tensor(s, 2, 0, 1);
    CHECK(value(ssim_loss(ad::constant(r), r)) == doctest::Approx(0.0).epsilon(1e-14));
  }
  SUBCASE("constant offset on a mid-gray base") {
    const auto r = random_tensor(s, 3, 0.4, 0.6);
    Tensor<double> f(r);
    f.array() += 0.1;
    const double oracle = 1.0 - ssim_oracle(plane_of(f, 0, 0), plane_of(r, 0, 0));
    CHECK(oracle == doctest::Approx(0.0167025044843).epsilon(1e-8));
    CHECK(value(ssim_loss(ad::constant(f), r)) == doctest::Approx(oracle).epsilon(1e-12));
  }
  SUBCASE("independent uniform noise") {
    const auto a = random_tensor(Shape{1, 1, 32, 32}, 4, 0, 1), b = random_tensor(Shape{1, 1, 32, 32}, 5, 0, 1);
    const double oracle = 1.0 - ssim_oracle(plane_of(a, 0, 0), plane_of(b, 0, 0));
    CHECK(oracle > 0.9);
    CHECK(value(ssim_loss(ad::constant(a), b)) == doctest::Approx(oracle).epsilon(1e-12));
  }
  SUBCASE("small images are supported down to 8x8") {
    const auto a = random_tensor(Shape{1, 3, 8, 8}, 6, 0, 1), b = random_tensor(Shape{1, 3, 8, 8}, 7, 0, 1);
    double oracle = 0;
    for (Index c = 0; c < 3; ++c) oracle += ssim_oracle(plane_of(a, 0, c), plane_of(b, 0, c)) / 3;
    CHECK(value(ssim(ad::constant(a), b)) == doctest::Approx(oracle).epsilon(1e-12));
  }
}

TEST_CASE("mef-ssim loss") {
  const auto p = structured_pair(32);
  SUBCASE("sources and fused image all equal") {
    CHECK(value(mef_ssim_loss(ad::constant(p.under), p.under, p.under)) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("pair mean against a brute-force patch oracle") {
    Tensor<double> mean(p.under.shape(), 0.5 * (p.under.array() + p.over.array()));
    double oracle = 0;
    for (Index c = 0; c < 3; ++c) oracle += mef_ssim_oracle(plane_of(p.under, 0, c), plane_of(p.over, 0, c), plane_of(mean, 0, c), 0.03 * 0.03) / 3;
    CHECK(1 - oracle == doctest::Approx(0.0154546186051).epsilon(1e-8));
    CHECK(value(mef_ssim_loss(ad::constant(mean), p.under, p.over)) == doctest::Approx(1 - oracle).epsilon(1e-12));
  }
  SUBCASE("constant fused image") {
    const double l = value(mef_ssim_loss(ad::constant(constant(p.under.shape(), 0.5)), p.under, p.over));
    CHECK(l > 0.9);
  }
  SUBCASE("too small") {
    const Shape s{1, 1, 7, 7};
    CHECK_THROWS_AS(mef_ssim_loss(ad::constant(constant(s, 0.1)), constant(s, 0.1), constant(s, 0.2)), ImageTooSmall);
  }
}

TEST_CASE("gradient loss") {
  const Shape s{1, 3, 8, 8};
  SUBCASE("all constant") {
    CHECK(value(grad_loss(ad::constant(constant(s, 0.3)), constant(s, 0.1), constant(s, 0.9))) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("fused equals the stronger source") {
    const auto o = random_tensor(s, 8, 0, 1);
    Tensor<double> u(o);
    u.array() *= 0.5;
    CHECK(value(grad_loss(ad::constant(o), u, o)) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("vertical step edge, constant fused image") {
    Tensor<double> edge(s);
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < 8; ++y)
        for (Index x = 4; x < 8; ++x) edge(0, c, y, x) = 1.0;
    Tensor<double> faint(edge);
    faint.array() *= 0.5;
    // Sobel response 4 on the two columns straddling the edge of a 6x6 valid map: 12 * 4 / 36
    const Grid mag = sobel_oracle(plane_of(edge, 0, 0));
    double oracle = 0;
    for (double v : mag.v) oracle += std::abs(std::sqrt(1e-18) - v) / 36.0;
    CHECK(oracle == doctest::Approx(4.0 / 3.0).epsilon(1e-8));
    CHECK(value(grad_loss(ad::constant(constant(s, 0.5)), faint, edge)) == doctest::Approx(oracle).epsilon(1e-12));
  }
}

TEST_CASE("perceptual loss with the fallback extractor") {
  const auto g = make_fallback_extractor<double>();
  const OracleExtractor oracle_net(kFallbackExtractorSeed);
  const Shape s{1, 3, 8, 8};
  const auto a = random_tensor(s, 10, 0, 1), b = random_tensor(s, 11, 0, 1);
  CHECK(value(perceptual_loss(ad::constant(a), a, g.get())) == 0.0);
  const double oracle = perceptual_oracle(oracle_net, a, b);
  CHECK(oracle == doctest::Approx(0.212781968101).epsilon(1e-8));
  CHECK(value(perceptual_loss(ad::constant(a), b, g.get())) == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(fd_rel_error([&](const ad::Var<double>& f) { return perceptual_loss(f, b, g.get()); }, a) < 1e-4);
  CHECK_THROWS_AS(perceptual_loss<double>(ad::constant(a), b, nullptr), ExtractorUnavailable);
}

TEST_CASE("psnr loss") {
  const Shape s{1, 3, 8, 8};
  const auto r = constant(s, 0.5);
  CHECK(value(psnr_loss(ad::constant(r), r)) == -100.0);
  CHECK(value(psnr_loss(ad::constant(constant(s, 0.6)), r)) == doctest::Approx(-20.0).epsilon(1e-12));
  CHECK(value(psnr_loss(ad::constant(constant(s, 1.0)), constant(s, 0.0))) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("color loss") {
  const Shape s{1, 3, 8, 8};
  const auto r = random_tensor(s, 12, 0.1, 1);
  CHECK(value(color_loss(ad::constant(r), r)) == doctest::Approx(0.0).epsilon(1e-7));
  SUBCASE("orthogonal primaries") {
    Tensor<double> red(s), green(s);
    for (Index y = 0; y < 8; ++y)
      for (Index x = 0; x < 8; ++x) {
        red(0, 0, y, x) = 1.0;
        green(0, 1, y, x) = 1.0;
      }
    CHECK(value(color_loss(ad::constant(red), green)) == doctest::Approx(std::numbers::pi / 2).epsilon(1e-14));
  }
  SUBCASE("scale invariance") {
    const auto f = random_tensor(s, 13, 0.1, 1);
    Tensor<double> f2(f);
    f2.array() *= 2.0;
    CHECK(value(color_loss(ad::constant(f2), r)) == doctest::Approx(value(color_loss(ad::constant(f), r))).epsilon(1e-12));
    Tensor<double> r3(r);
    r3.array() *= 2.0;
    CHECK(value(color_loss(ad::constant(r3), r)) == doctest::Approx(0.0).epsilon(1e-7));
  }
  SUBCASE("zero pixels contribute nothing") {
    Tensor<double> f(r);
    for (Index c = 0; c < 3; ++c) f(0, c, 0, 0) = 0.0;
    CHECK(value(color_loss(ad::constant(f), r)) == doctest::Approx(0.0).epsilon(1e-7));
  }
  CHECK_THROWS_AS(color_loss(ad::constant(constant(Shape{1, 1, 8, 8}, 0.5)), constant(Shape{1, 1, 8, 8}, 0.5)), NotColorImage);
}

TEST_CASE("total variation loss") {
  CHECK(value(tv_loss(ad::constant(constant(Shape{1, 3, 8, 8}, 0.4)))) == 0.0);
  Tensor<double> a(Shape{1, 1, 2, 2}), b(Shape{1, 1, 2, 2});
  a(0, 0, 0, 1) = a(0, 0, 1, 1) = 1.0;
  b(0, 0, 1, 0) = b(0, 0, 1, 1) = 1.0;
  CHECK(value(tv_loss(ad::constant(a))) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(value(tv_loss(ad::constant(b))) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(tv_loss(ad::constant(constant(Shape{1, 1, 1, 4}, 0.0))), ImageTooSmall);
}

TEST_CASE("all 17 candidates pass finite-difference gradient checks on 8x8") {
  const auto g = make_fallback_extractor<double>();
  const auto pair = random_pair(8, 20);
  const auto f0 = random_tensor(Shape{1, 3, 8, 8}, 30, 0.1, 0.9);
  for (std::size_t k = 0; k < kLossCount; ++k) {
    CAPTURE(kLossCandidates[k].name);
    const double err = fd_rel_error([&](const ad::Var<double>& f) { return candidate_loss(k, f, pair, g.get()); }, f0);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("candidate losses respect their minimum") {
  const auto g = make_fallback_extractor<double>();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto pair = random_pair(12, 40 + seed);
    const auto f = ad::constant(random_tensor(Shape{1, 3, 12, 12}, 50 + seed, 0, 1));
    for (std::size_t k = 0; k < kLossCount; ++k) {
      const double v = value(candidate_loss(k, f, pair, g.get()));
      CHECK(std::isfinite(v));
      CHECK(v >= (kLossCandidates[k].family == LossFamily::PSNR ? -100.0 : -1e-12));
    }
  }
}

TEST_CASE("combine") {
  const auto g = make_fallback_extractor<double>();
  const auto pair = random_pair(12, 60);
  const auto f = ad::constant(random_tensor(Shape{1, 3, 12, 12}, 61, 0.05, 0.95));

  SUBCASE("near one-hot on tv") {
    auto params = make_loss_params<double>();
    params.beta.mutable_value()[16] = 20.0;
    CHECK(combine(params, pair, f, g.get()).total.value()[0] == doctest::Approx(value(tv_loss(f))).epsilon(1e-6));
  }
  SUBCASE("uniform logits average the candidates") {
    const auto params = make_loss_params<double>();
    double mean = 0;
    for (std::size_t k = 0; k < kLossCount; ++k) mean += value(candidate_loss(k, f, pair, g.get())) / 17.0;
    const auto res = combine(params, pair, f, g.get());
    CHECK(res.total.value()[0] == doctest::Approx(mean).epsilon(1e-12));
    for (std::size_t k = 0; k < kLossCount; ++k) CHECK(res.values[k].has_value());
  }
  SUBCASE("no reference leaves eleven renormalized weights") {
    auto no_ref = pair;
    no_ref.reference.reset();
    const auto res = combine(make_loss_params<double>(), no_ref, f, g.get());
    int on = 0;
    for (std::size_t k = 0; k < kLossCount; ++k) {
      const double w = res.weights[static_cast<Index>(k)];
      if (kLossCandidates[k].ref == LossRef::reference) {
        CHECK(w == 0.0);
        CHECK_FALSE(res.values[k].has_value());
      } else {
        CHECK(w == doctest::Approx(1.0 / 11.0).epsilon(1e-14));
        ++on;
      }
    }
    CHECK(on == 11);
  }
  SUBCASE("perceptual terms are masked without an extractor") {
    const auto res = combine<double>(make_loss_params<double>(), pair, f, nullptr);
    CHECK_FALSE(res.values[loss_index("perc_over")].has_value());
    CHECK(res.weights.array().sum() == doctest::Approx(1.0));
  }
  SUBCASE("everything masked") {
    auto params = make_loss_params<double>();
    params.enabled.assign(kLossCount, false);
    CHECK_THROWS_AS(combine(params, pair, f, g.get()), NoEvaluableCandidates);
  }
  SUBCASE("beta gradient matches finite differences") {
    auto params = make_loss_params<double>();
    params.beta.mutable_value() = random_tensor(params.beta.shape(), 62);
    const double err = fd_rel_error(
        [&](const ad::Var<double>& b) {
          LossParams<double> p{b, {}};
          return combine(p, pair, f, g.get()).total;
        },
        params.beta.value());
    CHECK(err < 1e-6);
  }
}

TEST_CASE("loss report round trip") {
  auto params = make_loss_params<double>();
  params.beta.mutable_value() = random_tensor(params.beta.shape(), 70);
  const auto report = loss_report(params);
  CHECK(report.size() == 17);
  double s = 0;
  for (const auto& [k, v] : report.items()) s += v.get<double>();
  CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  const auto back = loss_params_from_report<double>(report);
  const auto again = loss_report(back);
  for (const auto& [k, v] : report.items()) CHECK(again.at(k).get<double>() == doctest::Approx(v.get<double>()).epsilon(1e-14));
  auto bad = report;
  bad.erase("tv");
  CHECK_THROWS(loss_params_from_report<double>(bad));
}
