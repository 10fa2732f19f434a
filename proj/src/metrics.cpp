#include "hsds/metrics.hpp"

#include "hsds/mef_ssim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace hsds {

using Eigen::Index;

Plane luminance255(const Image& img) { return img.luminance() * 255.0; }

Plane correlate_valid(const Plane& x, const Plane& k) {
  const Index oh = x.rows() - k.rows() + 1, ow = x.cols() - k.cols() + 1;
  if (oh < 1 || ow < 1) throw ImageTooSmall("correlate_valid: image smaller than kernel");
  Plane out = Plane::Zero(oh, ow);
  for (Index b = 0; b < k.cols(); ++b)
    for (Index a = 0; a < k.rows(); ++a) out += k(a, b) * x.block(a, b, oh, ow);
  return out;
}

Plane gaussian_kernel(Index size, double sigma) {
  Plane k(size, size);
  const double c = static_cast<double>(size - 1) / 2;
  for (Index i = 0; i < size; ++i)
    for (Index j = 0; j < size; ++j) {
      const double y = static_cast<double>(i) - c, x = static_cast<double>(j) - c;
      k(i, j) = std::exp(-(x * x + y * y) / (2 * sigma * sigma));
    }
  return k / k.sum();
}

Plane downsample2(const Plane& x) {
  const Index h = (x.rows() + 1) / 2, w = (x.cols() + 1) / 2;
  Plane out(h, w);
  auto at = [&](Index i, Index j) { return x(std::min(i, x.rows() - 1), std::min(j, x.cols() - 1)); };
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j)
      out(i, j) = 0.25 * (at(2 * i, 2 * j) + at(2 * i + 1, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j + 1));
  return out;
}

double sd(const Plane& y) {
  const double m = y.mean();
  return std::sqrt((y - m).square().mean());
}

double en(const Plane& y) {
  std::array<double, 256> hist{};
  for (Index i = 0; i < y.size(); ++i) {
    const long v = std::lround(std::clamp(y(i), 0.0, 255.0));
    hist[static_cast<std::size_t>(v)] += 1;
  }
  double e = 0;
  const double n = static_cast<double>(y.size());
  for (double c : hist)
    if (c > 0) e -= (c / n) * std::log2(c / n);
  return e;
}

double cc(const Plane& f, const Plane& r) {
  if (f.rows() != r.rows() || f.cols() != r.cols()) throw std::invalid_argument("cc: size mismatch");
  const Plane a = f - f.mean(), b = r - r.mean();
  const double va = a.square().sum(), vb = b.square().sum();
  if (va <= 0 || vb <= 0) throw ConstantImage("cc: correlation undefined for a constant image");
  return std::clamp((a * b).sum() / std::sqrt(va * vb), -1.0, 1.0);
}

namespace {

constexpr double kK1 = 0.01, kK2 = 0.03, kL = 255.0;

struct SsimStats {
  double ssim;
  double cs;
};

SsimStats ssim_stats(const Plane& x, const Plane& y) {
  static const Plane win = gaussian_kernel(11, 1.5);
  const double c1 = (kK1 * kL) * (kK1 * kL), c2 = (kK2 * kL) * (kK2 * kL);
  const Plane mx = correlate_valid(x, win), my = correlate_valid(y, win);
  const Plane sxx = correlate_valid(x * x, win) - mx * mx;
  const Plane syy = correlate_valid(y * y, win) - my * my;
  const Plane sxy = correlate_valid(x * y, win) - mx * my;
  const Plane cs = (2 * sxy + c2) / (sxx + syy + c2);
  const Plane l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
  return {(l * cs).mean(), cs.mean()};
}

void require_same(const Plane& a, const Plane& b, const char* where) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(where) + ": size mismatch");
}

}  // namespace

int ms_ssim_levels(Index min_dim, int max_levels) {
  int levels = 0;
  Index d = min_dim;
  while (levels < max_levels && d >= 11) {
    ++levels;
    d = (d + 1) / 2;
  }
  return levels;
}

double ms_ssim(const Plane& f, const Plane& r, int* levels_used) {
  require_same(f, r, "ms_ssim");
  const int levels = ms_ssim_levels(std::min(f.rows(), f.cols()));
  if (levels == 0) throw ImageTooSmall("ms_ssim: images must be at least 11x11");
  if (levels_used) *levels_used = levels;
  double wsum = 0;
  for (int l = 0; l < levels; ++l) wsum += kMsSsimWeights[static_cast<std::size_t>(l)];
  Plane x = f, y = r;
  double out = 1;
  for (int l = 0; l < levels; ++l) {
    const auto st = ssim_stats(x, y);
    const double w = kMsSsimWeights[static_cast<std::size_t>(l)] / wsum;
    const double term = l == levels - 1 ? st.ssim : st.cs;
    out *= std::pow(std::max(term, 0.0), w);
    if (l + 1 < levels) {
      x = downsample2(x);
      y = downsample2(y);
    }
  }
  return out;
}

double mef_ssim_metric(const Plane& f, const Plane& under, const Plane& over) {
  require_same(f, under, "mef_ssim");
  require_same(f, over, "mef_ssim");
  if (std::min(f.rows(), f.cols()) < kMefSsimWindow) throw ImageTooSmall("mef_ssim: images must be at least 8x8");
  const double c2 = (kK2 * kL) * (kK2 * kL);
  const auto d = mef_desired<double>(under, over);
  return mef_ssim_score(d, f, c2);
}

double vifp(const Plane& ref_in, const Plane& dist_in) {
  require_same(ref_in, dist_in, "vifp");
  constexpr double sigma_nsq = 2.0;
  constexpr double eps = 1e-10;
  Plane ref = ref_in, dist = dist_in;
  double num = 0, den = 0;
  for (int scale = 1; scale <= 4; ++scale) {
    const Index n = (Index{1} << (4 - scale + 1)) + 1;
    const Plane win = gaussian_kernel(n, static_cast<double>(n) / 5.0);
    if (scale > 1) {
      ref = correlate_valid(ref, win);
      dist = correlate_valid(dist, win);
      Plane r2((ref.rows() + 1) / 2, (ref.cols() + 1) / 2), d2(r2.rows(), r2.cols());
      for (Index i = 0; i < r2.rows(); ++i)
        for (Index j = 0; j < r2.cols(); ++j) {
          r2(i, j) = ref(2 * i, 2 * j);
          d2(i, j) = dist(2 * i, 2 * j);
        }
      ref = std::move(r2);
      dist = std::move(d2);
    }
    if (std::min(ref.rows(), ref.cols()) < n) throw ImageTooSmall("vif: image too small for the scale pyramid");
    const Plane mu1 = correlate_valid(ref, win), mu2 = correlate_valid(dist, win);
    Plane s1 = (correlate_valid(ref * ref, win) - mu1 * mu1).max(0.0);
    Plane s2 = (correlate_valid(dist * dist, win) - mu2 * mu2).max(0.0);
    const Plane s12 = correlate_valid(ref * dist, win) - mu1 * mu2;
    for (Index i = 0; i < s1.size(); ++i) {
      double g = s12(i) / (s1(i) + eps);
      double sv = s2(i) - g * s12(i);
      double v1 = s1(i);
      if (v1 < eps) {
        g = 0;
        sv = s2(i);
        v1 = 0;
      }
      if (s2(i) < eps) {
        g = 0;
        sv = 0;
      }
      if (g < 0) {
        sv = s2(i);
        g = 0;
      }
      sv = std::max(sv, eps);
      num += std::log10(1 + g * g * v1 / (sv + sigma_nsq));
      den += std::log10(1 + v1 / sigma_nsq);
    }
  }
  if (den <= 0) return (ref_in - dist_in).abs().maxCoeff() == 0 ? 1.0 : 0.0;
  return num / den;
}

double vif(const Plane& f, const Plane& under, const Plane& over) { return vifp(under, f) + vifp(over, f); }

namespace {

constexpr double kTmqiA = 0.8012, kTmqiAlpha = 0.3046, kTmqiBeta = 0.7088;

double normcdf(double x, double mu, double sigma) { return 0.5 * std::erfc(-(x - mu) / (sigma * std::numbers::sqrt2)); }

double normpdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2 * std::numbers::pi));
}

double betapdf(double x, double a, double b) {
  if (x <= 0 || x >= 1) return 0.0;
  const double lbeta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  return std::exp((a - 1) * std::log(x) + (b - 1) * std::log1p(-x) - lbeta);
}

double tmqi_local(const Plane& hdr, const Plane& ldr, double sf) {
  static const Plane win = gaussian_kernel(11, 1.5);
  constexpr double c1 = 0.01, c2 = 10.0;
  const Plane m1 = correlate_valid(hdr, win), m2 = correlate_valid(ldr, win);
  const Plane s1 = (correlate_valid(hdr * hdr, win) - m1 * m1).max(0.0).sqrt();
  const Plane s2 = (correlate_valid(ldr * ldr, win) - m2 * m2).max(0.0).sqrt();
  const Plane s12 = correlate_valid(hdr * ldr, win) - m1 * m2;
  const double csf = 100.0 * 2.6 * (0.0192 + 0.114 * sf) * std::exp(-std::pow(0.114 * sf, 1.1));
  const double u = 128.0 / (1.4 * csf), sig = u / 3.0;
  const Plane p1 = s1.unaryExpr([&](double v) { return normcdf(v, u, sig); });
  const Plane p2 = s2.unaryExpr([&](double v) { return normcdf(v, u, sig); });
  const Plane smap = ((2 * p1 * p2 + c1) / (p1 * p1 + p2 * p2 + c1)) * ((s12 + c2) / (s1 * s2 + c2));
  return smap.mean();
}

}  // namespace

double tmqi_naturalness(const Plane& y) {
  constexpr Index block = 11;
  double weighted = 0;
  for (Index i = 0; i < y.rows(); i += block)
    for (Index j = 0; j < y.cols(); j += block) {
      const Index bh = std::min(block, y.rows() - i), bw = std::min(block, y.cols() - j);
      const auto b = y.block(i, j, bh, bw);
      const double cnt = static_cast<double>(bh * bw);
      double s = 0;
      if (cnt > 1) s = std::sqrt((b - b.mean()).square().sum() / (cnt - 1));
      weighted += s * cnt;
    }
  const double sig = weighted / static_cast<double>(y.size());
  constexpr double a = 4.4, b = 10.1;
  const double mode = (a - 1) / (a + b - 2);
  const double pc = betapdf(sig / 64.29, a, b) / betapdf(mode, a, b);
  constexpr double mu = 115.94, sd_ = 27.99;
  const double pb = normpdf(y.mean(), mu, sd_) / normpdf(mu, mu, sd_);
  return pb * pc;
}

TmqiParts tmqi_parts(const Plane& f, const Plane& r, int* levels_used) {
  require_same(f, r, "tmqi");
  const int levels = ms_ssim_levels(std::min(f.rows(), f.cols()));
  if (levels == 0) throw ImageTooSmall("tmqi: images must be at least 11x11");
  if (levels_used) *levels_used = levels;
  double wsum = 0;
  for (int l = 0; l < levels; ++l) wsum += kMsSsimWeights[static_cast<std::size_t>(l)];
  Plane h = r, l_img = f;
  double s = 1, sf = 32;
  for (int l = 0; l < levels; ++l) {
    sf /= 2;
    const double local = std::max(tmqi_local(h, l_img, sf), 0.0);
    s *= std::pow(local, kMsSsimWeights[static_cast<std::size_t>(l)] / wsum);
    if (l + 1 < levels) {
      h = downsample2(h);
      l_img = downsample2(l_img);
    }
  }
  TmqiParts p;
  p.structural = s;
  p.naturalness = tmqi_naturalness(f);
  p.q = std::clamp(kTmqiA * std::pow(s, kTmqiAlpha) + (1 - kTmqiA) * std::pow(p.naturalness, kTmqiBeta), 0.0, 1.0);
  return p;
}

double tmqi(const Plane& f, const Plane& r) { return tmqi_parts(f, r).q; }

namespace {

constexpr double kSobelFloor = 1e-9;

struct EdgeMaps {
  Plane g;
  Plane a;
};

/// Sobel strength and orientation over a border-replicated plane.
EdgeMaps sobel_edges(const Plane& x) {
  Plane p(x.rows() + 2, x.cols() + 2);
  for (Index j = 0; j < p.cols(); ++j)
    for (Index i = 0; i < p.rows(); ++i)
      p(i, j) = x(std::clamp<Index>(i - 1, 0, x.rows() - 1), std::clamp<Index>(j - 1, 0, x.cols() - 1));
  Plane kx(3, 3), ky(3, 3);
  kx << -1, 0, 1, -2, 0, 2, -1, 0, 1;
  ky << -1, -2, -1, 0, 0, 0, 1, 2, 1;
  // Responses at rounding-noise level are flattened so the orientation is well defined.
  auto snap = [](double v) { return std::abs(v) < kSobelFloor ? 0.0 : v; };
  const Plane sx = correlate_valid(p, kx).unaryExpr(snap), sy = correlate_valid(p, ky).unaryExpr(snap);
  EdgeMaps e{(sx * sx + sy * sy).sqrt(), Plane(x.rows(), x.cols())};
  for (Index i = 0; i < sx.size(); ++i) e.a(i) = sx(i) == 0 ? std::numbers::pi / 2 : std::atan(sy(i) / sx(i));
  return e;
}

Plane edge_preservation(const EdgeMaps& s, const EdgeMaps& f) {
  constexpr double tg = 0.9994, kg = -15, dg = 0.5, ta = 0.9879, ka = -22, da = 0.8;
  Plane q(s.g.rows(), s.g.cols());
  for (Index i = 0; i < q.size(); ++i) {
    if (s.g(i) == 0 || f.g(i) == 0) {
      q(i) = 0;
      continue;
    }
    const double g = s.g(i) > f.g(i) ? f.g(i) / s.g(i) : s.g(i) / f.g(i);
    const double a = 1 - std::abs(s.a(i) - f.a(i)) / (std::numbers::pi / 2);
    q(i) = tg / (1 + std::exp(kg * (g - dg))) * ta / (1 + std::exp(ka * (a - da)));
  }
  return q;
}

}  // namespace

double qabf(const Plane& f, const Plane& under, const Plane& over) {
  require_same(f, under, "qabf");
  require_same(f, over, "qabf");
  if (std::min(f.rows(), f.cols()) < 3) throw ImageTooSmall("qabf: images must be at least 3x3");
  const auto ef = sobel_edges(f), eu = sobel_edges(under), eo = sobel_edges(over);
  const Plane qu = edge_preservation(eu, ef), qo = edge_preservation(eo, ef);
  const double den = (eu.g + eo.g).sum();
  if (den <= 0) return 0.0;
  return std::clamp((qu * eu.g + qo * eo.g).sum() / den, 0.0, 1.0);
}

// ---------------------------------------------------------------------------

std::map<std::string, double> evaluate_image(const Image& fused, const ExposurePair& pair,
                                             std::map<std::string, std::string>* errors, std::vector<std::string>* notes) {
  const Plane f = luminance255(fused), u = luminance255(pair.under), o = luminance255(pair.over);
  std::optional<Plane> r;
  if (pair.reference) r = luminance255(*pair.reference);
  std::map<std::string, double> out;
  auto run = [&](const std::string& name, auto&& fn) {
    try {
      out[name] = fn();
    } catch (const std::exception& e) {
      if (errors) (*errors)[name] = e.what();
    }
  };
  run("SD", [&] { return sd(f); });
  run("EN", [&] { return en(f); });
  run("VIF", [&] { return vif(f, u, o); });
  run("MEF_SSIM", [&] { return mef_ssim_metric(f, u, o); });
  run("QABF", [&] { return qabf(f, u, o); });
  if (r) {
    run("CC", [&] { return cc(f, *r); });
    run("MS_SSIM", [&] {
      int levels = 0;
      const double v = ms_ssim(f, *r, &levels);
      if (notes && levels < 5)
        notes->push_back(pair.id + ": MS-SSIM and TMQI use " + std::to_string(levels) + " scale(s)");
      return v;
    });
    run("TMQI", [&] { return tmqi(f, *r); });
  }
  return out;
}

MetricReport evaluate_report(const std::vector<FusedSample>& samples) {
  MetricReport rep;
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& s : samples) {
    std::map<std::string, std::string> errs;
    auto vals = evaluate_image(s.fused, s.pair, &errs, &rep.notes);
    if (!errs.empty()) rep.errors[s.id] = std::move(errs);
    for (const auto& [k, v] : vals) {
      acc[k].first += v;
      acc[k].second += 1;
    }
    rep.per_image[s.id] = std::move(vals);
  }
  for (const auto& [k, sc] : acc) rep.aggregate[k] = sc.first / sc.second;
  return rep;
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  j["per_image"] = r.per_image;
  j["aggregate"] = r.aggregate;
  j["errors"] = r.errors;
  j["notes"] = r.notes;
  return j;
}

std::string to_csv(const MetricReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "id";
  for (const auto& c : metric_columns()) os << ',' << c;
  os << '\n';
  auto row = [&](const std::string& id, const std::map<std::string, double>& vals) {
    os << id;
    for (const auto& c : metric_columns()) {
      os << ',';
      if (auto it = vals.find(c); it != vals.end()) os << it->second;
    }
    os << '\n';
  };
  for (const auto& [id, vals] : r.per_image) row(id, vals);
  if (!r.aggregate.empty()) row("mean", r.aggregate);
  return os.str();
}

void write_report(const MetricReport& r, const std::filesystem::path& json_path, const std::filesystem::path& csv_path) {
  {
    std::ofstream out(json_path);
    if (!out) throw std::runtime_error("cannot write " + json_path.string());
    out << to_json(r).dump(2) << '\n';
  }
  std::ofstream out(csv_path);
  if (!out) throw std::runtime_error("cannot write " + csv_path.string());
  out << to_csv(r);
}

}  // namespace hsds
