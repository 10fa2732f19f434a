#pragma once

// Fusion quality metrics. Every metric works on luminance rescaled to [0, 255].

#include "hsds/data.hpp"
#include "hsds/image.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsds {

class ConstantImage : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Plane = Eigen::ArrayXXd;

Plane luminance255(const Image& img);

/// 2-D correlation over valid positions.
Plane correlate_valid(const Plane& x, const Plane& kernel);
/// Normalized Gaussian kernel of the given odd size.
Plane gaussian_kernel(Eigen::Index size, double sigma);
/// 2x2 mean then stride-2 subsampling; odd trailing rows/cols are mirrored.
Plane downsample2(const Plane& x);

double sd(const Plane& y);
double en(const Plane& y);
/// Throws ConstantImage when either input has zero variance.
double cc(const Plane& f, const Plane& r);

inline constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Scales usable for a min dimension: the coarsest scale must still fit an 11x11 window.
int ms_ssim_levels(Eigen::Index min_dim, int max_levels = 5);
/// MS-SSIM with the canonical weights; fewer scales (weights renormalized) on small images.
double ms_ssim(const Plane& f, const Plane& r, int* levels_used = nullptr);

/// MEF-SSIM similarity on luminance (single scale, 8x8 window).
double mef_ssim_metric(const Plane& f, const Plane& under, const Plane& over);

/// Pixel-domain VIF of dist against ref (4 scales, noise variance 2).
double vifp(const Plane& ref, const Plane& dist);
/// Fusion VIF: vifp(under, f) + vifp(over, f).
double vif(const Plane& f, const Plane& under, const Plane& over);

struct TmqiParts {
  double q = 0;
  double structural = 0;
  double naturalness = 0;
};
TmqiParts tmqi_parts(const Plane& f, const Plane& r, int* levels_used = nullptr);
double tmqi(const Plane& f, const Plane& r);
double tmqi_naturalness(const Plane& y);

double qabf(const Plane& f, const Plane& under, const Plane& over);

// ---------------------------------------------------------------------------
// Reports.

inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"SD", "VIF", "CC", "TMQI", "MS_SSIM", "MEF_SSIM", "EN", "QABF"};
  return cols;
}
inline bool is_reference_metric(const std::string& m) { return m == "CC" || m == "TMQI" || m == "MS_SSIM"; }

struct FusedSample {
  std::string id;
  Image fused;
  ExposurePair pair;
};

struct MetricReport {
  std::map<std::string, std::map<std::string, double>> per_image;
  std::map<std::string, double> aggregate;
  /// id -> metric -> error message, for metrics that failed on that image.
  std::map<std::string, std::map<std::string, std::string>> errors;
  /// Informational notes such as reduced scale counts.
  std::vector<std::string> notes;
};

std::map<std::string, double> evaluate_image(const Image& fused, const ExposurePair& pair,
                                             std::map<std::string, std::string>* errors = nullptr,
                                             std::vector<std::string>* notes = nullptr);
MetricReport evaluate_report(const std::vector<FusedSample>& samples);

nlohmann::json to_json(const MetricReport& r);
std::string to_csv(const MetricReport& r);
void write_report(const MetricReport& r, const std::filesystem::path& json_path, const std::filesystem::path& csv_path);

}  // namespace hsds
