#pragma once

#include <array>
#include <filesystem>
#include <optional>

#include "npx/image.hpp"

namespace npx {

/// Mean squared per-pixel difference over every channel.
double mse(const ImageTensor& a, const ImageTensor& b);
double rmse(const ImageTensor& a, const ImageTensor& b);
double rmse_from_mse(double mse_value);

/// 10 log10(max^2 / mse); +infinity when mse == 0.
double psnr(double mse_value, double max_value = 255.0);

/// Mean absolute per-pixel difference.
double mean_abs_error(const ImageTensor& a, const ImageTensor& b);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 255.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
  void validate() const;
};

/// Normalized window x window Gaussian weights, row-major.
std::vector<double> ssim_window(const SsimParams& params);

/// Mean SSIM over all fully-contained windows of two single-channel images.
double ssim(const ImageTensor& x, const ImageTensor& y, const SsimParams& params = {});

/// Per-window SSIM values, (h - window + 1) x (w - window + 1), row-major.
std::vector<double> ssim_map(const ImageTensor& x, const ImageTensor& y, const SsimParams& params = {});

enum class GrayMode { luminance, rgb_mean };

/// Single-channel view for metrics: gray passes through, color is reduced.
ImageTensor metric_gray(const ImageTensor& img, GrayMode mode = GrayMode::luminance);

// -- BRISQUE ------------------------------------------------------------------

inline constexpr int kBrisqueFeatures = 36;
inline constexpr double kShapeMin = 0.2;
inline constexpr double kShapeMax = 10.0;
inline constexpr int kBrisqueMinSide = 32;

/// Per scale: [ggd_alpha, ggd_sigma2] then 4 values per product in the order
/// H, V, D1, D2: [alpha, mean, left_sigma2, right_sigma2]. Scale 1 then scale 2.
using BrisqueFeatures = std::array<double, kBrisqueFeatures>;

struct GgdFit {
  double alpha;
  double sigma2;
};

struct AggdFit {
  double alpha;
  double mean;
  double left_sigma2;
  double right_sigma2;
};

/// Moment-matching fits over the shape grid [0.2, 10] step 0.001.
GgdFit fit_ggd(std::span<const double> x);
AggdFit fit_aggd(std::span<const double> x);

/// Mean-subtracted contrast-normalized coefficients, (I - mu) / (sigma + 1),
/// from a 7x7 Gaussian (sigma 7/6) with reflected borders. Row-major h x w.
std::vector<double> mscn(const std::vector<double>& img, int height, int width);

/// 36 features of a byte-range single-channel image.
BrisqueFeatures brisque_features(const ImageTensor& gray);

/// Linear model over min-max normalized features.
struct BrisqueModel {
  std::array<double, kBrisqueFeatures> weights{};
  double bias = 0.0;
  std::array<double, kBrisqueFeatures> feat_min{};
  std::array<double, kBrisqueFeatures> feat_max{};

  double score(const BrisqueFeatures& f) const;
};

BrisqueModel load_brisque_model(const std::filesystem::path& path);
BrisqueModel brisque_model_from_json_text(const std::string& text, const std::string& origin);

/// Score when a model is supplied, otherwise nothing.
std::optional<double> brisque_score(const BrisqueFeatures& f, const std::optional<BrisqueModel>& model);

}  // namespace npx
