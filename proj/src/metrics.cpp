#include "npx/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <opencv2/imgproc.hpp>

#include <nlohmann/json.hpp>

#include "npx/artifacts.hpp"
#include "npx/errors.hpp"

using nlohmann::json;

namespace npx {

namespace {

void require_same(const ImageTensor& a, const ImageTensor& b, const char* op) {
  if (!a.same_layout(b)) {
    throw ValidationError(std::string(op) + ": images differ in shape, range or colorspace (" +
                          std::to_string(a.height()) + "x" + std::to_string(a.width()) + "x" +
                          std::to_string(a.channels()) + " vs " + std::to_string(b.height()) + "x" +
                          std::to_string(b.width()) + "x" + std::to_string(b.channels()) + ")");
  }
}

// Valid-mode separable filtering of a row-major h x w array by the 1-D kernel k.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int ow = w - n + 1, oh = h - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[i] * src[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

std::vector<double> gaussian_1d(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-((i - c) * (i - c)) / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

std::vector<double> as_double(const ImageTensor& img) {
  return std::vector<double>(img.pixels().begin(), img.pixels().end());
}

// Shape grid shared by both fits.
struct ShapeTable {
  std::vector<double> alpha;
  std::vector<double> ggd_ratio;   // G(1/a) G(3/a) / G(2/a)^2
  std::vector<double> aggd_ratio;  // G(2/a)^2 / (G(1/a) G(3/a))

  ShapeTable() {
    const int n = static_cast<int>(std::lround((kShapeMax - kShapeMin) / 0.001)) + 1;
    for (int i = 0; i < n; ++i) {
      const double a = kShapeMin + 0.001 * i;
      const double g1 = std::tgamma(1.0 / a), g2 = std::tgamma(2.0 / a), g3 = std::tgamma(3.0 / a);
      alpha.push_back(a);
      ggd_ratio.push_back(g1 * g3 / (g2 * g2));
      aggd_ratio.push_back(g2 * g2 / (g1 * g3));
    }
  }
};

const ShapeTable& shape_table() {
  static const ShapeTable table;
  return table;
}

void require_finite_sample(std::span<const double> x, const char* what) {
  if (x.empty()) throw DegenerateInputError(std::string(what) + ": empty sample");
  for (double v : x) {
    if (!std::isfinite(v)) throw DegenerateInputError(std::string(what) + ": non-finite sample");
  }
}

}  // namespace

double mse(const ImageTensor& a, const ImageTensor& b) {
  require_same(a, b, "mse");
  const auto pa = a.pixels(), pb = b.pixels();
  double acc = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const double d = static_cast<double>(pa[i]) - pb[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pa.size());
}

double rmse_from_mse(double mse_value) {
  if (!(mse_value >= 0.0)) throw ValidationError("mse must be >= 0");
  return std::sqrt(mse_value);
}

double rmse(const ImageTensor& a, const ImageTensor& b) { return rmse_from_mse(mse(a, b)); }

double psnr(double mse_value, double max_value) {
  if (!(mse_value >= 0.0)) throw ValidationError("psnr: mse must be >= 0, got " + std::to_string(mse_value));
  if (!(max_value > 0.0)) throw ValidationError("psnr: max_value must be > 0");
  if (mse_value == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_value * max_value / mse_value);
}

double mean_abs_error(const ImageTensor& a, const ImageTensor& b) {
  require_same(a, b, "mean_abs_error");
  const auto pa = a.pixels(), pb = b.pixels();
  double acc = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) acc += std::abs(static_cast<double>(pa[i]) - pb[i]);
  return acc / static_cast<double>(pa.size());
}

void SsimParams::validate() const {
  if (window < 1 || window % 2 == 0) throw ValidationError("SSIM window must be odd and positive");
  if (!(sigma > 0.0) || !(k1 > 0.0) || !(k2 > 0.0) || !(dynamic_range > 0.0)) {
    throw ValidationError("SSIM sigma, k1, k2 and dynamic range must be > 0");
  }
}

std::vector<double> ssim_window(const SsimParams& params) {
  params.validate();
  const auto k = gaussian_1d(params.window, params.sigma);
  std::vector<double> w(k.size() * k.size());
  for (std::size_t i = 0; i < k.size(); ++i)
    for (std::size_t j = 0; j < k.size(); ++j) w[i * k.size() + j] = k[i] * k[j];
  return w;
}

ImageTensor metric_gray(const ImageTensor& img, GrayMode mode) {
  if (img.colorspace() == ColorSpace::gray) return img;
  return mode == GrayMode::luminance ? to_gray(img) : to_gray_mean(img);
}

std::vector<double> ssim_map(const ImageTensor& x_in, const ImageTensor& y_in, const SsimParams& params) {
  params.validate();
  require_same(x_in, y_in, "ssim");
  const ImageTensor x = metric_gray(x_in), y = metric_gray(y_in);
  const int h = x.height(), w = x.width();
  if (h < params.window || w < params.window) {
    throw ValidationError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the " +
                          std::to_string(params.window) + "x" + std::to_string(params.window) + " window");
  }
  const auto k = gaussian_1d(params.window, params.sigma);
  const auto xv = as_double(x), yv = as_double(y);
  std::vector<double> xx(xv.size()), yy(xv.size()), xy(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    xx[i] = xv[i] * xv[i];
    yy[i] = yv[i] * yv[i];
    xy[i] = xv[i] * yv[i];
  }
  const auto mu_x = filter_valid(xv, h, w, k), mu_y = filter_valid(yv, h, w, k);
  const auto e_xx = filter_valid(xx, h, w, k), e_yy = filter_valid(yy, h, w, k), e_xy = filter_valid(xy, h, w, k);
  const double c1 = params.c1(), c2 = params.c2();
  std::vector<double> out(mu_x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double mx = mu_x[i], my = mu_y[i];
    const double vx = e_xx[i] - mx * mx, vy = e_yy[i] - my * my, cxy = e_xy[i] - mx * my;
    out[i] = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  }
  return out;
}

double ssim(const ImageTensor& x, const ImageTensor& y, const SsimParams& params) {
  const auto map = ssim_map(x, y, params);
  double acc = 0.0;
  for (double v : map) acc += v;
  return std::clamp(acc / static_cast<double>(map.size()), -1.0, 1.0);
}

// -- BRISQUE ------------------------------------------------------------------

GgdFit fit_ggd(std::span<const double> x) {
  require_finite_sample(x, "GGD fit");
  double sq = 0.0, ab = 0.0;
  for (double v : x) {
    sq += v * v;
    ab += std::abs(v);
  }
  const double sigma2 = sq / static_cast<double>(x.size());
  const double e = ab / static_cast<double>(x.size());
  if (!(e > 0.0)) throw DegenerateInputError("GGD fit: all-zero sample");
  const double rho = sigma2 / (e * e);
  const auto& t = shape_table();
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.alpha.size(); ++i) {
    if (std::abs(rho - t.ggd_ratio[i]) < std::abs(rho - t.ggd_ratio[best])) best = i;
  }
  return {t.alpha[best], sigma2};
}

AggdFit fit_aggd(std::span<const double> x) {
  require_finite_sample(x, "AGGD fit");
  double left_sq = 0.0, right_sq = 0.0, sq = 0.0, ab = 0.0;
  std::size_t n_left = 0, n_right = 0;
  for (double v : x) {
    if (v < 0.0) {
      left_sq += v * v;
      ++n_left;
    } else if (v > 0.0) {
      right_sq += v * v;
      ++n_right;
    }
    sq += v * v;
    ab += std::abs(v);
  }
  if (n_left == 0 || n_right == 0) throw DegenerateInputError("AGGD fit: sample lacks one sign");
  const double left_sigma = std::sqrt(left_sq / static_cast<double>(n_left));
  const double right_sigma = std::sqrt(right_sq / static_cast<double>(n_right));
  const double gamma_hat = left_sigma / right_sigma;
  const double mean_abs = ab / static_cast<double>(x.size());
  const double r_hat = mean_abs * mean_abs / (sq / static_cast<double>(x.size()));
  const double r_norm = r_hat * (gamma_hat * gamma_hat * gamma_hat + 1.0) * (gamma_hat + 1.0) /
                        ((gamma_hat * gamma_hat + 1.0) * (gamma_hat * gamma_hat + 1.0));
  const auto& t = shape_table();
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.alpha.size(); ++i) {
    const double d = t.aggd_ratio[i] - r_norm, d_best = t.aggd_ratio[best] - r_norm;
    if (d * d < d_best * d_best) best = i;
  }
  const double a = t.alpha[best];
  const double g1 = std::tgamma(1.0 / a), g2 = std::tgamma(2.0 / a), g3 = std::tgamma(3.0 / a);
  const double beta_l = left_sigma * std::sqrt(g1 / g3);
  const double beta_r = right_sigma * std::sqrt(g1 / g3);
  return {a, (beta_r - beta_l) * g2 / g1, left_sigma * left_sigma, right_sigma * right_sigma};
}

std::vector<double> mscn(const std::vector<double>& img, int height, int width) {
  cv::Mat src(height, width, CV_64F, const_cast<double*>(img.data()));
  cv::Mat mu, mu_sq, sq;
  cv::GaussianBlur(src, mu, cv::Size(7, 7), 7.0 / 6.0, 7.0 / 6.0, cv::BORDER_REFLECT_101);
  cv::GaussianBlur(src.mul(src), sq, cv::Size(7, 7), 7.0 / 6.0, 7.0 / 6.0, cv::BORDER_REFLECT_101);
  std::vector<double> out(img.size());
  double max_sigma = 0.0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double m = mu.at<double>(y, x);
      const double s = std::sqrt(std::abs(sq.at<double>(y, x) - m * m));
      max_sigma = std::max(max_sigma, s);
      out[static_cast<std::size_t>(y) * width + x] = (img[static_cast<std::size_t>(y) * width + x] - m) / (s + 1.0);
    }
  if (max_sigma < 1e-6) throw DegenerateInputError("BRISQUE: image has no local contrast (constant image)");
  return out;
}

namespace {

void scale_features(const std::vector<double>& img, int h, int w, double* out) {
  const auto m = mscn(img, h, w);
  const GgdFit g = fit_ggd(m);
  out[0] = g.alpha;
  out[1] = g.sigma2;
  const int offsets[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};  // H, V, D1, D2 as (dy, dx)
  for (int p = 0; p < 4; ++p) {
    const int dy = offsets[p][0], dx = offsets[p][1];
    std::vector<double> prod;
    prod.reserve(static_cast<std::size_t>(h) * w);
    for (int y = 0; y + dy < h; ++y)
      for (int x = std::max(0, -dx); x < w && x + dx < w; ++x) {
        prod.push_back(m[static_cast<std::size_t>(y) * w + x] * m[static_cast<std::size_t>(y + dy) * w + x + dx]);
      }
    const AggdFit a = fit_aggd(prod);
    out[2 + 4 * p] = a.alpha;
    out[3 + 4 * p] = a.mean;
    out[4 + 4 * p] = a.left_sigma2;
    out[5 + 4 * p] = a.right_sigma2;
  }
}

}  // namespace

BrisqueFeatures brisque_features(const ImageTensor& gray_in) {
  if (gray_in.range() != ValueRange::byte) throw ValidationError("BRISQUE expects a byte-range image");
  const ImageTensor gray = metric_gray(gray_in);
  const int h = gray.height(), w = gray.width();
  if (h < kBrisqueMinSide || w < kBrisqueMinSide) {
    throw ValidationError("BRISQUE needs at least " + std::to_string(kBrisqueMinSide) + "x" +
                          std::to_string(kBrisqueMinSide) + " pixels");
  }
  BrisqueFeatures f{};
  const auto img = as_double(gray);
  scale_features(img, h, w, f.data());

  const int h2 = h / 2, w2 = w / 2;
  std::vector<double> half(static_cast<std::size_t>(h2) * w2);
  for (int y = 0; y < h2; ++y)
    for (int x = 0; x < w2; ++x) {
      const std::size_t r0 = static_cast<std::size_t>(2 * y) * w, r1 = r0 + w;
      half[static_cast<std::size_t>(y) * w2 + x] =
          0.25 * (img[r0 + 2 * x] + img[r0 + 2 * x + 1] + img[r1 + 2 * x] + img[r1 + 2 * x + 1]);
    }
  scale_features(half, h2, w2, f.data() + 18);
  return f;
}

double BrisqueModel::score(const BrisqueFeatures& f) const {
  double s = bias;
  for (int i = 0; i < kBrisqueFeatures; ++i) s += weights[i] * (f[i] - feat_min[i]) / (feat_max[i] - feat_min[i]);
  return s;
}

BrisqueModel brisque_model_from_json_text(const std::string& text, const std::string& origin) {
  const json j = parse_json_text(text, origin);
  if (!j.is_object()) throw ParseError(origin + ": BRISQUE model must be a JSON object");
  BrisqueModel m;
  auto read_vec = [&](const char* key, std::array<double, kBrisqueFeatures>& out) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != kBrisqueFeatures) {
      throw ParseError(origin + ": '" + key + "' must be an array of " + std::to_string(kBrisqueFeatures) +
                       " numbers");
    }
    for (int i = 0; i < kBrisqueFeatures; ++i) {
      if (!j[key][i].is_number()) throw ParseError(origin + ": '" + key + "[" + std::to_string(i) + "]' is not a number");
      out[i] = j[key][i].get<double>();
    }
  };
  read_vec("weights", m.weights);
  read_vec("feat_min", m.feat_min);
  read_vec("feat_max", m.feat_max);
  if (!j.contains("bias") || !j["bias"].is_number()) throw ParseError(origin + ": 'bias' must be a number");
  m.bias = j["bias"].get<double>();
  for (int i = 0; i < kBrisqueFeatures; ++i) {
    if (!(m.feat_max[i] > m.feat_min[i])) {
      throw ParseError(origin + ": feat_max[" + std::to_string(i) + "] must exceed feat_min[" + std::to_string(i) + "]");
    }
  }
  return m;
}

BrisqueModel load_brisque_model(const std::filesystem::path& path) {
  return brisque_model_from_json_text(read_file(path), path.string());
}

std::optional<double> brisque_score(const BrisqueFeatures& f, const std::optional<BrisqueModel>& model) {
  if (!model) return std::nullopt;
  return model->score(f);
}

}  // namespace npx
