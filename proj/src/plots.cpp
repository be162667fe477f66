#include "npx/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "npx/errors.hpp"

namespace npx {

namespace {

constexpr int kGutter = 8;
constexpr int kCaption = 22;

cv::Mat to_bgr_mat(const ImageTensor& img) {
  const ImageTensor b = img.range() == ValueRange::byte ? img : to_byte(img);
  cv::Mat out(b.height(), b.width(), CV_8UC3);
  for (int y = 0; y < b.height(); ++y) {
    auto* row = out.ptr<cv::Vec3b>(y);
    for (int x = 0; x < b.width(); ++x) {
      if (b.channels() == 1) {
        const auto v = static_cast<uchar>(std::lround(b.at(y, x)));
        row[x] = cv::Vec3b(v, v, v);
      } else {
        row[x] = cv::Vec3b(static_cast<uchar>(std::lround(b.at(y, x, 2))), static_cast<uchar>(std::lround(b.at(y, x, 1))),
                           static_cast<uchar>(std::lround(b.at(y, x, 0))));
      }
    }
  }
  return out;
}

void write_png(const cv::Mat& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write image " + path.string());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace

void plot_triplet_panel(const ImageTensor& ground, const ImageTensor& noisy, const ImageTensor& generated,
                        const std::filesystem::path& out_path) {
  if (ground.height() != noisy.height() || ground.width() != noisy.width() || ground.height() != generated.height() ||
      ground.width() != generated.width()) {
    throw ValidationError("triplet panel images must share one size");
  }
  const int h = ground.height(), w = ground.width();
  cv::Mat panel(h + kCaption + 2 * kGutter, 3 * w + 4 * kGutter, CV_8UC3, cv::Scalar(255, 255, 255));
  const ImageTensor* images[3] = {&ground, &noisy, &generated};
  const char* captions[3] = {"ground", "noisy", "generated"};
  const double scale = std::clamp(w / 160.0, 0.3, 0.8);
  for (int i = 0; i < 3; ++i) {
    const int x0 = kGutter + i * (w + kGutter);
    to_bgr_mat(*images[i]).copyTo(panel(cv::Rect(x0, kGutter, w, h)));
    cv::putText(panel, captions[i], cv::Point(x0, kGutter + h + kCaption - 6), cv::FONT_HERSHEY_SIMPLEX, scale,
                cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  }
  write_png(panel, out_path);
}

LossPlotInfo plot_loss_curves(std::span<const HistoryRecord> history, const std::filesystem::path& out_path) {
  if (history.empty()) throw ValidationError("cannot plot an empty loss history");
  const int width = 800, height = 480;
  const int left = 70, right = 20, top = 30, bottom = 60;
  const int pw = width - left - right, ph = height - top - bottom;

  const std::int64_t x_min = history.front().step, x_max = history.back().step;
  double y_max = 0.0;
  for (const auto& r : history) y_max = std::max({y_max, r.loss_D, r.loss_G});
  if (!(y_max > 0.0) || !std::isfinite(y_max)) y_max = 1.0;
  const double x_span = std::max<std::int64_t>(1, x_max - x_min);

  auto px = [&](std::int64_t step) { return left + static_cast<int>(std::lround((step - x_min) / x_span * pw)); };
  auto py = [&](double v) { return top + ph - static_cast<int>(std::lround(std::clamp(v / y_max, 0.0, 1.0) * ph)); };

  cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  const cv::Scalar black(0, 0, 0), grid(225, 225, 225);
  for (int t = 0; t <= 4; ++t) {
    const int y = top + ph - t * ph / 4;
    cv::line(img, {left, y}, {left + pw, y}, grid, 1);
    cv::putText(img, fmt(y_max * t / 4), {8, y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, black, 1, cv::LINE_AA);
    const std::int64_t step = x_min + static_cast<std::int64_t>(std::llround(x_span * t / 4));
    const int x = px(std::min(step, x_max));
    cv::line(img, {x, top + ph}, {x, top + ph + 5}, black, 1);
    cv::putText(img, std::to_string(std::min(step, x_max)), {x - 10, top + ph + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                black, 1, cv::LINE_AA);
  }
  cv::line(img, {left, top}, {left, top + ph}, black, 1);
  cv::line(img, {left, top + ph}, {left + pw, top + ph}, black, 1);
  cv::putText(img, "step", {left + pw / 2 - 15, height - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.5, black, 1, cv::LINE_AA);
  cv::putText(img, "loss", {8, top - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.5, black, 1, cv::LINE_AA);

  const cv::Scalar colors[2] = {cv::Scalar(180, 80, 20), cv::Scalar(30, 30, 200)};
  const char* names[2] = {"loss_D", "loss_G"};
  for (int s = 0; s < 2; ++s) {
    std::vector<cv::Point> pts;
    for (const auto& r : history) pts.emplace_back(px(r.step), py(s == 0 ? r.loss_D : r.loss_G));
    if (pts.size() == 1) {
      cv::circle(img, pts.front(), 3, colors[s], cv::FILLED, cv::LINE_AA);
    } else {
      cv::polylines(img, pts, false, colors[s], 1, cv::LINE_AA);
    }
    const int ly = top + 10 + 18 * s;
    cv::line(img, {left + pw - 110, ly}, {left + pw - 85, ly}, colors[s], 2);
    cv::putText(img, names[s], {left + pw - 80, ly + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.45, black, 1, cv::LINE_AA);
  }
  write_png(img, out_path);
  return LossPlotInfo{width, height, x_min, x_max, y_max, 2};
}

}  // namespace npx
