#include "npx/image.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "npx/errors.hpp"

namespace npx {

namespace {

const char* range_name(ValueRange r) { return r == ValueRange::byte ? "byte" : "unit_signed"; }

}  // namespace

float range_min(ValueRange r) { return r == ValueRange::byte ? 0.0F : -1.0F; }
float range_max(ValueRange r) { return r == ValueRange::byte ? 255.0F : 1.0F; }

ImageTensor::ImageTensor(int height, int width, ColorSpace colorspace, ValueRange range, std::vector<float> pixels)
    : height_(height), width_(width), colorspace_(colorspace), range_(range), pixels_(std::move(pixels)) {
  if (height_ < kMinImageSide || width_ < kMinImageSide) {
    throw ValidationError("image " + std::to_string(height_) + "x" + std::to_string(width_) + " is below the " +
                          std::to_string(kMinImageSide) + "x" + std::to_string(kMinImageSide) + " minimum");
  }
  const std::size_t expected = static_cast<std::size_t>(height_) * width_ * channels();
  if (pixels_.size() != expected) {
    throw ValidationError("image pixel count " + std::to_string(pixels_.size()) + " != " + std::to_string(expected));
  }
  const float lo = range_min(range_), hi = range_max(range_);
  for (float v : pixels_) {
    if (!(v >= lo && v <= hi)) {
      throw ValidationError("pixel value " + std::to_string(v) + " outside the " + range_name(range_) + " range");
    }
  }
}

ImageTensor ImageTensor::filled(int height, int width, ColorSpace colorspace, ValueRange range, float value) {
  const int c = colorspace == ColorSpace::gray ? 1 : 3;
  return ImageTensor(height, width, colorspace, range,
                     std::vector<float>(static_cast<std::size_t>(height) * width * c, value));
}

void ImageTensor::set(int y, int x, int c, float v) {
  if (!(v >= range_min(range_) && v <= range_max(range_))) {
    throw ValidationError("pixel value " + std::to_string(v) + " outside the " + range_name(range_) + " range");
  }
  pixels_.at((static_cast<std::size_t>(y) * width_ + x) * channels() + c) = v;
}

bool ImageTensor::same_layout(const ImageTensor& other) const {
  return height_ == other.height_ && width_ == other.width_ && colorspace_ == other.colorspace_ &&
         range_ == other.range_;
}

ImageTensor to_unit(const ImageTensor& img) {
  if (img.range() == ValueRange::unit_signed) return img;
  std::vector<float> px(img.pixels().size());
  std::transform(img.pixels().begin(), img.pixels().end(), px.begin(),
                 [](float v) { return std::clamp(v / 127.5F - 1.0F, -1.0F, 1.0F); });
  return ImageTensor(img.height(), img.width(), img.colorspace(), ValueRange::unit_signed, std::move(px));
}

ImageTensor to_byte(const ImageTensor& img) {
  if (img.range() == ValueRange::byte) return img;
  std::vector<float> px(img.pixels().size());
  std::transform(img.pixels().begin(), img.pixels().end(), px.begin(), [](float v) {
    return std::clamp(std::round((static_cast<double>(v) + 1.0) * 127.5), 0.0, 255.0);
  });
  return ImageTensor(img.height(), img.width(), img.colorspace(), ValueRange::byte, std::move(px));
}

ImageTensor to_gray(const ImageTensor& img) {
  if (img.colorspace() == ColorSpace::gray) return img;
  const auto src = img.pixels();
  std::vector<float> px(static_cast<std::size_t>(img.height()) * img.width());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double y = 0.299 * src[3 * i] + 0.587 * src[3 * i + 1] + 0.114 * src[3 * i + 2];
    px[i] = static_cast<float>(std::clamp<double>(y, range_min(img.range()), range_max(img.range())));
  }
  return ImageTensor(img.height(), img.width(), ColorSpace::gray, img.range(), std::move(px));
}

ImageTensor to_gray_mean(const ImageTensor& img) {
  if (img.colorspace() == ColorSpace::gray) return img;
  const auto src = img.pixels();
  std::vector<float> px(static_cast<std::size_t>(img.height()) * img.width());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<float>((static_cast<double>(src[3 * i]) + src[3 * i + 1] + src[3 * i + 2]) / 3.0);
  }
  return ImageTensor(img.height(), img.width(), ColorSpace::gray, img.range(), std::move(px));
}

ImageTensor gray_to_rgb(const ImageTensor& img) {
  if (img.colorspace() == ColorSpace::rgb) return img;
  std::vector<float> px;
  px.reserve(img.pixels().size() * 3);
  for (float v : img.pixels()) px.insert(px.end(), {v, v, v});
  return ImageTensor(img.height(), img.width(), ColorSpace::rgb, img.range(), std::move(px));
}

ImageTensor load_image(const std::filesystem::path& path, ColorSpace colorspace,
                       std::optional<std::pair<int, int>> size) {
  if (!std::filesystem::exists(path)) throw NotFoundError("image not found: " + path.string());
  cv::Mat mat = cv::imread(path.string(), colorspace == ColorSpace::gray ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (mat.empty()) throw IoError("cannot decode image: " + path.string());
  if (size && (mat.rows != size->first || mat.cols != size->second)) {
    const bool shrinking = mat.rows > size->first || mat.cols > size->second;
    cv::resize(mat, mat, cv::Size(size->second, size->first), 0, 0, shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
  }
  if (colorspace == ColorSpace::rgb) cv::cvtColor(mat, mat, cv::COLOR_BGR2RGB);
  const int c = colorspace == ColorSpace::gray ? 1 : 3;
  std::vector<float> px(static_cast<std::size_t>(mat.rows) * mat.cols * c);
  for (int y = 0; y < mat.rows; ++y) {
    const auto* row = mat.ptr<std::uint8_t>(y);
    for (int i = 0; i < mat.cols * c; ++i) px[static_cast<std::size_t>(y) * mat.cols * c + i] = row[i];
  }
  try {
    return ImageTensor(mat.rows, mat.cols, colorspace, ValueRange::byte, std::move(px));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void save_image(const ImageTensor& img, const std::filesystem::path& path) {
  const ImageTensor b = to_byte(img);
  const int c = b.channels();
  cv::Mat mat(b.height(), b.width(), c == 1 ? CV_8UC1 : CV_8UC3);
  for (int y = 0; y < b.height(); ++y) {
    auto* row = mat.ptr<std::uint8_t>(y);
    for (int i = 0; i < b.width() * c; ++i) {
      row[i] = static_cast<std::uint8_t>(b.pixels()[static_cast<std::size_t>(y) * b.width() * c + i]);
    }
  }
  if (c == 3) cv::cvtColor(mat, mat, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) throw IoError("cannot write image: " + path.string());
}

Tensor stack_batch(std::span<const ImageTensor* const> images) {
  if (images.empty()) throw ValidationError("cannot stack an empty batch");
  const ImageTensor& first = *images.front();
  const int c = first.channels(), h = first.height(), w = first.width();
  Tensor out({static_cast<int>(images.size()), c, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const ImageTensor& img = *images[n];
    if (!img.same_layout(first)) throw ValidationError("batch images differ in layout");
    if (img.range() != ValueRange::unit_signed) throw ValidationError("batch images must be unit_signed");
    const auto px = img.pixels();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) {
          out.at(static_cast<int>(n), ch, y, x) = px[(static_cast<std::size_t>(y) * w + x) * c + ch];
        }
  }
  return out;
}

Tensor stack_batch(std::span<const ImageTensor> images) {
  std::vector<const ImageTensor*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& img : images) ptrs.push_back(&img);
  return stack_batch(std::span<const ImageTensor* const>(ptrs));
}

ImageTensor image_from_batch(const Tensor& batch, int n) {
  if (batch.rank() != 4 || (batch.dim(1) != 1 && batch.dim(1) != 3)) {
    throw ValidationError("image_from_batch: expected (N,1|3,H,W), got " + shape_str(batch.shape));
  }
  const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  std::vector<float> px(static_cast<std::size_t>(h) * w * c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        px[(static_cast<std::size_t>(y) * w + x) * c + ch] =
            static_cast<float>(std::clamp(batch.at(n, ch, y, x), -1.0, 1.0));
      }
  return ImageTensor(h, w, c == 1 ? ColorSpace::gray : ColorSpace::rgb, ValueRange::unit_signed, std::move(px));
}

bool is_image_file(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

}  // namespace npx
