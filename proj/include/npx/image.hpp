#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "npx/tensor.hpp"

namespace npx {

enum class ValueRange { unit_signed, byte };
enum class ColorSpace { gray, rgb };

inline constexpr int kMinImageSide = 16;

/// H x W x C pixel array (interleaved, RGB channel order). Construction
/// validates the declared range and the minimum size.
class ImageTensor {
 public:
  ImageTensor(int height, int width, ColorSpace colorspace, ValueRange range, std::vector<float> pixels);

  static ImageTensor filled(int height, int width, ColorSpace colorspace, ValueRange range, float value);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return colorspace_ == ColorSpace::gray ? 1 : 3; }
  ColorSpace colorspace() const { return colorspace_; }
  ValueRange range() const { return range_; }

  std::span<const float> pixels() const { return pixels_; }
  float at(int y, int x, int c = 0) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels() + c];
  }
  /// Range-checked write.
  void set(int y, int x, int c, float v);

  bool same_layout(const ImageTensor& other) const;
  bool operator==(const ImageTensor& other) const = default;

 private:
  int height_;
  int width_;
  ColorSpace colorspace_;
  ValueRange range_;
  std::vector<float> pixels_;
};

float range_min(ValueRange r);
float range_max(ValueRange r);

/// byte [0,255] -> unit_signed [-1,1], v/127.5 - 1.
ImageTensor to_unit(const ImageTensor& img);

/// unit_signed -> byte, (v+1)*127.5 rounded to the nearest integer and clipped.
ImageTensor to_byte(const ImageTensor& img);

/// ITU-R BT.601 luminance; gray input is returned unchanged.
ImageTensor to_gray(const ImageTensor& img);

/// Per-pixel mean of the color channels.
ImageTensor to_gray_mean(const ImageTensor& img);

ImageTensor gray_to_rgb(const ImageTensor& img);

/// Decodes an image file as byte range. Resized (area/linear) when size is given.
ImageTensor load_image(const std::filesystem::path& path, ColorSpace colorspace,
                       std::optional<std::pair<int, int>> size = std::nullopt);

/// Writes a byte-range image (PNG by extension).
void save_image(const ImageTensor& img, const std::filesystem::path& path);

/// Stacks unit_signed images into an (N, C, H, W) tensor.
Tensor stack_batch(std::span<const ImageTensor> images);
Tensor stack_batch(std::span<const ImageTensor* const> images);

/// Image n of an (N, C, H, W) tensor as unit_signed; values clamped to [-1,1].
ImageTensor image_from_batch(const Tensor& batch, int n);

bool is_image_file(const std::filesystem::path& path);

}  // namespace npx
