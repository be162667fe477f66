#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "npx/dataset.hpp"
#include "npx/image.hpp"
#include "npx/rng.hpp"

namespace npx {

struct IntRange {
  int lo = 0;
  int hi = 0;
  bool operator==(const IntRange&) const = default;
};

/// Handwriting overlay and noise parameters. Colors are byte RGB intervals.
struct DegradationConfig {
  IntRange stroke_count_range{2, 5};
  IntRange stroke_thickness_range{1, 2};
  std::array<IntRange, 3> stroke_color_range{IntRange{20, 90}, IntRange{10, 60}, IntRange{0, 40}};
  double gaussian_sigma = 10.0;
  double background_texture_strength = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const DegradationConfig&) const = default;
};

/// Reads a config document holding exactly the DegradationConfig keys.
DegradationConfig degradation_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DegradationConfig& cfg);

struct Point2 {
  double x;
  double y;
};

struct Stroke {
  std::vector<Point2> control_points;
  std::vector<Point2> polyline;  // densely sampled spline through the control points
  int thickness;
  std::array<int, 3> color;
};

struct HandwritingOverlay {
  ImageTensor overlay;             // stroke colors on stroked pixels, 0 elsewhere
  std::vector<std::uint8_t> mask;  // row-major, 1 = stroked
  std::vector<Stroke> strokes;
};

/// Random cursive-like strokes: Catmull-Rom curves through jittered control
/// points advancing roughly horizontally.
HandwritingOverlay synthesize_handwriting(int height, int width, ColorSpace colorspace, const DegradationConfig& cfg,
                                          Rng& rng);

/// Pixel mask of one stroke rendered on its own.
std::vector<std::uint8_t> render_stroke_mask(int height, int width, const Stroke& stroke);

/// Opaque ink: overlay color where the mask is set, clean elsewhere.
ImageTensor composite(const ImageTensor& clean, const HandwritingOverlay& overlay);

/// clip(composite(clean, handwriting) + N(0, sigma^2), 0, 255). Byte range in and out.
ImageTensor degrade_image(const ImageTensor& clean, const DegradationConfig& cfg, Rng& rng);

// -- synthetic watermark corpus ---------------------------------------------

struct WatermarkPart {
  enum class Kind { circle, line, arc, polygon, cross };
  Kind kind;
  std::vector<Point2> points;  // normalized [0,1] coordinates
  double radius = 0.0;
  double start_angle = 0.0;
  double end_angle = 0.0;
};

struct WatermarkDesign {
  std::vector<WatermarkPart> parts;
};

WatermarkDesign random_watermark_design(std::uint64_t seed);

/// One instance of a design on paper: small random shift, rotation and scale,
/// warm paper tone with optional low-frequency texture.
ImageTensor render_watermark(const WatermarkDesign& design, int size, ColorSpace colorspace, double texture_strength,
                             Rng& rng);

struct SyntheticCorpusSpec {
  int classes = 5;
  int per_class = 8;
  int size = 64;
  std::uint64_t seed = 0;
  DegradationConfig degradation;
  ColorSpace colorspace = ColorSpace::rgb;
};

/// clean and noisy hold the same samples in the same order.
struct SyntheticCorpus {
  LabeledImageSet clean;
  LabeledImageSet noisy;

  std::vector<GanPair> pairs() const;
};

SyntheticCorpus make_synthetic_corpus(const SyntheticCorpusSpec& spec);

/// Writes out/clean/<class>/<image>.png and out/noisy/<class>/<image>.png.
std::vector<std::filesystem::path> write_synthetic_corpus(const SyntheticCorpus& corpus,
                                                          const std::filesystem::path& out_root);

}  // namespace npx
