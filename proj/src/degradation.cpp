#include "npx/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <opencv2/imgproc.hpp>
#include <set>

#include "npx/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace npx {

namespace {

void check_range(const IntRange& r, const char* name, int min_lo, int max_hi) {
  if (r.lo > r.hi) throw ValidationError(std::string(name) + ": lower bound exceeds upper bound");
  if (r.lo < min_lo || r.hi > max_hi) {
    throw ValidationError(std::string(name) + ": bounds must lie in [" + std::to_string(min_lo) + ", " +
                          std::to_string(max_hi) + "]");
  }
}

int uniform_int(Rng& rng, IntRange r) { return std::uniform_int_distribution<int>(r.lo, r.hi)(rng); }

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

IntRange range_from_json(const json& j, const char* key) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer()) {
    throw ValidationError(std::string("degradation config: '") + key + "' must be [lo, hi] integers");
  }
  return IntRange{j[0].get<int>(), j[1].get<int>()};
}

std::vector<Point2> catmull_rom(const std::vector<Point2>& pts, int samples_per_segment) {
  std::vector<Point2> out;
  if (pts.size() < 2) return pts;
  auto at = [&](std::ptrdiff_t i) {
    return pts[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(pts.size()) - 1))];
  };
  for (std::ptrdiff_t i = 0; i + 1 < static_cast<std::ptrdiff_t>(pts.size()); ++i) {
    const Point2 p0 = at(i - 1), p1 = at(i), p2 = at(i + 1), p3 = at(i + 2);
    for (int s = 0; s < samples_per_segment; ++s) {
      const double t = static_cast<double>(s) / samples_per_segment;
      const double t2 = t * t, t3 = t2 * t;
      auto blend = [&](double a, double b, double c, double d) {
        return 0.5 * ((2 * b) + (-a + c) * t + (2 * a - 5 * b + 4 * c - d) * t2 + (-a + 3 * b - 3 * c + d) * t3);
      };
      out.push_back({blend(p0.x, p1.x, p2.x, p3.x), blend(p0.y, p1.y, p2.y, p3.y)});
    }
  }
  out.push_back(pts.back());
  return out;
}

std::vector<cv::Point> to_cv(const std::vector<Point2>& pts) {
  std::vector<cv::Point> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.emplace_back(static_cast<int>(std::lround(p.x)), static_cast<int>(std::lround(p.y)));
  return out;
}

float luminance(const std::array<int, 3>& c) {
  return static_cast<float>(std::round(0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]));
}

ImageTensor mat_to_image(const cv::Mat& mat, ColorSpace colorspace) {
  const int c = colorspace == ColorSpace::gray ? 1 : 3;
  cv::Mat src = mat;
  if (colorspace == ColorSpace::gray && mat.channels() == 3) {
    // RGB order: weights applied explicitly to avoid OpenCV's BGR assumption
    std::vector<float> px(static_cast<std::size_t>(mat.rows) * mat.cols);
    for (int y = 0; y < mat.rows; ++y)
      for (int x = 0; x < mat.cols; ++x) {
        const auto& v = mat.at<cv::Vec3b>(y, x);
        px[static_cast<std::size_t>(y) * mat.cols + x] =
            static_cast<float>(std::round(0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2]));
      }
    return ImageTensor(mat.rows, mat.cols, colorspace, ValueRange::byte, std::move(px));
  }
  std::vector<float> px(static_cast<std::size_t>(src.rows) * src.cols * c);
  for (int y = 0; y < src.rows; ++y) {
    const auto* row = src.ptr<std::uint8_t>(y);
    for (int i = 0; i < src.cols * c; ++i) px[static_cast<std::size_t>(y) * src.cols * c + i] = row[i];
  }
  return ImageTensor(src.rows, src.cols, colorspace, ValueRange::byte, std::move(px));
}

}  // namespace

void DegradationConfig::validate() const {
  check_range(stroke_count_range, "stroke_count_range", 0, 1000);
  check_range(stroke_thickness_range, "stroke_thickness_range", 1, 64);
  for (const auto& c : stroke_color_range) check_range(c, "stroke_color_range", 0, 255);
  if (!(gaussian_sigma >= 0.0) || !std::isfinite(gaussian_sigma)) {
    throw ValidationError("gaussian_sigma must be a finite value >= 0");
  }
  if (!(background_texture_strength >= 0.0 && background_texture_strength <= 1.0)) {
    throw ValidationError("background_texture_strength must lie in [0, 1]");
  }
}

DegradationConfig degradation_config_from_json(const json& j) {
  static const std::set<std::string> known = {"stroke_count_range", "stroke_thickness_range",
                                              "stroke_color_range", "gaussian_sigma",
                                              "background_texture_strength", "seed"};
  if (!j.is_object()) throw ValidationError("degradation config must be a JSON object");
  std::string unknown, missing;
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
  for (const auto& key : known)
    if (!j.contains(key)) missing += (missing.empty() ? "" : ", ") + key;
  if (!unknown.empty()) throw ValidationError("degradation config: unknown keys: " + unknown);
  if (!missing.empty()) throw ValidationError("degradation config: missing keys: " + missing);

  DegradationConfig cfg;
  cfg.stroke_count_range = range_from_json(j["stroke_count_range"], "stroke_count_range");
  cfg.stroke_thickness_range = range_from_json(j["stroke_thickness_range"], "stroke_thickness_range");
  const json& colors = j["stroke_color_range"];
  if (!colors.is_array() || colors.size() != 3) {
    throw ValidationError("degradation config: 'stroke_color_range' must hold 3 [lo, hi] intervals");
  }
  for (std::size_t c = 0; c < 3; ++c) cfg.stroke_color_range[c] = range_from_json(colors[c], "stroke_color_range");
  if (!j["gaussian_sigma"].is_number()) throw ValidationError("degradation config: 'gaussian_sigma' must be a number");
  if (!j["background_texture_strength"].is_number()) {
    throw ValidationError("degradation config: 'background_texture_strength' must be a number");
  }
  if (!j["seed"].is_number_unsigned() && !j["seed"].is_number_integer()) {
    throw ValidationError("degradation config: 'seed' must be an integer");
  }
  cfg.gaussian_sigma = j["gaussian_sigma"].get<double>();
  cfg.background_texture_strength = j["background_texture_strength"].get<double>();
  cfg.seed = j["seed"].get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

json to_json(const DegradationConfig& cfg) {
  json colors = json::array();
  for (const auto& c : cfg.stroke_color_range) colors.push_back({c.lo, c.hi});
  return json{{"stroke_count_range", {cfg.stroke_count_range.lo, cfg.stroke_count_range.hi}},
              {"stroke_thickness_range", {cfg.stroke_thickness_range.lo, cfg.stroke_thickness_range.hi}},
              {"stroke_color_range", colors},
              {"gaussian_sigma", cfg.gaussian_sigma},
              {"background_texture_strength", cfg.background_texture_strength},
              {"seed", cfg.seed}};
}

std::vector<std::uint8_t> render_stroke_mask(int height, int width, const Stroke& stroke) {
  cv::Mat mask = cv::Mat::zeros(height, width, CV_8UC1);
  const auto pts = to_cv(stroke.polyline);
  cv::polylines(mask, std::vector<std::vector<cv::Point>>{pts}, false, cv::Scalar(1), stroke.thickness, cv::LINE_8);
  return std::vector<std::uint8_t>(mask.data, mask.data + static_cast<std::size_t>(height) * width);
}

HandwritingOverlay synthesize_handwriting(int height, int width, ColorSpace colorspace, const DegradationConfig& cfg,
                                          Rng& rng) {
  cfg.validate();
  if (height < kMinImageSide || width < kMinImageSide) throw ValidationError("overlay shape below minimum");

  const int count = uniform_int(rng, cfg.stroke_count_range);
  std::vector<Stroke> strokes;
  for (int s = 0; s < count; ++s) {
    Stroke stroke;
    const double length = uniform(rng, 0.3, 0.8) * width;
    const double angle = uniform(rng, -0.35, 0.35);
    const double x0 = uniform(rng, 0.0, width - length * std::cos(angle) * 0.8);
    const double y0 = uniform(rng, 0.1 * height, 0.9 * height);
    const int n_points = std::uniform_int_distribution<int>(5, 9)(rng);
    const double amplitude = uniform(rng, 0.03, 0.08) * height;
    for (int i = 0; i < n_points; ++i) {
      const double t = static_cast<double>(i) / (n_points - 1);
      const double along = t * length + uniform(rng, -0.03, 0.03) * width;
      const double across = (i % 2 == 0 ? 1.0 : -1.0) * amplitude * uniform(rng, 0.5, 1.0);
      stroke.control_points.push_back({x0 + along * std::cos(angle) - across * std::sin(angle),
                                       y0 + along * std::sin(angle) + across * std::cos(angle)});
    }
    stroke.polyline = catmull_rom(stroke.control_points, 8);
    stroke.thickness = uniform_int(rng, cfg.stroke_thickness_range);
    for (int c = 0; c < 3; ++c) stroke.color[c] = uniform_int(rng, cfg.stroke_color_range[c]);
    strokes.push_back(std::move(stroke));
  }

  const int channels = colorspace == ColorSpace::gray ? 1 : 3;
  std::vector<float> px(static_cast<std::size_t>(height) * width * channels, 0.0F);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(height) * width, 0);
  for (const auto& stroke : strokes) {
    const auto m = render_stroke_mask(height, width, stroke);
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) continue;
      mask[i] = 1;
      if (channels == 1) {
        px[i] = luminance(stroke.color);
      } else {
        for (int c = 0; c < 3; ++c) px[i * 3 + c] = static_cast<float>(stroke.color[c]);
      }
    }
  }
  return HandwritingOverlay{ImageTensor(height, width, colorspace, ValueRange::byte, std::move(px)), std::move(mask),
                            std::move(strokes)};
}

ImageTensor composite(const ImageTensor& clean, const HandwritingOverlay& overlay) {
  if (!clean.same_layout(overlay.overlay)) throw ValidationError("overlay layout differs from the clean image");
  const int c = clean.channels();
  std::vector<float> px(clean.pixels().begin(), clean.pixels().end());
  for (std::size_t i = 0; i < overlay.mask.size(); ++i) {
    if (!overlay.mask[i]) continue;
    for (int ch = 0; ch < c; ++ch) px[i * c + ch] = overlay.overlay.pixels()[i * c + ch];
  }
  return ImageTensor(clean.height(), clean.width(), clean.colorspace(), clean.range(), std::move(px));
}

ImageTensor degrade_image(const ImageTensor& clean, const DegradationConfig& cfg, Rng& rng) {
  cfg.validate();
  if (clean.range() != ValueRange::byte) throw ValidationError("degrade_image expects a byte-range image");
  const auto overlay = synthesize_handwriting(clean.height(), clean.width(), clean.colorspace(), cfg, rng);
  ImageTensor comp = composite(clean, overlay);
  if (cfg.gaussian_sigma == 0.0) return comp;
  std::normal_distribution<double> noise(0.0, cfg.gaussian_sigma);
  std::vector<float> px(comp.pixels().begin(), comp.pixels().end());
  for (auto& v : px) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 255.0));
  return ImageTensor(comp.height(), comp.width(), comp.colorspace(), ValueRange::byte, std::move(px));
}

WatermarkDesign random_watermark_design(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x776d61726bULL));
  WatermarkDesign design;
  using Kind = WatermarkPart::Kind;
  if (std::bernoulli_distribution(0.5)(rng)) {
    design.parts.push_back({Kind::circle, {{0.5, 0.5}}, uniform(rng, 0.3, 0.4)});
  }
  const int extra = std::uniform_int_distribution<int>(2, 4)(rng);
  for (int i = 0; i < extra; ++i) {
    const int kind = std::uniform_int_distribution<int>(0, 4)(rng);
    WatermarkPart part{static_cast<Kind>(kind), {}};
    switch (part.kind) {
      case Kind::circle:
        part.points = {{uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.7)}};
        part.radius = uniform(rng, 0.06, 0.18);
        break;
      case Kind::line:
        part.points = {{uniform(rng, 0.15, 0.85), uniform(rng, 0.15, 0.85)},
                       {uniform(rng, 0.15, 0.85), uniform(rng, 0.15, 0.85)}};
        break;
      case Kind::arc:
        part.points = {{uniform(rng, 0.35, 0.65), uniform(rng, 0.35, 0.65)}};
        part.radius = uniform(rng, 0.12, 0.3);
        part.start_angle = uniform(rng, 0.0, 360.0);
        part.end_angle = part.start_angle + uniform(rng, 90.0, 240.0);
        break;
      case Kind::polygon: {
        const int n = std::uniform_int_distribution<int>(3, 6)(rng);
        const Point2 c{uniform(rng, 0.35, 0.65), uniform(rng, 0.35, 0.65)};
        const double r = uniform(rng, 0.1, 0.25);
        const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
        for (int k = 0; k < n; ++k) {
          const double a = phase + 2 * std::numbers::pi * k / n;
          part.points.push_back({c.x + r * std::cos(a), c.y + r * std::sin(a)});
        }
        break;
      }
      case Kind::cross: {
        const Point2 c{uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.7)};
        part.points = {c};
        part.radius = uniform(rng, 0.08, 0.2);
        break;
      }
    }
    design.parts.push_back(std::move(part));
  }
  return design;
}

ImageTensor render_watermark(const WatermarkDesign& design, int size, ColorSpace colorspace, double texture_strength,
                             Rng& rng) {
  if (size < kMinImageSide) throw ValidationError("watermark size below minimum");
  const std::array<double, 3> paper{uniform(rng, 222, 236), uniform(rng, 208, 222), uniform(rng, 178, 194)};
  cv::Mat canvas(size, size, CV_8UC3, cv::Scalar(paper[0], paper[1], paper[2]));
  if (texture_strength > 0.0) {
    const int g = std::max(2, size / 8);
    cv::Mat coarse(g, g, CV_64F);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x) coarse.at<double>(y, x) = n01(rng);
    cv::Mat field;
    cv::resize(coarse, field, cv::Size(size, size), 0, 0, cv::INTER_CUBIC);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        auto& px = canvas.at<cv::Vec3b>(y, x);
        const double d = 18.0 * texture_strength * field.at<double>(y, x);
        for (int c = 0; c < 3; ++c) px[c] = cv::saturate_cast<std::uint8_t>(paper[c] + d);
      }
  }

  const double shift_x = uniform(rng, -0.04, 0.04), shift_y = uniform(rng, -0.04, 0.04);
  const double rot = uniform(rng, -6.0, 6.0) * std::numbers::pi / 180.0;
  const double zoom = uniform(rng, 0.93, 1.07);
  auto map = [&](Point2 p) {
    const double dx = (p.x - 0.5) * zoom, dy = (p.y - 0.5) * zoom;
    return cv::Point(static_cast<int>(std::lround((0.5 + shift_x + dx * std::cos(rot) - dy * std::sin(rot)) * size)),
                     static_cast<int>(std::lround((0.5 + shift_y + dx * std::sin(rot) + dy * std::cos(rot)) * size)));
  };
  const int thickness = std::max(1, static_cast<int>(std::lround(size / 40.0 + uniform(rng, -0.4, 0.4))));
  const double tone = uniform(rng, -10, 10);
  const cv::Scalar ink(150 + tone, 128 + tone, 96 + tone);

  using Kind = WatermarkPart::Kind;
  for (const auto& part : design.parts) {
    switch (part.kind) {
      case Kind::circle:
        cv::circle(canvas, map(part.points[0]), static_cast<int>(std::lround(part.radius * zoom * size)), ink,
                   thickness, cv::LINE_AA);
        break;
      case Kind::line:
        cv::line(canvas, map(part.points[0]), map(part.points[1]), ink, thickness, cv::LINE_AA);
        break;
      case Kind::arc: {
        const int r = static_cast<int>(std::lround(part.radius * zoom * size));
        const double deg = rot * 180.0 / std::numbers::pi;
        cv::ellipse(canvas, map(part.points[0]), cv::Size(r, r), deg, part.start_angle, part.end_angle, ink, thickness,
                    cv::LINE_AA);
        break;
      }
      case Kind::polygon: {
        std::vector<cv::Point> pts;
        for (const auto& p : part.points) pts.push_back(map(p));
        cv::polylines(canvas, std::vector<std::vector<cv::Point>>{pts}, true, ink, thickness, cv::LINE_AA);
        break;
      }
      case Kind::cross: {
        const Point2 c = part.points[0];
        const double r = part.radius;
        cv::line(canvas, map({c.x - r, c.y}), map({c.x + r, c.y}), ink, thickness, cv::LINE_AA);
        cv::line(canvas, map({c.x, c.y - r}), map({c.x, c.y + r}), ink, thickness, cv::LINE_AA);
        break;
      }
    }
  }
  return mat_to_image(canvas, colorspace);
}

std::vector<GanPair> SyntheticCorpus::pairs() const {
  std::vector<GanPair> out;
  out.reserve(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    out.emplace_back(noisy.samples()[i].image, clean.samples()[i].image, clean.samples()[i].class_id);
  }
  return out;
}

SyntheticCorpus make_synthetic_corpus(const SyntheticCorpusSpec& spec) {
  spec.degradation.validate();
  if (spec.classes < 1 || spec.per_class < 1) throw ValidationError("corpus needs >= 1 class and >= 1 image per class");
  SyntheticCorpus corpus;
  const std::uint64_t degr_root = mix_seed(spec.seed) ^ spec.degradation.seed;
  for (int c = 0; c < spec.classes; ++c) {
    const WatermarkDesign design = random_watermark_design(derive_seed(spec.seed, 0x636c617373ULL, c));
    char class_name[32];
    std::snprintf(class_name, sizeof class_name, "class_%03d", c);
    for (int i = 0; i < spec.per_class; ++i) {
      const std::uint64_t item = static_cast<std::uint64_t>(c) * 100000ULL + i;
      Rng instance_rng(derive_seed(spec.seed, 0x696e7374ULL, item));
      ImageTensor clean = render_watermark(design, spec.size, spec.colorspace,
                                           spec.degradation.background_texture_strength, instance_rng);
      Rng degr_rng(derive_seed(degr_root, 0x64656772ULL, item));
      ImageTensor noisy = degrade_image(clean, spec.degradation, degr_rng);
      char file[32];
      std::snprintf(file, sizeof file, "img_%03d.png", i);
      const std::string rel = std::string(class_name) + "/" + file;
      corpus.clean.add(std::move(clean), c, rel);
      corpus.noisy.add(std::move(noisy), c, rel);
    }
    corpus.clean.set_class_name(c, class_name);
    corpus.noisy.set_class_name(c, class_name);
  }
  return corpus;
}

std::vector<fs::path> write_synthetic_corpus(const SyntheticCorpus& corpus, const fs::path& out_root) {
  std::vector<fs::path> written;
  for (const auto& [sub, set] : {std::pair<const char*, const LabeledImageSet*>{"clean", &corpus.clean},
                                 std::pair<const char*, const LabeledImageSet*>{"noisy", &corpus.noisy}}) {
    for (const auto& s : set->samples()) {
      const fs::path path = out_root / sub / s.source;
      save_image(s.image, path);
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace npx
