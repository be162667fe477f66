#include "npx/gan_models.hpp"

#include <algorithm>
#include <string>

#include "npx/errors.hpp"

namespace npx {

namespace {

constexpr double kLeakySlope = 0.2;
constexpr int kDropoutBlocks = 3;

std::string level_name(const char* kind, int i) { return std::string(kind) + std::to_string(i); }

}  // namespace

void GeneratorConfig::validate() const {
  if (image_size < kMinImageSide || (image_size & (image_size - 1)) != 0) {
    throw ValidationError("generator image_size must be a power of two >= 16, got " + std::to_string(image_size));
  }
  if (depth < 3) throw ValidationError("generator depth must be >= 3, got " + std::to_string(depth));
  if (depth >= 31 || (image_size >> depth) < 1) {
    throw ValidationError("generator depth " + std::to_string(depth) + " overshoots the bottleneck for size " +
                          std::to_string(image_size));
  }
  if (base_channels < 1) throw ValidationError("generator base_channels must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("dropout_rate must lie in [0, 1)");
  if (input_channels < 1 || output_channels < 1) throw ValidationError("generator channel counts must be >= 1");
}

int UNetGenerator::level_channels(int i) const { return cfg_.base_channels << std::min(i - 1, 3); }

UNetGenerator::UNetGenerator(const GeneratorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int depth = cfg_.depth;
  int in_ch = cfg_.input_channels;
  for (int i = 1; i <= depth; ++i) {
    const int out_ch = level_channels(i);
    // Outermost and innermost blocks carry no normalization; the innermost one
    // can be 1x1 where batch statistics degenerate.
    const bool norm = i != 1 && i != depth;
    const std::string p = level_name("down", i);
    Down block{nn::Conv2d(store_, p + ".conv", in_ch, out_ch, 4, 2, 1, !norm), {}, norm};
    if (norm) block.norm = nn::BatchNorm2d(store_, p + ".norm", out_ch);
    down_.push_back(std::move(block));
    in_ch = out_ch;
  }
  for (int j = 1; j < depth; ++j) {
    const int skip_level = depth - j;
    const int up_in = j == 1 ? level_channels(depth) : 2 * level_channels(skip_level + 1);
    const int up_out = level_channels(skip_level);
    const std::string p = level_name("up", j);
    up_.push_back(Up{nn::ConvTranspose2d(store_, p + ".conv", up_in, up_out, 4, 2, 1, false),
                     nn::BatchNorm2d(store_, p + ".norm", up_out), j <= kDropoutBlocks});
  }
  out_ = nn::ConvTranspose2d(store_, "out.conv", 2 * level_channels(1), cfg_.output_channels, 4, 2, 1, true);
}

ag::Var UNetGenerator::forward(const ag::Var& x, const nn::ForwardContext& ctx, const GeneratorProbe* probe) const {
  const Shape expected{x.shape().empty() ? 0 : x.shape()[0], cfg_.input_channels, cfg_.image_size, cfg_.image_size};
  if (x.shape().size() != 4 || x.shape() != expected || x.shape()[0] < 1) {
    throw ValidationError("generator expects input " + shape_str(expected) + ", got " + shape_str(x.shape()));
  }
  const bool use_dropout = ctx.training && cfg_.dropout_rate > 0.0;
  if (use_dropout && ctx.rng == nullptr) throw ValidationError("training-mode generator pass needs an rng");

  std::vector<ag::Var> enc;
  ag::Var h = x;
  for (const auto& block : down_) {
    h = block.conv(h);
    if (block.has_norm) h = block.norm(h, ctx);
    h = ag::leaky_relu(h, kLeakySlope);
    enc.push_back(h);
  }
  auto skip = [&](int level) {
    const ag::Var& e = enc[static_cast<std::size_t>(level - 1)];
    return probe && probe->zero_skip_level == level ? ag::zero_like(e) : e;
  };
  auto tap = [&](const ag::Var& v) {
    if (probe && probe->decoder_taps) probe->decoder_taps->push_back(v.value());
  };

  const int depth = cfg_.depth;
  for (int j = 1; j < depth; ++j) {
    const auto& block = up_[static_cast<std::size_t>(j - 1)];
    h = ag::relu(block.norm(block.conv(h), ctx));
    if (block.dropout && use_dropout) h = ag::dropout(h, cfg_.dropout_rate, *ctx.rng);
    tap(h);
    h = ag::concat_channels(h, skip(depth - j));
  }
  h = ag::tanh(out_(h));
  tap(h);
  return h;
}

void DiscriminatorConfig::validate() const {
  if (layers < 2) throw ValidationError("discriminator layers must be >= 2, got " + std::to_string(layers));
  if (layers > 12) throw ValidationError("discriminator layers must be <= 12");
  if (input_channels < 2) throw ValidationError("discriminator input_channels must be >= 2");
  if (base_channels < 1) throw ValidationError("discriminator base_channels must be >= 1");
}

PatchDiscriminator::PatchDiscriminator(const DiscriminatorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  int in_ch = cfg_.input_channels;
  for (int n = 0; n <= cfg_.layers; ++n) {
    const int out_ch = cfg_.base_channels << std::min(n, 3);
    const bool norm = n != 0;
    const int stride = n < cfg_.layers ? 2 : 1;
    const std::string p = level_name("block", n + 1);
    Block block{nn::Conv2d(store_, p + ".conv", in_ch, out_ch, 4, stride, 1, !norm), {}, norm};
    if (norm) block.norm = nn::BatchNorm2d(store_, p + ".norm", out_ch);
    blocks_.push_back(std::move(block));
    in_ch = out_ch;
  }
  head_ = nn::Conv2d(store_, "head.conv", in_ch, 1, 4, 1, 1, true);
}

ag::Var PatchDiscriminator::forward(const ag::Var& candidate, const ag::Var& condition,
                                    const nn::ForwardContext& ctx) const {
  if (candidate.shape() != condition.shape()) {
    throw ValidationError("candidate " + shape_str(candidate.shape()) + " and condition " +
                          shape_str(condition.shape()) + " differ in shape");
  }
  const Shape& s = candidate.shape();
  if (s.size() != 4 || 2 * s[1] != cfg_.input_channels || s[2] != s[3]) {
    throw ValidationError("discriminator expects square (N, " + std::to_string(cfg_.input_channels / 2) +
                          ", S, S) inputs, got " + shape_str(s));
  }
  patch_grid_shape(s[2], cfg_);
  ag::Var h = ag::concat_channels(candidate, condition);
  for (const auto& block : blocks_) {
    h = block.conv(h);
    if (block.has_norm) h = block.norm(h, ctx);
    h = ag::leaky_relu(h, kLeakySlope);
  }
  return ag::sigmoid(head_(h));
}

void PatchScoreMap::validate() const {
  if (grid_h < 1 || grid_w < 1 || scores.size() != static_cast<std::size_t>(grid_h) * grid_w) {
    throw ValidationError("patch score map shape inconsistent");
  }
  for (double s : scores) {
    if (!(s > 0.0 && s < 1.0)) throw ValidationError("patch score outside (0, 1): " + std::to_string(s));
  }
}

std::pair<int, int> patch_grid_shape(int image_size, const DiscriminatorConfig& cfg) {
  cfg.validate();
  int s = image_size;
  for (int n = 0; n < cfg.layers && s >= 2; ++n) s = ag::conv_output_size(s, 4, 2, 1);
  s = s >= 2 ? ag::conv_output_size(s, 4, 1, 1) : 0;
  s = s >= 2 ? ag::conv_output_size(s, 4, 1, 1) : 0;
  if (s < 1) {
    throw ValidationError("input size " + std::to_string(image_size) + " gives an empty patch grid with " +
                          std::to_string(cfg.layers) + " layers (minimum " +
                          std::to_string(min_discriminator_input(cfg)) + ")");
  }
  return {s, s};
}

int min_discriminator_input(const DiscriminatorConfig& cfg) { return 3 << cfg.layers; }

void init_gan_params(nn::ParameterStore& store, std::uint64_t seed, double stddev) {
  nn::initialize(store, nn::InitScheme::gaussian, stddev, seed);
}

std::vector<ImageTensor> generator_forward(const UNetGenerator& gen, std::span<const ImageTensor> noisy) {
  if (noisy.empty()) return {};
  for (const auto& img : noisy) {
    if (img.range() != ValueRange::unit_signed) throw ValidationError("generator input must be unit_signed");
  }
  ag::NoGradGuard no_grad;
  const ag::Var out = gen.forward(ag::Var(stack_batch(noisy)), nn::ForwardContext{});
  std::vector<ImageTensor> result;
  result.reserve(noisy.size());
  for (int n = 0; n < static_cast<int>(noisy.size()); ++n) result.push_back(image_from_batch(out.value(), n));
  return result;
}

PatchScoreMap discriminator_forward(const PatchDiscriminator& disc, const ImageTensor& candidate,
                                    const ImageTensor& condition) {
  if (!candidate.same_layout(condition)) throw ValidationError("candidate and condition differ in layout");
  if (candidate.range() != ValueRange::unit_signed) throw ValidationError("discriminator input must be unit_signed");
  ag::NoGradGuard no_grad;
  const ag::Var out = disc.forward(ag::Var(stack_batch(std::span(&candidate, 1))),
                                   ag::Var(stack_batch(std::span(&condition, 1))), nn::ForwardContext{});
  PatchScoreMap map{out.shape()[2], out.shape()[3], out.value().data};
  map.validate();
  return map;
}

}  // namespace npx
