#include "npx/backbones.hpp"

#include <algorithm>
#include <vector>

#include "npx/errors.hpp"

namespace npx {

namespace {

enum class Act { none, relu, silu, hardswish };

ag::Var activate(const ag::Var& x, Act act) {
  switch (act) {
    case Act::relu:
      return ag::relu(x);
    case Act::silu:
      return ag::silu(x);
    case Act::hardswish:
      return ag::hardswish(x);
    case Act::none:
      break;
  }
  return x;
}

// Bias-free convolution, batch norm, activation.
struct ConvBN {
  nn::Conv2d conv;
  nn::BatchNorm2d norm;
  Act act = Act::none;

  ConvBN() = default;
  ConvBN(nn::ParameterStore& s, const std::string& p, int in, int out, int k, int stride, Act a, int groups = 1)
      : conv(s, p + ".conv", in, out, k, stride, k / 2, false, groups), norm(s, p + ".bn", out), act(a) {}

  ag::Var operator()(const ag::Var& x, const nn::ForwardContext& ctx) const {
    return activate(norm(conv(x), ctx), act);
  }
};

struct SqueezeExcite {
  nn::Conv2d reduce;
  nn::Conv2d expand;
  Act inner = Act::relu;
  bool hard_gate = false;

  SqueezeExcite() = default;
  SqueezeExcite(nn::ParameterStore& s, const std::string& p, int channels, int squeezed, Act inner_act, bool hard)
      : reduce(s, p + ".reduce", channels, squeezed, 1, 1, 0, true),
        expand(s, p + ".expand", squeezed, channels, 1, 1, 0, true),
        inner(inner_act),
        hard_gate(hard) {}

  ag::Var operator()(const ag::Var& x) const {
    const ag::Var pooled = ag::global_avg_pool(x);
    const int n = pooled.shape()[0], c = pooled.shape()[1];
    ag::Var g = expand(activate(reduce(ag::reshape(pooled, {n, c, 1, 1})), inner));
    g = hard_gate ? ag::hardsigmoid(g) : ag::sigmoid(g);
    return ag::channel_scale(x, ag::reshape(g, {n, c}));
  }
};

int make_divisible(double v, int divisor = 8) {
  int r = std::max(divisor, static_cast<int>(v + divisor / 2.0) / divisor * divisor);
  if (r < 0.9 * v) r += divisor;
  return r;
}

// -- tiny-cnn -----------------------------------------------------------------

class TinyCnn : public Backbone {
 public:
  TinyCnn(nn::ParameterStore& s, const std::string& p, int in_channels) {
    int in = in_channels;
    const int widths[4] = {16, 32, 64, 64};
    for (int i = 0; i < 4; ++i) {
      blocks_.emplace_back(s, p + ".block" + std::to_string(i + 1), in, widths[i], 3, 1, Act::relu);
      in = widths[i];
    }
    dim_ = in;
  }

  ag::Var features(const ag::Var& x, const nn::ForwardContext& ctx) const override {
    ag::Var h = x;
    for (const auto& b : blocks_) h = ag::max_pool2d(b(h, ctx), 2, 2, 0);
    return ag::global_avg_pool(h);
  }
  int feature_dim() const override { return dim_; }
  int min_input() const override { return 16; }

 private:
  std::vector<ConvBN> blocks_;
  int dim_ = 0;
};

// -- residual-18 --------------------------------------------------------------

struct BasicBlock {
  ConvBN a;
  ConvBN b;
  bool project = false;
  ConvBN shortcut;

  BasicBlock(nn::ParameterStore& s, const std::string& p, int in, int out, int stride)
      : a(s, p + ".a", in, out, 3, stride, Act::relu), b(s, p + ".b", out, out, 3, 1, Act::none) {
    project = stride != 1 || in != out;
    if (project) shortcut = ConvBN(s, p + ".shortcut", in, out, 1, stride, Act::none);
  }

  ag::Var operator()(const ag::Var& x, const nn::ForwardContext& ctx) const {
    const ag::Var skip = project ? shortcut(x, ctx) : x;
    return ag::relu(ag::add(b(a(x, ctx), ctx), skip));
  }
};

class ResNet18 : public Backbone {
 public:
  ResNet18(nn::ParameterStore& s, const std::string& p, int in_channels)
      : stem_(s, p + ".stem", in_channels, 64, 7, 2, Act::relu) {
    int in = 64;
    const int widths[4] = {64, 128, 256, 512};
    for (int stage = 0; stage < 4; ++stage) {
      for (int i = 0; i < 2; ++i) {
        const int stride = (stage > 0 && i == 0) ? 2 : 1;
        blocks_.emplace_back(s, p + ".layer" + std::to_string(stage + 1) + "." + std::to_string(i), in,
                             widths[stage], stride);
        in = widths[stage];
      }
    }
  }

  ag::Var features(const ag::Var& x, const nn::ForwardContext& ctx) const override {
    ag::Var h = ag::max_pool2d(stem_(x, ctx), 3, 2, 1);
    for (const auto& b : blocks_) h = b(h, ctx);
    return ag::global_avg_pool(h);
  }
  int feature_dim() const override { return 512; }
  int min_input() const override { return 32; }

 private:
  ConvBN stem_;
  std::vector<BasicBlock> blocks_;
};

// -- inverted residual blocks (efficient-b0, mobile-v3-small) -------------------

struct InvertedResidual {
  bool has_expand = false;
  ConvBN expand;
  ConvBN depthwise;
  bool has_se = false;
  SqueezeExcite se;
  ConvBN project;
  bool residual = false;

  InvertedResidual(nn::ParameterStore& s, const std::string& p, int in, int expanded, int out, int k, int stride,
                   Act act, int se_channels, Act se_inner, bool hard_gate)
      : depthwise(s, p + ".dw", expanded, expanded, k, stride, act, expanded),
        project(s, p + ".project", expanded, out, 1, 1, Act::none) {
    has_expand = expanded != in;
    if (has_expand) expand = ConvBN(s, p + ".expand", in, expanded, 1, 1, act);
    has_se = se_channels > 0;
    if (has_se) se = SqueezeExcite(s, p + ".se", expanded, se_channels, se_inner, hard_gate);
    residual = stride == 1 && in == out;
  }

  ag::Var operator()(const ag::Var& x, const nn::ForwardContext& ctx) const {
    ag::Var h = has_expand ? expand(x, ctx) : x;
    h = depthwise(h, ctx);
    if (has_se) h = se(h);
    h = project(h, ctx);
    return residual ? ag::add(h, x) : h;
  }
};

class EfficientNetB0 : public Backbone {
 public:
  EfficientNetB0(nn::ParameterStore& s, const std::string& p, int in_channels)
      : stem_(s, p + ".stem", in_channels, 32, 3, 2, Act::silu) {
    struct Stage {
      int expand, kernel, stride, out, repeats;
    };
    const Stage stages[] = {{1, 3, 1, 16, 1},  {6, 3, 2, 24, 2},  {6, 5, 2, 40, 2},  {6, 3, 2, 80, 3},
                            {6, 5, 1, 112, 3}, {6, 5, 2, 192, 4}, {6, 3, 1, 320, 1}};
    int in = 32, idx = 0;
    for (const auto& st : stages) {
      for (int r = 0; r < st.repeats; ++r) {
        const int stride = r == 0 ? st.stride : 1;
        blocks_.emplace_back(s, p + ".mb" + std::to_string(idx++), in, in * st.expand, st.out, st.kernel, stride,
                             Act::silu, std::max(1, in / 4), Act::silu, false);
        in = st.out;
      }
    }
    head_ = ConvBN(s, p + ".head", in, 1280, 1, 1, Act::silu);
  }

  ag::Var features(const ag::Var& x, const nn::ForwardContext& ctx) const override {
    ag::Var h = stem_(x, ctx);
    for (const auto& b : blocks_) h = b(h, ctx);
    return ag::global_avg_pool(head_(h, ctx));
  }
  int feature_dim() const override { return 1280; }
  int min_input() const override { return 32; }

 private:
  ConvBN stem_;
  std::vector<InvertedResidual> blocks_;
  ConvBN head_;
};

class MobileNetV3Small : public Backbone {
 public:
  MobileNetV3Small(nn::ParameterStore& s, const std::string& p, int in_channels)
      : stem_(s, p + ".stem", in_channels, 16, 3, 2, Act::hardswish) {
    struct Spec {
      int kernel, expanded, out;
      bool se;
      Act act;
      int stride;
    };
    const Spec specs[] = {{3, 16, 16, true, Act::relu, 2},       {3, 72, 24, false, Act::relu, 2},
                          {3, 88, 24, false, Act::relu, 1},      {5, 96, 40, true, Act::hardswish, 2},
                          {5, 240, 40, true, Act::hardswish, 1}, {5, 240, 40, true, Act::hardswish, 1},
                          {5, 120, 48, true, Act::hardswish, 1}, {5, 144, 48, true, Act::hardswish, 1},
                          {5, 288, 96, true, Act::hardswish, 2}, {5, 576, 96, true, Act::hardswish, 1},
                          {5, 576, 96, true, Act::hardswish, 1}};
    int in = 16, idx = 0;
    for (const auto& sp : specs) {
      const int se_ch = sp.se ? make_divisible(sp.expanded / 4.0) : 0;
      blocks_.emplace_back(s, p + ".ir" + std::to_string(idx++), in, sp.expanded, sp.out, sp.kernel, sp.stride,
                           sp.act, se_ch, Act::relu, true);
      in = sp.out;
    }
    head_ = ConvBN(s, p + ".head", in, 576, 1, 1, Act::hardswish);
  }

  ag::Var features(const ag::Var& x, const nn::ForwardContext& ctx) const override {
    ag::Var h = stem_(x, ctx);
    for (const auto& b : blocks_) h = b(h, ctx);
    return ag::global_avg_pool(head_(h, ctx));
  }
  int feature_dim() const override { return 576; }
  int min_input() const override { return 32; }

 private:
  ConvBN stem_;
  std::vector<InvertedResidual> blocks_;
  ConvBN head_;
};

}  // namespace

std::string to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::resnet18:
      return "residual-18";
    case BackboneKind::efficientnet_b0:
      return "efficient-b0";
    case BackboneKind::mobilenet_v3_small:
      return "mobile-v3-small";
    case BackboneKind::tiny_cnn:
      return "tiny-cnn";
  }
  return "unknown";
}

BackboneKind backbone_from_string(const std::string& s) {
  if (s == "residual-18" || s == "resnet18") return BackboneKind::resnet18;
  if (s == "efficient-b0" || s == "efficientnet-b0") return BackboneKind::efficientnet_b0;
  if (s == "mobile-v3-small" || s == "mobilenet-v3-small") return BackboneKind::mobilenet_v3_small;
  if (s == "tiny-cnn") return BackboneKind::tiny_cnn;
  throw ValidationError("unknown backbone '" + s +
                        "' (expected residual-18, efficient-b0, mobile-v3-small or tiny-cnn)");
}

std::unique_ptr<Backbone> make_backbone(BackboneKind kind, nn::ParameterStore& store, const std::string& prefix,
                                        int in_channels) {
  switch (kind) {
    case BackboneKind::resnet18:
      return std::make_unique<ResNet18>(store, prefix, in_channels);
    case BackboneKind::efficientnet_b0:
      return std::make_unique<EfficientNetB0>(store, prefix, in_channels);
    case BackboneKind::mobilenet_v3_small:
      return std::make_unique<MobileNetV3Small>(store, prefix, in_channels);
    case BackboneKind::tiny_cnn:
      return std::make_unique<TinyCnn>(store, prefix, in_channels);
  }
  throw ValidationError("unknown backbone kind");
}

}  // namespace npx
