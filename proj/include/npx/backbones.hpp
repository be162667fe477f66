#pragma once

#include <memory>
#include <string>

#include "npx/nn.hpp"

namespace npx {

enum class BackboneKind { resnet18, efficientnet_b0, mobilenet_v3_small, tiny_cnn };

/// Canonical names: "residual-18", "efficient-b0", "mobile-v3-small", "tiny-cnn".
std::string to_string(BackboneKind k);
BackboneKind backbone_from_string(const std::string& s);

/// Convolutional trunk ending in global average pooling: (N,C,H,W) -> (N,F).
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual ag::Var features(const ag::Var& x, const nn::ForwardContext& ctx) const = 0;
  virtual int feature_dim() const = 0;
  /// Smallest input side the trunk accepts.
  virtual int min_input() const = 0;
};

/// Registers the trunk's parameters in `store` under `prefix`.
std::unique_ptr<Backbone> make_backbone(BackboneKind kind, nn::ParameterStore& store, const std::string& prefix,
                                        int in_channels);

}  // namespace npx
