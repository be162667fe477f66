#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "npx/autograd.hpp"

namespace npx::nn {

enum class ParamKind { trainable, buffer };

/// How a parameter is filled by initialize().
enum class InitRole { weight, norm_scale, zero, one };

/// A named array whose storage of record is 32-bit float. The double mirror
/// held by var() is what the graph reads, and always equals the float values.
class Parameter {
 public:
  Parameter(std::string name, Shape shape, ParamKind kind, InitRole role, int fan_in);

  const std::string& name() const { return name_; }
  const Shape& shape() const { return shape_; }
  ParamKind kind() const { return kind_; }
  InitRole role() const { return role_; }
  int fan_in() const { return fan_in_; }
  std::size_t size() const { return values_.size(); }

  std::span<const float> values() const { return values_; }
  void assign(std::span<const float> values);
  void set(std::size_t i, float v);

  /// Writable view for in-place buffer updates (batch-norm running stats).
  /// Call sync() afterwards if the graph mirror must reflect the change.
  std::span<float> raw() { return values_; }
  void sync();

  const ag::Var& var() const { return var_; }
  const Tensor& grad() const { return var_.grad(); }
  void zero_grad();

 private:
  std::string name_;
  Shape shape_;
  ParamKind kind_;
  InitRole role_;
  int fan_in_;
  std::vector<float> values_;
  ag::Var var_;
};

/// Owns every parameter and buffer of one network, in registration order.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(std::string name, Shape shape, ParamKind kind, InitRole role, int fan_in = 1);

  std::vector<Parameter*> trainable() const;
  std::vector<Parameter*> all() const;
  Parameter* find(std::string_view name) const;
  std::size_t trainable_count() const;

  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

enum class InitScheme {
  gaussian,  // N(0, stddev) weights, N(1, stddev) norm scales
  kaiming,   // N(0, sqrt(2/fan_in)) weights, unit norm scales
};

void initialize(ParameterStore& store, InitScheme scheme, double stddev, std::uint64_t seed);

/// Per-call switches for a forward pass.
struct ForwardContext {
  bool training = false;
  bool update_running_stats = true;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterStore& store, const std::string& prefix, int in_channels, int out_channels, int kernel,
         int stride, int padding, bool bias, int groups = 1);
  ag::Var operator()(const ag::Var& x) const;

  int out_channels() const { return out_channels_; }

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
  ag::ConvGeometry geo_;
  int out_channels_ = 0;
};

class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(ParameterStore& store, const std::string& prefix, int in_channels, int out_channels,
                  int kernel, int stride, int padding, bool bias);
  ag::Var operator()(const ag::Var& x) const;

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
  ag::ConvGeometry geo_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore& store, const std::string& prefix, int channels);
  ag::Var operator()(const ag::Var& x, const ForwardContext& ctx) const;

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
  Parameter* running_mean_ = nullptr;
  Parameter* running_var_ = nullptr;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& prefix, int in_features, int out_features, bool bias = true);
  ag::Var operator()(const ag::Var& x) const;

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
};

}  // namespace npx::nn
