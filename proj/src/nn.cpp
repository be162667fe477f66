#include "npx/nn.hpp"

#include <algorithm>
#include <cmath>

#include "npx/errors.hpp"

namespace npx::nn {

Parameter::Parameter(std::string name, Shape shape, ParamKind kind, InitRole role, int fan_in)
    : name_(std::move(name)),
      shape_(std::move(shape)),
      kind_(kind),
      role_(role),
      fan_in_(fan_in),
      values_(shape_numel(shape_), 0.0F),
      var_(Tensor(shape_), kind == ParamKind::trainable) {
  sync();
}

void Parameter::assign(std::span<const float> values) {
  if (values.size() != values_.size()) {
    throw ValidationError("parameter '" + name_ + "' expects " + std::to_string(values_.size()) + " values, got " +
                          std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), values_.begin());
  sync();
}

void Parameter::set(std::size_t i, float v) {
  values_.at(i) = v;
  var_.node()->value.data[i] = static_cast<double>(v);
}

void Parameter::sync() {
  auto& mirror = var_.node()->value.data;
  for (std::size_t i = 0; i < values_.size(); ++i) mirror[i] = static_cast<double>(values_[i]);
}

void Parameter::zero_grad() {
  auto& g = var_.node()->grad.data;
  std::fill(g.begin(), g.end(), 0.0);
}

Parameter& ParameterStore::add(std::string name, Shape shape, ParamKind kind, InitRole role, int fan_in) {
  if (find(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(shape), kind, role, fan_in));
  return *params_.back();
}

std::vector<Parameter*> ParameterStore::trainable() const {
  std::vector<Parameter*> out;
  for (const auto& p : params_)
    if (p->kind() == ParamKind::trainable) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::all() const {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

Parameter* ParameterStore::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p->name() == name) return p.get();
  return nullptr;
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p->kind() == ParamKind::trainable) n += p->size();
  return n;
}

void ParameterStore::zero_grad() {
  for (const auto& p : params_) p->zero_grad();
}

void initialize(ParameterStore& store, InitScheme scheme, double stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (Parameter* p : store.all()) {
    std::vector<float> v(p->size());
    switch (p->role()) {
      case InitRole::weight: {
        const double sd = scheme == InitScheme::gaussian ? stddev : std::sqrt(2.0 / std::max(1, p->fan_in()));
        std::normal_distribution<double> dist(0.0, sd);
        for (auto& x : v) x = static_cast<float>(dist(rng));
        break;
      }
      case InitRole::norm_scale: {
        if (scheme == InitScheme::gaussian) {
          std::normal_distribution<double> dist(1.0, stddev);
          for (auto& x : v) x = static_cast<float>(dist(rng));
        } else {
          std::fill(v.begin(), v.end(), 1.0F);
        }
        break;
      }
      case InitRole::zero:
        std::fill(v.begin(), v.end(), 0.0F);
        break;
      case InitRole::one:
        std::fill(v.begin(), v.end(), 1.0F);
        break;
    }
    p->assign(v);
  }
}

Conv2d::Conv2d(ParameterStore& store, const std::string& prefix, int in_channels, int out_channels, int kernel,
               int stride, int padding, bool bias, int groups)
    : geo_{kernel, stride, padding, groups}, out_channels_(out_channels) {
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw ValidationError(prefix + ": channels not divisible by groups");
  }
  const int fan_in = in_channels / groups * kernel * kernel;
  weight_ = &store.add(prefix + ".weight", {out_channels, in_channels / groups, kernel, kernel},
                       ParamKind::trainable, InitRole::weight, fan_in);
  if (bias) bias_ = &store.add(prefix + ".bias", {out_channels}, ParamKind::trainable, InitRole::zero);
}

ag::Var Conv2d::operator()(const ag::Var& x) const {
  return ag::conv2d(x, weight_->var(), bias_ ? &bias_->var() : nullptr, geo_);
}

ConvTranspose2d::ConvTranspose2d(ParameterStore& store, const std::string& prefix, int in_channels,
                                 int out_channels, int kernel, int stride, int padding, bool bias)
    : geo_{kernel, stride, padding, 1} {
  weight_ = &store.add(prefix + ".weight", {in_channels, out_channels, kernel, kernel}, ParamKind::trainable,
                       InitRole::weight, in_channels * kernel * kernel);
  if (bias) bias_ = &store.add(prefix + ".bias", {out_channels}, ParamKind::trainable, InitRole::zero);
}

ag::Var ConvTranspose2d::operator()(const ag::Var& x) const {
  return ag::conv_transpose2d(x, weight_->var(), bias_ ? &bias_->var() : nullptr, geo_);
}

BatchNorm2d::BatchNorm2d(ParameterStore& store, const std::string& prefix, int channels) {
  gamma_ = &store.add(prefix + ".weight", {channels}, ParamKind::trainable, InitRole::norm_scale);
  beta_ = &store.add(prefix + ".bias", {channels}, ParamKind::trainable, InitRole::zero);
  running_mean_ = &store.add(prefix + ".running_mean", {channels}, ParamKind::buffer, InitRole::zero);
  running_var_ = &store.add(prefix + ".running_var", {channels}, ParamKind::buffer, InitRole::one);
}

ag::Var BatchNorm2d::operator()(const ag::Var& x, const ForwardContext& ctx) const {
  ag::BatchNormState state{running_mean_->raw(), running_var_->raw()};
  return ag::batch_norm(x, gamma_->var(), beta_->var(), state, ctx.training,
                        ctx.training && ctx.update_running_stats);
}

Linear::Linear(ParameterStore& store, const std::string& prefix, int in_features, int out_features, bool bias) {
  weight_ = &store.add(prefix + ".weight", {out_features, in_features}, ParamKind::trainable, InitRole::weight,
                       in_features);
  if (bias) bias_ = &store.add(prefix + ".bias", {out_features}, ParamKind::trainable, InitRole::zero);
}

ag::Var Linear::operator()(const ag::Var& x) const {
  return ag::linear(x, weight_->var(), bias_ ? &bias_->var() : nullptr);
}

}  // namespace npx::nn
