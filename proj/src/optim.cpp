#include "npx/optim.hpp"

#include <cmath>

namespace npx {

Adam::Adam(std::vector<nn::Parameter*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto* p : params_) {
    m_.emplace_back(p->size(), 0.0F);
    v_.emplace_back(p->size(), 0.0F);
  }
}

void Adam::step() {
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    nn::Parameter& p = *params_[k];
    const Tensor& g = p.grad();
    auto values = p.values();
    std::vector<float> next(values.begin(), values.end());
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double gi = g.data[i];
      m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
      v[i] = static_cast<float>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      next[i] = static_cast<float>(next[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
    p.assign(next);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

}  // namespace npx
