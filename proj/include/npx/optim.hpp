#pragma once

#include <cstdint>
#include <vector>

#include "npx/nn.hpp"

namespace npx {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer with bias correction. Moments are kept in
/// float so that a checkpointed state resumes bit-for-bit.
class Adam {
 public:
  Adam(std::vector<nn::Parameter*> params, AdamConfig cfg);

  void step();
  void zero_grad();

  const AdamConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t n) { step_count_ = n; }

  const std::vector<nn::Parameter*>& params() const { return params_; }
  std::vector<float>& first_moment(std::size_t i) { return m_[i]; }
  std::vector<float>& second_moment(std::size_t i) { return v_[i]; }
  const std::vector<float>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<float>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<nn::Parameter*> params_;
  AdamConfig cfg_;
  std::int64_t step_count_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

}  // namespace npx
