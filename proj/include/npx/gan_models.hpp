#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "npx/image.hpp"
#include "npx/nn.hpp"

namespace npx {

struct GeneratorConfig {
  int image_size = 256;
  int depth = 8;
  int base_channels = 64;
  double dropout_rate = 0.5;
  int input_channels = 3;
  int output_channels = 3;

  void validate() const;
};

/// Optional hooks into a generator forward pass, used by wiring tests.
struct GeneratorProbe {
  int zero_skip_level = 0;             // 1-based encoder level whose skip copy is zeroed; 0 = none
  std::vector<Tensor>* decoder_taps = nullptr;  // up-block outputs, innermost first, then the final output
};

/// U-Net: depth stride-2 down blocks, depth-1 up blocks with skip
/// concatenation, a final transposed convolution and Tanh.
class UNetGenerator {
 public:
  explicit UNetGenerator(const GeneratorConfig& cfg);

  UNetGenerator(const UNetGenerator&) = delete;
  UNetGenerator& operator=(const UNetGenerator&) = delete;
  UNetGenerator(UNetGenerator&&) = default;
  UNetGenerator& operator=(UNetGenerator&&) = default;

  const GeneratorConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return store_; }
  const nn::ParameterStore& params() const { return store_; }

  /// x is (N, input_channels, image_size, image_size) in [-1, 1].
  ag::Var forward(const ag::Var& x, const nn::ForwardContext& ctx, const GeneratorProbe* probe = nullptr) const;

  /// Channel width of encoder level i (1-based).
  int level_channels(int i) const;

 private:
  struct Down {
    nn::Conv2d conv;
    nn::BatchNorm2d norm;
    bool has_norm;
  };
  struct Up {
    nn::ConvTranspose2d conv;
    nn::BatchNorm2d norm;
    bool dropout;
  };

  GeneratorConfig cfg_;
  nn::ParameterStore store_;
  std::vector<Down> down_;
  std::vector<Up> up_;
  nn::ConvTranspose2d out_;
};

struct DiscriminatorConfig {
  int input_channels = 6;  // candidate + condition
  int layers = 3;
  int base_channels = 64;

  void validate() const;
};

/// Stride-2 blocks followed by two stride-1 heads, sigmoid per patch.
class PatchDiscriminator {
 public:
  explicit PatchDiscriminator(const DiscriminatorConfig& cfg);

  PatchDiscriminator(const PatchDiscriminator&) = delete;
  PatchDiscriminator& operator=(const PatchDiscriminator&) = delete;
  PatchDiscriminator(PatchDiscriminator&&) = default;
  PatchDiscriminator& operator=(PatchDiscriminator&&) = default;

  const DiscriminatorConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return store_; }
  const nn::ParameterStore& params() const { return store_; }

  /// (N, 1, grid_h, grid_w) scores in (0, 1) for candidate/condition batches.
  ag::Var forward(const ag::Var& candidate, const ag::Var& condition, const nn::ForwardContext& ctx) const;

 private:
  struct Block {
    nn::Conv2d conv;
    nn::BatchNorm2d norm;
    bool has_norm;
  };

  DiscriminatorConfig cfg_;
  nn::ParameterStore store_;
  std::vector<Block> blocks_;
  nn::Conv2d head_;
};

struct PatchScoreMap {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<double> scores;  // row-major

  double at(int y, int x) const { return scores[static_cast<std::size_t>(y) * grid_w + x]; }
  /// Throws unless every score lies in (0, 1).
  void validate() const;
};

/// Spatial shape the discriminator emits for a square input.
std::pair<int, int> patch_grid_shape(int image_size, const DiscriminatorConfig& cfg);

/// Smallest square input giving a 1x1 grid.
int min_discriminator_input(const DiscriminatorConfig& cfg);

/// Initializes with N(0, stddev) weights and N(1, stddev) norm scales.
void init_gan_params(nn::ParameterStore& store, std::uint64_t seed, double stddev = 0.02);

/// Eval-mode generator pass over unit_signed images.
std::vector<ImageTensor> generator_forward(const UNetGenerator& gen, std::span<const ImageTensor> noisy);

/// Eval-mode discriminator pass over a single (candidate, condition) pair.
PatchScoreMap discriminator_forward(const PatchDiscriminator& disc, const ImageTensor& candidate,
                                    const ImageTensor& condition);

}  // namespace npx
