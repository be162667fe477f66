#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "npx/dataset.hpp"
#include "npx/gan_models.hpp"
#include "npx/optim.hpp"

namespace npx {

struct GanLossWeights {
  double w_D_real = 1.0;
  double w_D_gen = 1.0;
  double w_G_real = 1.0;
  double w_G_gen = 1.0;

  void validate() const;
};

enum class AdversarialMode {
  standard,       // MSE(D(G(N), N), 1): the generator tries to fool the discriminator
  paper_literal,  // MSE(D(C, N), 0): independent of the generator, so it carries no gradient
};

std::string to_string(AdversarialMode m);
AdversarialMode adversarial_mode_from_string(const std::string& s);

struct GanRunConfig {
  int batch_size = 16;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int epochs = 200;
  int image_size = 256;
  int depth = 8;
  AdversarialMode adversarial_mode = AdversarialMode::standard;
  GanLossWeights weights;
  std::uint64_t seed = 0;
  int checkpoint_every = 10;
  int base_channels = 64;
  double dropout_rate = 0.5;
  int disc_layers = 3;
  int disc_base_channels = 64;

  void validate() const;
  GeneratorConfig generator_config(int channels) const;
  DiscriminatorConfig discriminator_config(int channels) const;
  AdamConfig adam() const { return AdamConfig{lr, beta1, beta2}; }
};

nlohmann::json to_json(const GanRunConfig& cfg);

struct HistoryRecord {
  std::int64_t step;
  double loss_D;
  double loss_G;
  double loss_G_gen;
};

/// Networks, optimizers and progress of one GAN run.
struct GanTrainState {
  GanRunConfig config;
  std::uint64_t seed;
  UNetGenerator generator;
  PatchDiscriminator discriminator;
  Adam opt_g;
  Adam opt_d;
  int epoch = 0;         // completed epochs
  std::int64_t step = 0;  // next step index
  std::vector<HistoryRecord> history;
  std::vector<std::string> checkpoints;

  /// Builds freshly initialized networks for `channels`-channel images.
  GanTrainState(const GanRunConfig& cfg, int channels, std::uint64_t seed);
};

struct DiscriminatorLosses {
  double loss_D;
  double real;
  double gen;
};

struct GeneratorLosses {
  double loss_G;
  double adv;
  double l1;
};

/// mean((score - target)^2) over the grid.
double mse_map_loss(const PatchScoreMap& map, double target);

/// Mean absolute per-pixel difference.
double l1_loss(const ImageTensor& a, const ImageTensor& b);

/// (wa * a + wb * b) / 2, the shape of both GAN objectives.
double halved_weighted_sum(double a, double wa, double b, double wb);

/// One discriminator update; generator parameters are left untouched.
/// `rng` drives generator dropout.
DiscriminatorLosses discriminator_step(GanTrainState& state, std::span<const GanPair> batch,
                                       const GanLossWeights& weights, Rng& rng);

/// One generator update; discriminator parameters are left untouched.
GeneratorLosses generator_step(GanTrainState& state, std::span<const GanPair> batch, const GanLossWeights& weights,
                               AdversarialMode mode, Rng& rng);

/// Generator loss and its gradient without an optimizer update; the gradient
/// stays in the generator parameters' grad buffers. Used by gradient probes.
GeneratorLosses generator_loss_and_grad(GanTrainState& state, std::span<const GanPair> batch,
                                        const GanLossWeights& weights, AdversarialMode mode, Rng& rng,
                                        bool adversarial_only = false);

struct GanTrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> resume_generator;
  std::optional<std::filesystem::path> resume_discriminator;
  std::optional<std::int64_t> max_steps;  // stop after this many total steps
  std::function<void(const HistoryRecord&)> on_step;
};

/// Alternates discriminator and generator updates over shuffled batches.
/// Byte-range pairs are converted to unit_signed first.
GanTrainState train_gan(const GanRunConfig& cfg, std::span<const GanPair> data, std::uint64_t seed,
                        const GanTrainOptions& options = {});

/// Paths written for a checkpoint at `epoch`.
std::filesystem::path generator_checkpoint_path(const std::filesystem::path& dir, int epoch);
std::filesystem::path discriminator_checkpoint_path(const std::filesystem::path& dir, int epoch);

/// Saves both networks with optimizer state; returns the generator path.
std::filesystem::path save_gan_state(const GanTrainState& state, const std::filesystem::path& dir);

/// Restores networks, optimizers, epoch and step from a checkpoint pair.
void load_gan_state(GanTrainState& state, const std::filesystem::path& generator_ckpt,
                    const std::filesystem::path& discriminator_ckpt);

/// Generator rebuilt from a checkpoint's config echo and parameters.
UNetGenerator load_generator(const std::filesystem::path& ckpt);

void write_history_csv(const std::vector<HistoryRecord>& history, const std::filesystem::path& path);
std::vector<HistoryRecord> read_history_csv(const std::filesystem::path& path);

/// Converts byte-range pairs to unit_signed; unit_signed pairs are copied.
std::vector<GanPair> to_unit_pairs(std::span<const GanPair> pairs);

}  // namespace npx
