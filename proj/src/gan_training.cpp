#include "npx/gan_training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "npx/artifacts.hpp"
#include "npx/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace npx {

namespace {

constexpr std::uint64_t kStreamGenInit = 0x67656e;
constexpr std::uint64_t kStreamDiscInit = 0x646973;
constexpr std::uint64_t kStreamEpoch = 0x65706f6368;
constexpr std::uint64_t kStreamStep = 0x73746570;

json generator_json(const GeneratorConfig& g) {
  return json{{"image_size", g.image_size},         {"depth", g.depth},
              {"base_channels", g.base_channels},   {"dropout_rate", g.dropout_rate},
              {"input_channels", g.input_channels}, {"output_channels", g.output_channels}};
}

GeneratorConfig generator_from_json(const json& j) {
  try {
    GeneratorConfig g;
    g.image_size = j.at("image_size").get<int>();
    g.depth = j.at("depth").get<int>();
    g.base_channels = j.at("base_channels").get<int>();
    g.dropout_rate = j.at("dropout_rate").get<double>();
    g.input_channels = j.at("input_channels").get<int>();
    g.output_channels = j.at("output_channels").get<int>();
    return g;
  } catch (const json::exception& e) {
    throw ParseError(std::string("generator config echo is malformed: ") + e.what());
  }
}

json discriminator_json(const DiscriminatorConfig& d) {
  return json{{"input_channels", d.input_channels}, {"layers", d.layers}, {"base_channels", d.base_channels}};
}

struct BatchTensors {
  ag::Var noisy;
  ag::Var clean;
};

BatchTensors stack_pairs(std::span<const GanPair> batch) {
  if (batch.empty()) throw ValidationError("GAN step needs a non-empty batch");
  std::vector<const ImageTensor*> noisy, clean;
  for (const auto& p : batch) {
    if (p.noisy.range() != ValueRange::unit_signed) throw ValidationError("GAN step expects unit_signed images");
    noisy.push_back(&p.noisy);
    clean.push_back(&p.clean);
  }
  return {ag::Var(stack_batch(std::span<const ImageTensor* const>(noisy))),
          ag::Var(stack_batch(std::span<const ImageTensor* const>(clean)))};
}

std::string last_checkpoint(const GanTrainState& state) {
  return state.checkpoints.empty() ? std::string() : state.checkpoints.back();
}

void check_finite(double v, const char* what, const GanTrainState& state) {
  if (!std::isfinite(v)) {
    throw DivergenceError(std::string(what) + " is not finite at step " + std::to_string(state.step), state.step,
                          last_checkpoint(state));
  }
}

}  // namespace

void GanLossWeights::validate() const {
  for (double w : {w_D_real, w_D_gen, w_G_real, w_G_gen}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("loss weights must be finite and non-negative");
  }
}

std::string to_string(AdversarialMode m) { return m == AdversarialMode::standard ? "standard" : "paper_literal"; }

AdversarialMode adversarial_mode_from_string(const std::string& s) {
  if (s == "standard") return AdversarialMode::standard;
  if (s == "paper_literal") return AdversarialMode::paper_literal;
  throw ValidationError("adversarial_mode must be 'standard' or 'paper_literal', got '" + s + "'");
}

void GanRunConfig::validate() const {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("betas must lie in [0, 1)");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (checkpoint_every < 1) throw ValidationError("checkpoint_every must be >= 1");
  weights.validate();
  generator_config(3).validate();
  discriminator_config(3).validate();
  patch_grid_shape(image_size, discriminator_config(3));
}

GeneratorConfig GanRunConfig::generator_config(int channels) const {
  return GeneratorConfig{image_size, depth, base_channels, dropout_rate, channels, channels};
}

DiscriminatorConfig GanRunConfig::discriminator_config(int channels) const {
  return DiscriminatorConfig{2 * channels, disc_layers, disc_base_channels};
}

json to_json(const GanRunConfig& c) {
  return json{{"batch_size", c.batch_size},
              {"lr", c.lr},
              {"betas", {c.beta1, c.beta2}},
              {"epochs", c.epochs},
              {"image_size", c.image_size},
              {"depth", c.depth},
              {"adversarial_mode", to_string(c.adversarial_mode)},
              {"weights",
               {{"w_D_real", c.weights.w_D_real},
                {"w_D_gen", c.weights.w_D_gen},
                {"w_G_real", c.weights.w_G_real},
                {"w_G_gen", c.weights.w_G_gen}}},
              {"seed", c.seed},
              {"checkpoint_every", c.checkpoint_every},
              {"base_channels", c.base_channels},
              {"dropout_rate", c.dropout_rate},
              {"disc_layers", c.disc_layers},
              {"disc_base_channels", c.disc_base_channels}};
}

GanTrainState::GanTrainState(const GanRunConfig& cfg, int channels, std::uint64_t run_seed)
    : config(cfg),
      seed(run_seed),
      generator(cfg.generator_config(channels)),
      discriminator(cfg.discriminator_config(channels)),
      opt_g(generator.params().trainable(), cfg.adam()),
      opt_d(discriminator.params().trainable(), cfg.adam()) {
  init_gan_params(generator.params(), derive_seed(run_seed, kStreamGenInit));
  init_gan_params(discriminator.params(), derive_seed(run_seed, kStreamDiscInit));
}

double mse_map_loss(const PatchScoreMap& map, double target) {
  if (map.scores.empty()) throw ValidationError("empty patch score map");
  double acc = 0.0;
  for (double s : map.scores) acc += (s - target) * (s - target);
  return acc / static_cast<double>(map.scores.size());
}

double l1_loss(const ImageTensor& a, const ImageTensor& b) {
  if (!a.same_layout(b)) throw ValidationError("l1_loss: images differ in shape, range or colorspace");
  double acc = 0.0;
  const auto pa = a.pixels(), pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) acc += std::abs(static_cast<double>(pa[i]) - pb[i]);
  return acc / static_cast<double>(pa.size());
}

double halved_weighted_sum(double a, double wa, double b, double wb) { return (wa * a + wb * b) / 2.0; }

DiscriminatorLosses discriminator_step(GanTrainState& state, std::span<const GanPair> batch,
                                       const GanLossWeights& weights, Rng& rng) {
  const BatchTensors t = stack_pairs(batch);
  ag::Var fake;
  {
    ag::NoGradGuard no_grad;
    fake = state.generator.forward(t.noisy, nn::ForwardContext{true, false, &rng});
  }
  const nn::ForwardContext d_ctx{true, true, nullptr};
  state.opt_d.zero_grad();
  const ag::Var real_loss = ag::mse_to_constant(state.discriminator.forward(t.clean, t.noisy, d_ctx), 1.0);
  const ag::Var gen_loss = ag::mse_to_constant(state.discriminator.forward(ag::detach(fake), t.noisy, d_ctx), 0.0);
  const ag::Var loss = ag::weighted_sum(real_loss, weights.w_D_real / 2.0, gen_loss, weights.w_D_gen / 2.0);
  check_finite(loss.item(), "discriminator loss", state);
  ag::backward(loss);
  state.opt_d.step();
  return {loss.item(), real_loss.item(), gen_loss.item()};
}

GeneratorLosses generator_loss_and_grad(GanTrainState& state, std::span<const GanPair> batch,
                                        const GanLossWeights& weights, AdversarialMode mode, Rng& rng,
                                        bool adversarial_only) {
  const BatchTensors t = stack_pairs(batch);
  state.opt_g.zero_grad();
  state.opt_d.zero_grad();
  const ag::Var fake = state.generator.forward(t.noisy, nn::ForwardContext{true, true, &rng});
  const nn::ForwardContext d_ctx{true, false, nullptr};
  const ag::Var adv = mode == AdversarialMode::standard
                          ? ag::mse_to_constant(state.discriminator.forward(fake, t.noisy, d_ctx), 1.0)
                          : ag::mse_to_constant(state.discriminator.forward(t.clean, t.noisy, d_ctx), 0.0);
  const ag::Var l1 = ag::l1(fake, t.clean);
  const ag::Var loss = adversarial_only ? ag::scale(adv, weights.w_G_real / 2.0)
                                        : ag::weighted_sum(adv, weights.w_G_real / 2.0, l1, weights.w_G_gen / 2.0);
  check_finite(loss.item(), "generator loss", state);
  ag::backward(loss);
  return {halved_weighted_sum(adv.item(), weights.w_G_real, l1.item(), weights.w_G_gen), adv.item(), l1.item()};
}

GeneratorLosses generator_step(GanTrainState& state, std::span<const GanPair> batch, const GanLossWeights& weights,
                               AdversarialMode mode, Rng& rng) {
  const GeneratorLosses losses = generator_loss_and_grad(state, batch, weights, mode, rng);
  state.opt_g.step();
  return losses;
}

std::vector<GanPair> to_unit_pairs(std::span<const GanPair> pairs) {
  std::vector<GanPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.noisy.range() == ValueRange::byte) {
      out.emplace_back(to_unit(p.noisy), to_unit(p.clean), p.class_id);
    } else {
      out.push_back(p);
    }
  }
  return out;
}

fs::path generator_checkpoint_path(const fs::path& dir, int epoch) {
  char name[64];
  std::snprintf(name, sizeof name, "generator_e%04d%s", epoch, kCheckpointExtension);
  return dir / name;
}

fs::path discriminator_checkpoint_path(const fs::path& dir, int epoch) {
  char name[64];
  std::snprintf(name, sizeof name, "discriminator_e%04d%s", epoch, kCheckpointExtension);
  return dir / name;
}

fs::path save_gan_state(const GanTrainState& state, const fs::path& dir) {
  json g_cfg{{"run", to_json(state.config)}, {"generator", generator_json(state.generator.config())}};
  json d_cfg{{"run", to_json(state.config)}, {"discriminator", discriminator_json(state.discriminator.config())}};
  const fs::path g_path = generator_checkpoint_path(dir, state.epoch);
  save_checkpoint(capture_checkpoint(Component::generator, state.generator.params(), &state.opt_g, state.seed,
                                     state.epoch, state.step, std::move(g_cfg)),
                  g_path);
  save_checkpoint(capture_checkpoint(Component::discriminator, state.discriminator.params(), &state.opt_d,
                                     state.seed, state.epoch, state.step, std::move(d_cfg)),
                  discriminator_checkpoint_path(dir, state.epoch));
  return g_path;
}

void load_gan_state(GanTrainState& state, const fs::path& generator_ckpt, const fs::path& discriminator_ckpt) {
  const Checkpoint g = load_checkpoint(generator_ckpt, Component::generator);
  const Checkpoint d = load_checkpoint(discriminator_ckpt, Component::discriminator);
  if (g.epoch != d.epoch || g.step != d.step) {
    throw ValidationError("generator and discriminator checkpoints come from different points of a run");
  }
  restore_checkpoint(g, state.generator.params(), &state.opt_g);
  restore_checkpoint(d, state.discriminator.params(), &state.opt_d);
  state.epoch = g.epoch;
  state.step = g.step;
  state.seed = g.seed;
  state.checkpoints.push_back(generator_ckpt.string());
}

UNetGenerator load_generator(const fs::path& ckpt_path) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path, Component::generator);
  if (!ckpt.config.contains("generator")) throw ParseError("generator checkpoint lacks its config echo");
  UNetGenerator gen(generator_from_json(ckpt.config["generator"]));
  restore_checkpoint(ckpt, gen.params(), nullptr);
  return gen;
}

GanTrainState train_gan(const GanRunConfig& cfg, std::span<const GanPair> data, std::uint64_t seed,
                        const GanTrainOptions& options) {
  cfg.validate();
  if (data.empty()) throw ValidationError("train_gan needs at least one pair");
  const std::vector<GanPair> pairs = to_unit_pairs(data);
  const ImageTensor& first = pairs.front().noisy;
  for (const auto& p : pairs) {
    if (!p.noisy.same_layout(first)) throw ValidationError("training pairs differ in layout");
  }
  if (first.height() != cfg.image_size || first.width() != cfg.image_size) {
    throw ValidationError("training images are " + std::to_string(first.height()) + "x" +
                          std::to_string(first.width()) + ", config expects image_size " +
                          std::to_string(cfg.image_size));
  }

  GanTrainState state(cfg, first.channels(), seed);
  if (options.resume_generator || options.resume_discriminator) {
    if (!options.resume_generator || !options.resume_discriminator) {
      throw ValidationError("resuming needs both generator and discriminator checkpoints");
    }
    load_gan_state(state, *options.resume_generator, *options.resume_discriminator);
  }

  const std::size_t n = pairs.size();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(state.seed, kStreamEpoch, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t begin = 0; begin < n; begin += batch) {
      if (options.max_steps && state.step >= *options.max_steps) return state;
      std::vector<GanPair> items;
      for (std::size_t i = begin; i < std::min(n, begin + batch); ++i) items.push_back(pairs[order[i]]);
      Rng rng(derive_seed(state.seed, kStreamStep, static_cast<std::uint64_t>(state.step)));
      const DiscriminatorLosses d = discriminator_step(state, items, cfg.weights, rng);
      const GeneratorLosses g = generator_step(state, items, cfg.weights, cfg.adversarial_mode, rng);
      const HistoryRecord rec{state.step, d.loss_D, g.loss_G, g.l1};
      state.history.push_back(rec);
      if (options.on_step) options.on_step(rec);
      ++state.step;
    }
    state.epoch = epoch + 1;
    if (options.checkpoint_dir && (state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs)) {
      state.checkpoints.push_back(save_gan_state(state, *options.checkpoint_dir).string());
    }
  }
  return state;
}

void write_history_csv(const std::vector<HistoryRecord>& history, const fs::path& path) {
  std::ostringstream os;
  os << "step,loss_D,loss_G,loss_G_gen\n";
  char line[160];
  for (const auto& h : history) {
    std::snprintf(line, sizeof line, "%lld,%.17g,%.17g,%.17g\n", static_cast<long long>(h.step), h.loss_D, h.loss_G,
                  h.loss_G_gen);
    os << line;
  }
  write_file_atomic(path, os.str());
}

std::vector<HistoryRecord> read_history_csv(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  if (line != "step,loss_D,loss_G,loss_G_gen") throw ParseError("unexpected history header in " + path.string());
  std::vector<HistoryRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    HistoryRecord h{};
    long long step = 0;
    if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf", &step, &h.loss_D, &h.loss_G, &h.loss_G_gen) != 4) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed history row");
    }
    h.step = step;
    out.push_back(h);
  }
  return out;
}

}  // namespace npx
