#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "npx/config.hpp"
#include "npx/errors.hpp"
#include "npx/gan_training.hpp"
#include "test_util.hpp"

using namespace npx;
using npx::test::random_unit_image;

namespace {

GanRunConfig tiny_config() {
  GanRunConfig cfg;
  cfg.image_size = 16;
  cfg.depth = 3;
  cfg.base_channels = 4;
  cfg.disc_layers = 2;
  cfg.disc_base_channels = 4;
  cfg.batch_size = 2;
  cfg.epochs = 3;
  return cfg;
}

std::vector<GanPair> random_pairs(int n, int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GanPair> pairs;
  for (int i = 0; i < n; ++i) {
    ImageTensor noisy = random_unit_image(size, size, ColorSpace::rgb, rng);
    ImageTensor clean = random_unit_image(size, size, ColorSpace::rgb, rng);
    pairs.emplace_back(std::move(noisy), std::move(clean), i % 2);
  }
  return pairs;
}

std::vector<std::vector<float>> snapshot(const nn::ParameterStore& store) {
  std::vector<std::vector<float>> out;
  for (const nn::Parameter* p : store.all()) out.emplace_back(p->values().begin(), p->values().end());
  return out;
}

bool bitwise_equal(const std::vector<std::vector<float>>& a, const std::vector<std::vector<float>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    if (std::memcmp(a[i].data(), b[i].data(), a[i].size() * sizeof(float)) != 0) return false;
  }
  return true;
}

Tensor stack(const std::vector<GanPair>& pairs, bool noisy) {
  std::vector<const ImageTensor*> imgs;
  for (const auto& p : pairs) imgs.push_back(noisy ? &p.noisy : &p.clean);
  return stack_batch(std::span<const ImageTensor* const>(imgs));
}

double mean_sq_to(const Tensor& t, double target) {
  double acc = 0.0;
  for (double v : t.data) acc += (v - target) * (v - target);
  return acc / static_cast<double>(t.numel());
}

}  // namespace

TEST_CASE("mse_map_loss against hand values") {
  CHECK(mse_map_loss(PatchScoreMap{1, 2, {1.0, 1.0}}, 1.0) == 0.0);
  CHECK(mse_map_loss(PatchScoreMap{1, 2, {0.0, 0.0}}, 1.0) == 1.0);
  CHECK(mse_map_loss(PatchScoreMap{2, 2, {0.5, 0.5, 0.5, 0.5}}, 0.0) == 0.25);
  CHECK(mse_map_loss(PatchScoreMap{1, 2, {0.2, 0.6}}, 1.0) == doctest::Approx((0.64 + 0.16) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(mse_map_loss(PatchScoreMap{0, 0, {}}, 1.0), ValidationError);
}

TEST_CASE("l1_loss matches a brute-force mean absolute difference") {
  Rng rng(1);
  const ImageTensor a = random_unit_image(16, 20, ColorSpace::rgb, rng);
  const ImageTensor b = random_unit_image(16, 20, ColorSpace::rgb, rng);
  double oracle = 0.0;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 20; ++x)
      for (int c = 0; c < 3; ++c) oracle += std::abs(static_cast<double>(a.at(y, x, c)) - b.at(y, x, c));
  CHECK(l1_loss(a, b) == doctest::Approx(oracle / (16 * 20 * 3)).epsilon(1e-12));
  CHECK(l1_loss(a, a) == 0.0);
  CHECK(l1_loss(a, b) == l1_loss(b, a));
  CHECK_THROWS_AS(l1_loss(a, random_unit_image(16, 16, ColorSpace::rgb, rng)), ValidationError);
  CHECK(halved_weighted_sum(0.4, 1.0, 0.2, 1.0) == doctest::Approx(0.3));
  CHECK(halved_weighted_sum(0.4, 0.0, 0.2, 1.0) == doctest::Approx(0.1));
}

TEST_CASE("discriminator loss equals the halved weighted sum of both terms") {
  const GanRunConfig cfg = tiny_config();
  const auto pairs = random_pairs(2, 16, 2);
  const GanLossWeights weights{0.7, 1.3, 1.0, 1.0};

  // Recompute the terms on an identically initialized state before any update.
  GanTrainState ref(cfg, 3, 11);
  Rng r1(5);
  const ag::Var noisy(stack(pairs, true)), clean(stack(pairs, false));
  ag::NoGradGuard no_grad;
  const ag::Var fake = ref.generator.forward(noisy, nn::ForwardContext{true, false, &r1});
  const nn::ForwardContext d_ctx{true, false, nullptr};
  const double real_term = mean_sq_to(ref.discriminator.forward(clean, noisy, d_ctx).value(), 1.0);
  const double gen_term = mean_sq_to(ref.discriminator.forward(fake, noisy, d_ctx).value(), 0.0);

  GanTrainState state(cfg, 3, 11);
  Rng r2(5);
  const DiscriminatorLosses got = discriminator_step(state, pairs, weights, r2);
  CHECK(got.real == doctest::Approx(real_term).epsilon(1e-12));
  CHECK(got.gen == doctest::Approx(gen_term).epsilon(1e-12));
  CHECK(got.loss_D == doctest::Approx((0.7 * real_term + 1.3 * gen_term) / 2).epsilon(1e-12));
}

TEST_CASE("a silenced discriminator head scores 0.5 everywhere") {
  GanTrainState state(tiny_config(), 3, 3);
  for (const char* name : {"head.conv.weight", "head.conv.bias"}) {
    nn::Parameter* p = state.discriminator.params().find(name);
    REQUIRE(p != nullptr);
    p->assign(std::vector<float>(p->size(), 0.0f));
  }
  const auto pairs = random_pairs(2, 16, 4);
  Rng rng(1);
  const DiscriminatorLosses d = discriminator_step(state, pairs, GanLossWeights{}, rng);
  CHECK(d.real == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(d.gen == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(d.loss_D == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("each step only updates its own network") {
  GanTrainState state(tiny_config(), 3, 5);
  const auto pairs = random_pairs(2, 16, 6);
  Rng rng(2);

  const auto g0 = snapshot(state.generator.params());
  const auto d0 = snapshot(state.discriminator.params());
  discriminator_step(state, pairs, GanLossWeights{}, rng);
  CHECK(bitwise_equal(snapshot(state.generator.params()), g0));
  CHECK_FALSE(bitwise_equal(snapshot(state.discriminator.params()), d0));

  const auto g1 = snapshot(state.generator.params());
  const auto d1 = snapshot(state.discriminator.params());
  generator_step(state, pairs, GanLossWeights{}, AdversarialMode::standard, rng);
  CHECK(bitwise_equal(snapshot(state.discriminator.params()), d1));
  CHECK_FALSE(bitwise_equal(snapshot(state.generator.params()), g1));
}

TEST_CASE("generator loss weights") {
  const auto pairs = random_pairs(2, 16, 7);
  GanTrainState state(tiny_config(), 3, 8);
  Rng rng(3);
  const GeneratorLosses both = generator_loss_and_grad(state, pairs, GanLossWeights{}, AdversarialMode::standard, rng);
  CHECK(both.loss_G == doctest::Approx((both.adv + both.l1) / 2).epsilon(1e-12));

  Rng rng2(3);
  GanTrainState fresh(tiny_config(), 3, 8);
  const GeneratorLosses l1_only =
      generator_loss_and_grad(fresh, pairs, GanLossWeights{1.0, 1.0, 0.0, 1.0}, AdversarialMode::standard, rng2);
  CHECK(l1_only.loss_G == doctest::Approx(l1_only.l1 / 2).epsilon(1e-12));
  CHECK(l1_only.l1 == doctest::Approx(both.l1).epsilon(1e-12));
}

TEST_CASE("the literal adversarial term carries no generator gradient") {
  GanTrainState state(tiny_config(), 3, 9);
  const auto pairs = random_pairs(2, 16, 10);
  Rng rng(4);
  const GeneratorLosses g =
      generator_loss_and_grad(state, pairs, GanLossWeights{}, AdversarialMode::paper_literal, rng, true);
  CHECK(std::isfinite(g.adv));
  for (const nn::Parameter* p : state.generator.params().trainable()) {
    for (double v : p->grad().data) REQUIRE(v == 0.0);
  }
  // The standard term does reach the generator.
  Rng rng2(4);
  generator_loss_and_grad(state, pairs, GanLossWeights{}, AdversarialMode::standard, rng2, true);
  double total = 0.0;
  for (const nn::Parameter* p : state.generator.params().trainable()) {
    for (double v : p->grad().data) total += std::abs(v);
  }
  CHECK(total > 0.0);
}

TEST_CASE("generator gradient agrees with central differences") {
  GanRunConfig cfg = tiny_config();
  cfg.dropout_rate = 0.0;
  GanTrainState state(cfg, 3, 12);
  const auto pairs = random_pairs(2, 16, 13);
  auto loss_at = [&] {
    Rng rng(0);
    return generator_loss_and_grad(state, pairs, GanLossWeights{}, AdversarialMode::standard, rng).loss_G;
  };
  loss_at();
  std::vector<nn::Parameter*> params = state.generator.params().trainable();
  struct Probe {
    nn::Parameter* p;
    std::size_t i;
    double analytic;
  };
  std::vector<Probe> probes;
  Rng pick(14);
  for (nn::Parameter* p : params) {
    for (int k = 0; k < 2; ++k) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p->size() - 1)(pick);
      probes.push_back({p, i, p->grad().data[i]});
    }
  }
  REQUIRE(probes.size() >= 20);

  int checked = 0;
  for (const Probe& pr : probes) {
    const float v0 = pr.p->values()[pr.i];
    const float up = v0 + 1e-5f, down = v0 - 1e-5f;  // small enough to stay clear of relu and |x| kinks
    pr.p->set(pr.i, up);
    const double lp = loss_at();
    pr.p->set(pr.i, down);
    const double lm = loss_at();
    pr.p->set(pr.i, v0);
    const double numeric = (lp - lm) / (static_cast<double>(up) - static_cast<double>(down));
    const double denom = std::max({std::abs(numeric), std::abs(pr.analytic), 1e-4});
    CAPTURE(pr.p->name());
    CHECK(std::abs(numeric - pr.analytic) / denom < 1e-3);
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto pairs = random_pairs(4, 16, 15);
  GanTrainOptions opts;
  opts.max_steps = 5;
  const GanTrainState a = train_gan(tiny_config(), pairs, 21, opts);
  const GanTrainState b = train_gan(tiny_config(), pairs, 21, opts);
  REQUIRE(a.history.size() == 5);
  REQUIRE(b.history.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(a.history[i].step == static_cast<std::int64_t>(i));
    CHECK(a.history[i].loss_D == b.history[i].loss_D);
    CHECK(a.history[i].loss_G == b.history[i].loss_G);
    CHECK(a.history[i].loss_G_gen == b.history[i].loss_G_gen);
  }
  const GanTrainState c = train_gan(tiny_config(), pairs, 22, opts);
  CHECK(c.history[0].loss_D != a.history[0].loss_D);
}

TEST_CASE("a non-finite loss raises a divergence error") {
  GanTrainState state(tiny_config(), 3, 16);
  nn::Parameter* p = state.generator.params().trainable().front();
  p->set(0, std::numeric_limits<float>::quiet_NaN());
  const auto pairs = random_pairs(2, 16, 17);
  Rng rng(1);
  CHECK_THROWS_AS(discriminator_step(state, pairs, GanLossWeights{}, rng), DivergenceError);
  CHECK_THROWS_AS(generator_step(state, pairs, GanLossWeights{}, AdversarialMode::standard, rng), DivergenceError);
}

TEST_CASE("train_gan rejects mismatched data") {
  const auto pairs = random_pairs(2, 32, 18);
  CHECK_THROWS_AS(train_gan(tiny_config(), pairs, 1), ValidationError);
  CHECK_THROWS_AS(train_gan(tiny_config(), std::span<const GanPair>{}, 1), ValidationError);
  GanTrainOptions opts;
  opts.resume_generator = "g.npxckpt";
  CHECK_THROWS_AS(train_gan(tiny_config(), random_pairs(2, 16, 19), 1, opts), ValidationError);
}

TEST_CASE("run config parsing") {
  const GanRunConfig defaults = parse_gan_config(nlohmann::json::object());
  CHECK(defaults.batch_size == 16);
  CHECK(defaults.lr == 2e-4);
  CHECK(defaults.beta1 == 0.5);
  CHECK(defaults.beta2 == 0.999);
  CHECK(defaults.epochs == 200);
  CHECK(defaults.image_size == 256);
  CHECK(defaults.depth == 8);
  CHECK(defaults.adversarial_mode == AdversarialMode::standard);

  const GanRunConfig small = parse_gan_config(nlohmann::json{{"batch_size", 4}});
  CHECK(small.batch_size == 4);
  CHECK(small.lr == 2e-4);

  try {
    parse_gan_config(nlohmann::json{{"lr", "fast"}});
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("lr") != std::string::npos);
  }
  try {
    parse_gan_config(nlohmann::json{{"lr", "fast"}, {"bogus", 1}});
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("lr") != std::string::npos);
    CHECK(msg.find("bogus") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_gan_config(nlohmann::json{{"batch_size", 0}}), ValidationError);
  CHECK_THROWS_AS(parse_gan_config(nlohmann::json{{"adversarial_mode", "sideways"}}), ValidationError);
  CHECK(parse_gan_config(nlohmann::json{{"adversarial_mode", "paper_literal"}}).adversarial_mode ==
        AdversarialMode::paper_literal);
  CHECK(parse_gan_config(nlohmann::json{{"weights", {{"w_G_real", 0.0}}}}).weights.w_G_real == 0.0);
}

TEST_CASE("history csv round-trips exactly") {
  test::TempDir dir("history");
  const std::vector<HistoryRecord> history{{0, 0.25, 0.5, 0.1234567890123}, {1, 1.0 / 3.0, 2e-17, 0.0}};
  write_history_csv(history, dir / "history.csv");
  const auto back = read_history_csv(dir / "history.csv");
  REQUIRE(back.size() == history.size());
  for (std::size_t i = 0; i < history.size(); ++i) {
    CHECK(back[i].step == history[i].step);
    CHECK(back[i].loss_D == history[i].loss_D);
    CHECK(back[i].loss_G == history[i].loss_G);
    CHECK(back[i].loss_G_gen == history[i].loss_G_gen);
  }
  CHECK_THROWS(read_history_csv(dir / "missing.csv"));
}
