#include <doctest.h>

#include <cmath>

#include "npx/errors.hpp"
#include "npx/gan_models.hpp"
#include "test_util.hpp"

using namespace npx;

namespace {

UNetGenerator make_generator(int size, int depth, int base, std::uint64_t seed = 1) {
  GeneratorConfig cfg;
  cfg.image_size = size;
  cfg.depth = depth;
  cfg.base_channels = base;
  UNetGenerator g(cfg);
  init_gan_params(g.params(), seed);
  return g;
}

PatchDiscriminator make_discriminator(int layers, int base, std::uint64_t seed = 2) {
  DiscriminatorConfig cfg;
  cfg.layers = layers;
  cfg.base_channels = base;
  PatchDiscriminator d(cfg);
  init_gan_params(d.params(), seed);
  return d;
}

Tensor random_batch(int n, int c, int s, Rng& rng) {
  Tensor t({n, c, s, s});
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : t.data) v = u(rng);
  return t;
}

// Output side of k x k / stride / pad 1 convolutions, written out per case.
int grid_oracle(int size, int layers) {
  int s = size;
  for (int i = 0; i < layers; ++i) s = s / 2;  // 4x4 stride 2 pad 1 on even sides halves
  return s - 2;                                // two 4x4 stride-1 pad-1 layers lose one each
}

}  // namespace

TEST_CASE("generator preserves shape and range") {
  Rng rng(1);
  struct Case {
    int n, size, depth;
  };
  for (const Case c : {Case{2, 64, 6}, Case{1, 128, 7}, Case{4, 256, 8}}) {
    CAPTURE(c.size);
    // Narrow widths keep the 256 case quick; widths do not enter the shape contract.
    const UNetGenerator g = make_generator(c.size, c.depth, 4);
    ag::NoGradGuard no_grad;
    const ag::Var y = g.forward(ag::Var(random_batch(c.n, 3, c.size, rng)), nn::ForwardContext{});
    CHECK(y.shape() == Shape{c.n, 3, c.size, c.size});
    for (double v : y.value().data) {
      REQUIRE(v >= -1.0);
      REQUIRE(v <= 1.0);
    }
  }
}

TEST_CASE("generator eval mode is deterministic and training dropout needs an rng") {
  Rng rng(2);
  const UNetGenerator g = make_generator(64, 6, 8);
  const Tensor x = random_batch(2, 3, 64, rng);
  ag::NoGradGuard no_grad;
  const Tensor a = g.forward(ag::Var(x), {}).value();
  const Tensor b = g.forward(ag::Var(x), {}).value();
  CHECK(a.data == b.data);
  CHECK_THROWS_AS(g.forward(ag::Var(x), nn::ForwardContext{true, false, nullptr}), ValidationError);
  Rng d1(3), d2(3);
  const Tensor t1 = g.forward(ag::Var(x), nn::ForwardContext{true, false, &d1}).value();
  const Tensor t2 = g.forward(ag::Var(x), nn::ForwardContext{true, false, &d2}).value();
  CHECK(t1.data == t2.data);
}

TEST_CASE("generator rejects mismatched inputs and bad configs") {
  const UNetGenerator g = make_generator(64, 6, 4);
  Rng rng(4);
  CHECK_THROWS_AS(g.forward(ag::Var(random_batch(1, 3, 32, rng)), {}), ValidationError);
  CHECK_THROWS_AS(g.forward(ag::Var(random_batch(1, 1, 64, rng)), {}), ValidationError);
  GeneratorConfig cfg;
  cfg.image_size = 64;
  cfg.depth = 7;  // 64 / 2^7 < 1
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.depth = 2;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.depth = 6;
  cfg.image_size = 96;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.image_size = 64;
  cfg.dropout_rate = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("skip connections wire encoder level i into decoder level depth - i") {
  const int depth = 5;
  const UNetGenerator g = make_generator(32, depth, 4);
  Rng rng(5);
  const Tensor x = random_batch(2, 3, 32, rng);
  ag::NoGradGuard no_grad;
  std::vector<Tensor> base_taps;
  GeneratorProbe base{0, &base_taps};
  g.forward(ag::Var(x), {}, &base);
  REQUIRE(base_taps.size() == static_cast<std::size_t>(depth));  // depth - 1 up blocks plus the output

  for (int level = 1; level < depth; ++level) {
    CAPTURE(level);
    std::vector<Tensor> taps;
    GeneratorProbe probe{level, &taps};
    g.forward(ag::Var(x), {}, &probe);
    // The copy of level i joins the decoder right after up block depth - i,
    // so the taps before that point are untouched and the next one moves.
    const std::size_t joined = static_cast<std::size_t>(depth - level);
    for (std::size_t t = 0; t < joined; ++t) CHECK(taps[t].data == base_taps[t].data);
    double diff = 0.0;
    for (std::size_t i = 0; i < taps[joined].numel(); ++i) {
      diff = std::max(diff, std::abs(taps[joined][i] - base_taps[joined][i]));
    }
    CHECK(diff > 1e-6);
  }
}

TEST_CASE("patch_grid_shape matches the size formula and the discriminator") {
  DiscriminatorConfig cfg;
  CHECK(patch_grid_shape(256, cfg) == std::pair{30, 30});
  CHECK(grid_oracle(256, 3) == 30);

  for (int layers : {2, 3, 4}) {
    cfg.layers = layers;
    const int smallest = min_discriminator_input(cfg);
    CHECK(patch_grid_shape(smallest, cfg) == std::pair{1, 1});
    CHECK_THROWS_AS(patch_grid_shape(smallest / 2, cfg), ValidationError);
  }

  Rng rng(6);
  for (int size : {64, 128, 256}) {
    for (int layers : {2, 3, 4}) {
      CAPTURE(size);
      CAPTURE(layers);
      cfg.layers = layers;
      const auto [gh, gw] = patch_grid_shape(size, cfg);
      CHECK(gh == grid_oracle(size, layers));
      CHECK(gh == gw);
      CHECK(gh < size);
      if (layers < 4) {
        DiscriminatorConfig deeper = cfg;
        deeper.layers = layers + 1;
        CHECK(std::abs(patch_grid_shape(size, deeper).first - gh / 2) <= 1);
      }
      const PatchDiscriminator d = make_discriminator(layers, 2);
      ag::NoGradGuard no_grad;
      const ag::Var out =
          d.forward(ag::Var(random_batch(1, 3, size, rng)), ag::Var(random_batch(1, 3, size, rng)), {});
      CHECK(out.shape() == Shape{1, 1, gh, gw});
    }
  }
}

TEST_CASE("discriminator scores lie in (0, 1) and inputs must match") {
  Rng rng(7);
  const PatchDiscriminator d = make_discriminator(2, 8);
  const ImageTensor a = test::random_unit_image(64, 64, ColorSpace::rgb, rng);
  const ImageTensor b = test::random_unit_image(64, 64, ColorSpace::rgb, rng);
  const PatchScoreMap map = discriminator_forward(d, a, b);
  CHECK(map.grid_h == patch_grid_shape(64, d.config()).first);
  map.validate();
  for (double s : map.scores) {
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
  const ImageTensor small = test::random_unit_image(32, 32, ColorSpace::rgb, rng);
  CHECK_THROWS_AS(discriminator_forward(d, a, small), ValidationError);
  PatchScoreMap bad{1, 1, {1.0}};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("gaussian initialization statistics") {
  const UNetGenerator g = make_generator(64, 6, 16, 9);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const nn::Parameter* p : g.params().trainable()) {
    if (p->role() != nn::InitRole::weight) continue;
    for (float v : p->values()) {
      sum += v;
      sq += static_cast<double>(v) * v;
      ++n;
    }
  }
  const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(mean) < 1e-3);
  CHECK(sd == doctest::Approx(0.02).epsilon(0.02));
}
