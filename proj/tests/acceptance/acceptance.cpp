// Acceptance suite: one PASS/FAIL line per criterion, details indented below.
// Exit status is non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "npx/artifacts.hpp"
#include "npx/degradation.hpp"
#include "npx/gan_training.hpp"
#include "npx/metrics.hpp"
#include "npx/siamese.hpp"
#include "test_util.hpp"

using namespace npx;
using npx::test::TempDir;

namespace {

class Criterion {
 public:
  void check(bool ok, const std::string& detail) {
    pass_ = pass_ && ok;
    lines_.push_back(std::string(ok ? "ok   " : "FAIL ") + detail);
  }
  void error(const std::string& what) { check(false, "exception: " + what); }
  bool pass() const { return pass_; }
  const std::vector<std::string>& lines() const { return lines_; }

 private:
  bool pass_ = true;
  std::vector<std::string> lines_;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string fmt(const char* f, double a, double b, double c) {
  char buf[192];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

ImageTensor gray_from(const std::vector<double>& v, int h, int w) {
  std::vector<float> px(v.begin(), v.end());
  return ImageTensor(h, w, ColorSpace::gray, ValueRange::byte, std::move(px));
}

GanRunConfig tiny_gan() {
  GanRunConfig cfg;
  cfg.image_size = 16;
  cfg.depth = 3;
  cfg.base_channels = 4;
  cfg.disc_layers = 2;
  cfg.disc_base_channels = 4;
  cfg.batch_size = 2;
  cfg.epochs = 4;
  return cfg;
}

std::vector<GanPair> random_pairs(int n, int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GanPair> pairs;
  for (int i = 0; i < n; ++i) {
    ImageTensor noisy = test::random_unit_image(size, size, ColorSpace::rgb, rng);
    ImageTensor clean = test::random_unit_image(size, size, ColorSpace::rgb, rng);
    pairs.emplace_back(std::move(noisy), std::move(clean), i % 2);
  }
  return pairs;
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

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.numel());
}

Tensor random_batch(int n, int c, int s, Rng& rng) {
  Tensor t({n, c, s, s});
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : t.data) v = u(rng);
  return t;
}

// Output side of the patch discriminator, one layer at a time.
int grid_oracle(int size, int layers) {
  int s = size;
  for (int i = 0; i < layers; ++i) s = (s + 2 - 4) / 2 + 1;  // 4x4, stride 2, pad 1
  for (int i = 0; i < 2; ++i) s = s + 2 - 4 + 1;             // 4x4, stride 1, pad 1
  return s;
}

void criterion_1(Criterion& c) {
  struct Case {
    const char* name;
    double got, want, tol;
  };
  const Case cases[] = {
      {"psnr(106.709)", psnr(106.709), 27.849, 0.01},
      {"psnr(14.971)", psnr(14.971), 36.378, 0.01},
      {"rmse(104.567)", rmse_from_mse(104.567), 10.225, 0.001},
      {"rmse(71.015)", rmse_from_mse(71.015), 8.429, 0.001},
  };
  for (const Case& k : cases) {
    c.check(std::abs(k.got - k.want) <= k.tol,
            std::string(k.name) + fmt(" = %.5f, expected %.3f", k.got, k.want) + fmt(" +/- %g", k.tol));
  }
}

void criterion_2(Criterion& c) {
  Rng rng(2024);
  double worst = 0.0, self_worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const ImageTensor x = test::random_byte_image(16, 16, ColorSpace::gray, rng);
    const ImageTensor y = test::random_byte_image(16, 16, ColorSpace::gray, rng);
    worst = std::max(worst, std::abs(ssim(x, y) - test::ssim_brute_force(x, y, 11, 1.5)));
    self_worst = std::max(self_worst, std::abs(ssim(x, x) - 1.0));
  }
  c.check(worst < 1e-6, fmt("max |ssim - brute force| over 20 pairs = %.3g (< 1e-6)", worst));
  c.check(self_worst <= 1e-9, fmt("max |ssim(x,x) - 1| = %.3g (<= 1e-9)", self_worst));
}

void criterion_3(Criterion& c) {
  c.check(contrastive_loss(0.0, 0, 1.0) == 0.0, "contrastive(d=0, y=0) = 0");
  bool beyond = true;
  for (double d : {1.0, 1.2, 3.0}) beyond = beyond && contrastive_loss(d, 1, 1.0) == 0.0;
  c.check(beyond, "contrastive(d >= m, y=1) = 0");
  const double v = contrastive_loss(0.4, 1, 1.0);
  c.check(std::abs(v - 0.36) < 1e-12, fmt("contrastive(0.4, y=1, m=1) = %.15f", v));

  double worst_c = 0.0;
  const double h = 1e-6;
  for (int y : {0, 1}) {
    for (double d : {0.05, 0.3, 0.6, 0.9, 1.4, 2.0}) {
      const double numeric = (contrastive_loss(d + h, y, 1.0) - contrastive_loss(d - h, y, 1.0)) / (2 * h);
      worst_c = std::max(worst_c, std::abs(contrastive_loss_grad(d, y, 1.0) - numeric));
    }
  }
  c.check(worst_c < 1e-6, fmt("contrastive gradient vs central difference: max abs err %.3g (< 1e-6)", worst_c));

  // Generator loss gradient on a tiny model, no dropout so the loss is a
  // deterministic function of the parameters.
  GanRunConfig cfg = tiny_gan();
  cfg.dropout_rate = 0.0;
  GanTrainState state(cfg, 3, 12);
  const auto pairs = random_pairs(2, 16, 13);
  auto loss_at = [&] {
    Rng rng(0);
    return generator_loss_and_grad(state, pairs, GanLossWeights{}, AdversarialMode::standard, rng).loss_G;
  };
  loss_at();
  struct Probe {
    nn::Parameter* p;
    std::size_t i;
    double analytic;
  };
  std::vector<Probe> probes;
  Rng pick(14);
  for (nn::Parameter* p : state.generator.params().trainable()) {
    for (int k = 0; k < 2; ++k) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p->size() - 1)(pick);
      probes.push_back({p, i, p->grad().data[i]});
    }
  }
  double worst_g = 0.0;
  for (const Probe& pr : probes) {
    const float v0 = pr.p->values()[pr.i];
    const float up = v0 + 1e-5f, down = v0 - 1e-5f;
    pr.p->set(pr.i, up);
    const double lp = loss_at();
    pr.p->set(pr.i, down);
    const double lm = loss_at();
    pr.p->set(pr.i, v0);
    const double numeric = (lp - lm) / (static_cast<double>(up) - static_cast<double>(down));
    const double denom = std::max({std::abs(numeric), std::abs(pr.analytic), 1e-4});
    worst_g = std::max(worst_g, std::abs(numeric - pr.analytic) / denom);
  }
  c.check(worst_g < 1e-3 && probes.size() >= 20,
          fmt("generator gradient vs central difference: %.0f probes, max rel err %.3g (< 1e-3)",
              static_cast<double>(probes.size()), worst_g));

  // Weighted-mean identities against terms recomputed from the same state.
  const GanLossWeights w{0.7, 1.3, 0.8, 1.6};
  const auto batch = random_pairs(2, 16, 2);
  double real_term = 0.0, gen_term = 0.0, adv_term = 0.0, l1_term = 0.0;
  {
    GanTrainState ref(tiny_gan(), 3, 11);
    Rng r1(5);
    const ag::Var noisy(stack(batch, true)), clean(stack(batch, false));
    ag::NoGradGuard no_grad;
    const ag::Var fake = ref.generator.forward(noisy, nn::ForwardContext{true, false, &r1});
    const nn::ForwardContext d_ctx{true, false, nullptr};
    real_term = mean_sq_to(ref.discriminator.forward(clean, noisy, d_ctx).value(), 1.0);
    gen_term = mean_sq_to(ref.discriminator.forward(fake, noisy, d_ctx).value(), 0.0);
  }
  {
    GanTrainState ref(tiny_gan(), 3, 11);
    Rng r1(6);
    const ag::Var noisy(stack(batch, true)), clean(stack(batch, false));
    ag::NoGradGuard no_grad;
    const ag::Var fake = ref.generator.forward(noisy, nn::ForwardContext{true, false, &r1});
    adv_term = mean_sq_to(ref.discriminator.forward(fake, noisy, nn::ForwardContext{true, false, nullptr}).value(), 1.0);
    l1_term = mean_abs_diff(fake.value(), clean.value());
  }
  GanTrainState state_d(tiny_gan(), 3, 11);
  Rng r2(5);
  const DiscriminatorLosses dl = discriminator_step(state_d, batch, w, r2);
  const double want_d = (w.w_D_real * real_term + w.w_D_gen * gen_term) / 2;
  c.check(std::abs(dl.loss_D - want_d) < 1e-9 && std::abs(dl.real - real_term) < 1e-9 &&
              std::abs(dl.gen - gen_term) < 1e-9,
          fmt("discriminator loss %.12f vs halved weighted sum %.12f", dl.loss_D, want_d));
  GanTrainState state_g(tiny_gan(), 3, 11);
  Rng r3(6);
  const GeneratorLosses gl = generator_loss_and_grad(state_g, batch, w, AdversarialMode::standard, r3);
  const double want_g = (w.w_G_real * adv_term + w.w_G_gen * l1_term) / 2;
  c.check(std::abs(gl.loss_G - want_g) < 1e-9 && std::abs(gl.adv - adv_term) < 1e-9 &&
              std::abs(gl.l1 - l1_term) < 1e-9,
          fmt("generator loss %.12f vs halved weighted sum %.12f", gl.loss_G, want_g));
}

void criterion_4(Criterion& c) {
  Rng rng(4);
  for (const auto& [size, depth] : std::vector<std::pair<int, int>>{{64, 6}, {128, 7}, {256, 8}}) {
    GeneratorConfig gc;
    gc.image_size = size;
    gc.depth = depth;
    gc.base_channels = 4;
    UNetGenerator g(gc);
    init_gan_params(g.params(), 1);
    ag::NoGradGuard no_grad;
    const ag::Var out = g.forward(ag::Var(random_batch(1, 3, size, rng)), {});
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : out.value().data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const bool shape_ok = out.shape() == Shape{1, 3, size, size};
    c.check(shape_ok && lo >= -1.0 && hi <= 1.0,
            fmt("generator %.0f px: shape preserved, output range [%.4f, %.4f]", size, lo, hi));
  }

  int agree = 0, total = 0;
  for (int size : {64, 128, 256}) {
    for (int layers : {2, 3, 4}) {
      DiscriminatorConfig dc;
      dc.layers = layers;
      dc.base_channels = 2;
      PatchDiscriminator d(dc);
      init_gan_params(d.params(), 2);
      ag::NoGradGuard no_grad;
      const ag::Var out =
          d.forward(ag::Var(random_batch(1, 3, size, rng)), ag::Var(random_batch(1, 3, size, rng)), {});
      const auto [gh, gw] = patch_grid_shape(size, dc);
      const int o = grid_oracle(size, layers);
      agree += out.shape() == Shape{1, 1, gh, gw} && gh == o && gw == o;
      ++total;
    }
  }
  c.check(agree == total, fmt("patch map shape equals patch_grid_shape and the layer oracle: %.0f/%.0f configs",
                              agree, total));

  const int depth = 6;
  GeneratorConfig gc;
  gc.image_size = 64;
  gc.depth = depth;
  gc.base_channels = 4;
  UNetGenerator g(gc);
  init_gan_params(g.params(), 3);
  const Tensor x = random_batch(1, 3, 64, rng);
  ag::NoGradGuard no_grad;
  std::vector<Tensor> base_taps;
  GeneratorProbe base{0, &base_taps};
  g.forward(ag::Var(x), {}, &base);
  int wired = 0;
  for (int level = 1; level < depth; ++level) {
    std::vector<Tensor> taps;
    GeneratorProbe probe{level, &taps};
    g.forward(ag::Var(x), {}, &probe);
    const std::size_t joined = static_cast<std::size_t>(depth - level);
    bool before = true;
    for (std::size_t t = 0; t < joined; ++t) before = before && taps[t].data == base_taps[t].data;
    double diff = 0.0;
    for (std::size_t i = 0; i < taps[joined].numel(); ++i) {
      diff = std::max(diff, std::abs(taps[joined][i] - base_taps[joined][i]));
    }
    wired += before && diff > 1e-6;
  }
  c.check(wired == depth - 1,
          fmt("skip probe: encoder level i reaches decoder block depth - i for %.0f/%.0f levels", wired, depth - 1));
}

void criterion_5(Criterion& c) {
  SyntheticCorpusSpec spec;
  spec.classes = 4;
  spec.per_class = 4;
  spec.size = 64;
  spec.seed = 5;
  const SyntheticCorpus corpus = make_synthetic_corpus(spec);
  const std::vector<GanPair> pairs = corpus.pairs();

  GanRunConfig cfg;
  cfg.image_size = 64;
  cfg.depth = 6;
  cfg.batch_size = 4;
  cfg.base_channels = 16;
  cfg.disc_base_channels = 16;
  cfg.epochs = 75;  // 16 pairs / batch 4 = 4 steps per epoch
  cfg.checkpoint_every = 1000;
  GanTrainOptions opts;
  opts.max_steps = 300;
  const GanTrainState st = train_gan(cfg, pairs, 1, opts);
  const std::size_t n = st.history.size();
  c.check(n == 300, fmt("%.0f pairs, %.0f steps", static_cast<double>(pairs.size()), static_cast<double>(n)));
  if (n < 20) return;
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += st.history[i].loss_G_gen / 10;
    last += st.history[n - 10 + i].loss_G_gen / 10;
  }
  c.check(last <= 0.6 * first, fmt("L1 term: first 10 mean %.4f, last 10 mean %.4f, ratio %.3f (<= 0.6)", first,
                                   last, last / first));

  std::vector<ImageTensor> noisy;
  for (const auto& p : pairs) noisy.push_back(to_unit(p.noisy));
  const auto gen = generator_forward(st.generator, noisy);
  double s_gen = 0.0, s_noisy = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const ImageTensor clean = metric_gray(pairs[i].clean);
    s_gen += ssim(metric_gray(to_byte(gen[i])), clean) / static_cast<double>(pairs.size());
    s_noisy += ssim(metric_gray(pairs[i].noisy), clean) / static_cast<double>(pairs.size());
  }
  c.check(s_gen > s_noisy, fmt("mean SSIM to clean: generated %.4f, noisy %.4f", s_gen, s_noisy));
}

void criterion_6(Criterion& c) {
  SyntheticCorpusSpec spec;
  spec.classes = 5;
  spec.per_class = 8;
  spec.size = 64;
  spec.seed = 3;
  const SyntheticCorpus corpus = make_synthetic_corpus(spec);

  SiameseRunConfig run;
  run.model.backbone = BackboneKind::tiny_cnn;
  run.model.image_size = 64;
  run.pairs_per_epoch = 500;
  run.val_pairs = 100;
  run.epochs = 5;
  run.batch = 8;
  const SiameseTrainResult trained = train_siamese(run, corpus.clean, 11);
  Rng rng(9);
  const OneShotReport r = evaluate_one_shot(trained.net, corpus.clean, corpus.clean, 300, 5, rng);
  c.check(r.accuracy >= 0.60, fmt("trained 5-way one-shot accuracy %.3f over 300 episodes (>= 0.60)", r.accuracy));

  SiameseNetwork untrained(run.model);
  init_siamese_params(untrained, 100);
  Rng rng0(5);
  const OneShotReport b = evaluate_one_shot(untrained, corpus.clean, corpus.clean, 500, 5, rng0);
  c.check(std::abs(b.accuracy - 0.20) <= 0.05,
          fmt("untrained baseline accuracy %.3f over 500 episodes (0.20 +/- 0.05)", b.accuracy));
}

void criterion_7(Criterion& c) {
  GanTrainState state(tiny_gan(), 3, 9);
  const auto pairs = random_pairs(2, 16, 10);
  Rng rng(4);
  const GeneratorLosses g =
      generator_loss_and_grad(state, pairs, GanLossWeights{}, AdversarialMode::paper_literal, rng, true);
  double literal = 0.0;
  std::size_t count = 0;
  for (const nn::Parameter* p : state.generator.params().trainable()) {
    for (double v : p->grad().data) literal = std::max(literal, std::abs(v));
    count += p->size();
  }
  c.check(std::isfinite(g.adv) && literal == 0.0,
          fmt("paper_literal adversarial term: max |grad| %.3g over %.0f generator parameters", literal,
              static_cast<double>(count)));
  Rng rng2(4);
  generator_loss_and_grad(state, pairs, GanLossWeights{}, AdversarialMode::standard, rng2, true);
  double standard = 0.0;
  for (const nn::Parameter* p : state.generator.params().trainable()) {
    for (double v : p->grad().data) standard = std::max(standard, std::abs(v));
  }
  c.check(standard > 0.0, fmt("standard adversarial term for contrast: max |grad| %.3g", standard));
}

void criterion_8(Criterion& c) {
  const auto pairs = random_pairs(4, 16, 15);
  GanTrainOptions five;
  five.max_steps = 5;
  const GanTrainState a = train_gan(tiny_gan(), pairs, 21, five);
  const GanTrainState b = train_gan(tiny_gan(), pairs, 21, five);
  bool same = a.history.size() == 5 && b.history.size() == 5;
  for (std::size_t i = 0; same && i < 5; ++i) {
    same = a.history[i].loss_D == b.history[i].loss_D && a.history[i].loss_G == b.history[i].loss_G &&
           a.history[i].loss_G_gen == b.history[i].loss_G_gen;
  }
  c.check(same, "first five (loss_D, loss_G, L1) tuples identical for the same seed");

  TempDir dir("acceptance");
  const auto ckpt = save_gan_state(a, dir / "single");
  const UNetGenerator back = load_generator(ckpt);
  Rng rng(7);
  std::vector<ImageTensor> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(test::random_unit_image(16, 16, ColorSpace::rgb, rng));
  const auto ya = generator_forward(a.generator, batch);
  const auto yb = generator_forward(back, batch);
  bool bitwise = ya.size() == yb.size();
  for (std::size_t i = 0; bitwise && i < ya.size(); ++i) {
    const auto pa = ya[i].pixels(), pb = yb[i].pixels();
    bitwise = std::memcmp(pa.data(), pb.data(), pa.size_bytes()) == 0;
  }
  c.check(bitwise, "generator save, load, forward is bitwise identical");

  const auto resume_pairs = random_pairs(5, 16, 8);
  const GanTrainState full = train_gan(tiny_gan(), resume_pairs, 42);
  GanRunConfig half = tiny_gan();
  half.epochs = 2;
  GanTrainOptions first;
  first.checkpoint_dir = dir / "resume";
  const GanTrainState h1 = train_gan(half, resume_pairs, 42, first);
  GanTrainOptions resume;
  resume.resume_generator = generator_checkpoint_path(dir / "resume", 2);
  resume.resume_discriminator = discriminator_checkpoint_path(dir / "resume", 2);
  const GanTrainState h2 = train_gan(tiny_gan(), resume_pairs, 42, resume);
  bool continuous = full.history.size() == h1.history.size() + h2.history.size();
  for (std::size_t i = 0; continuous && i < h2.history.size(); ++i) {
    const HistoryRecord& ref = full.history[h1.history.size() + i];
    continuous = h2.history[i].step == ref.step && h2.history[i].loss_D == ref.loss_D &&
                 h2.history[i].loss_G == ref.loss_G && h2.history[i].loss_G_gen == ref.loss_G_gen;
  }
  c.check(continuous, fmt("2 epochs + resume for 2 matches 4 straight epochs over %.0f steps",
                          static_cast<double>(full.history.size())));
}

void criterion_9(Criterion& c) {
  Rng rng(6);
  std::normal_distribution<double> n(128.0, 30.0);
  const int side = 128;
  std::vector<double> v;
  for (int i = 0; i < side * side; ++i) v.push_back(std::clamp(std::round(n(rng)), 0.0, 255.0));
  const BrisqueFeatures f = brisque_features(gray_from(v, side, side));
  c.check(f[0] >= 1.7 && f[0] <= 2.3, fmt("gaussian noise (std 30, 128x128) MSCN shape %.3f (in [1.7, 2.3])", f[0]));

  const SyntheticCorpus corpus = make_synthetic_corpus(SyntheticCorpusSpec{});
  int images = 0, finite = 0;
  for (const auto* set : {&corpus.clean, &corpus.noisy}) {
    for (const auto& s : set->samples()) {
      const BrisqueFeatures g = brisque_features(metric_gray(s.image));
      ++images;
      finite += std::all_of(g.begin(), g.end(), [](double x) { return std::isfinite(x); });
    }
  }
  c.check(finite == images, fmt("all 36 features finite on %.0f/%.0f desk corpus images", finite, images));
}

}  // namespace

int main() {
  const std::vector<std::function<void(Criterion&)>> criteria = {
      criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
      criterion_6, criterion_7, criterion_8, criterion_9,
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Criterion c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i](c);
    } catch (const std::exception& e) {
      c.error(e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %zu: %s (%.1fs)\n", i + 1, c.pass() ? "PASS" : "FAIL", secs);
    for (const auto& line : c.lines()) std::printf("    %s\n", line.c_str());
    std::fflush(stdout);
    failed += !c.pass();
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
