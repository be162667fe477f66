#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "npx/degradation.hpp"
#include "npx/errors.hpp"
#include "npx/siamese.hpp"
#include "test_util.hpp"

using namespace npx;
using npx::test::random_unit_image;

namespace {

SiameseConfig small_config(BackboneKind kind = BackboneKind::tiny_cnn, int dim = 32) {
  SiameseConfig cfg;
  cfg.backbone = kind;
  cfg.embedding_dim = dim;
  cfg.image_size = 32;
  return cfg;
}

SiameseNetwork make_net(const SiameseConfig& cfg, std::uint64_t seed = 1) {
  SiameseNetwork net(cfg);
  init_siamese_params(net, seed);
  return net;
}

Embedding random_embedding(int dim, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Embedding e;
  for (int i = 0; i < dim; ++i) e.vector.push_back(n(rng));
  return e;
}

// Nearest support by exhaustive comparison, first index wins ties.
int brute_force_class(const std::vector<Embedding>& support, const std::vector<int>& classes, const Embedding& t) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < support.size(); ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < t.vector.size(); ++k) {
      dot += support[i].vector[k] * t.vector[k];
      na += support[i].vector[k] * support[i].vector[k];
      nb += t.vector[k] * t.vector[k];
    }
    const double d = 1.0 - dot / std::sqrt(na * nb);
    if (d < best_d || (d == best_d && classes[i] < best)) {
      best_d = d;
      best = classes[i];
    }
  }
  return best;
}

LabeledImageSet small_corpus(int classes, int per_class, std::uint64_t seed) {
  SyntheticCorpusSpec spec;
  spec.classes = classes;
  spec.per_class = per_class;
  spec.size = 32;
  spec.seed = seed;
  return make_synthetic_corpus(spec).clean;
}

}  // namespace

TEST_CASE("embeddings are deterministic with the configured length") {
  Rng rng(1);
  const ImageTensor img = random_unit_image(32, 32, ColorSpace::rgb, rng);
  for (BackboneKind kind : {BackboneKind::tiny_cnn, BackboneKind::resnet18, BackboneKind::efficientnet_b0,
                            BackboneKind::mobilenet_v3_small}) {
    CAPTURE(to_string(kind));
    const int dim = kind == BackboneKind::resnet18 ? 128 : 24;
    const SiameseNetwork net = make_net(small_config(kind, dim));
    const Embedding a = embed(net, img);
    const Embedding b = embed(net, img);
    CHECK(a.vector.size() == static_cast<std::size_t>(dim));
    CHECK(a.vector == b.vector);
    a.validate();
  }
}

TEST_CASE("siamese config validation") {
  SiameseConfig cfg = small_config();
  cfg.margin = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = small_config();
  cfg.embedding_dim = 4;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = small_config();
  cfg.channels = 2;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  CHECK_THROWS_AS(backbone_from_string("vgg"), ValidationError);
  CHECK(backbone_from_string("residual-18") == BackboneKind::resnet18);

  SiameseRunConfig run;
  run.model = small_config();
  run.model.pretrained = true;
  CHECK_THROWS_AS(run.validate(), ValidationError);
  run.init_checkpoint = "weights.npxckpt";
  CHECK_NOTHROW(run.validate());
}

TEST_CASE("cosine distance") {
  const Embedding a{{1.0, 0.0, 0.0}}, b{{0.0, 2.0, 0.0}}, c{{-3.0, 0.0, 0.0}};
  CHECK(cosine_distance(a, a) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cosine_distance(a, b) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine_distance(a, c) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(euclidean_distance(a, b) == doctest::Approx(std::sqrt(5.0)));

  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const Embedding x = random_embedding(16, rng), y = random_embedding(16, rng);
    CHECK(std::abs(cosine_distance(x, y) - cosine_distance(y, x)) < 1e-12);
    Embedding scaled = x;
    for (double& v : scaled.vector) v *= 7.5;
    CHECK(std::abs(cosine_distance(scaled, y) - cosine_distance(x, y)) < 1e-9);
    const double d = cosine_distance(x, y);
    CHECK(d >= 0.0);
    CHECK(d <= 2.0);
  }
  const Embedding zero{{0.0, 0.0, 0.0}};
  CHECK_THROWS_AS(cosine_distance(a, zero), ValidationError);
  CHECK_THROWS_AS(cosine_distance(a, Embedding{{1.0, 2.0}}), ValidationError);
}

TEST_CASE("contrastive loss values and gradient") {
  CHECK(contrastive_loss(0.6, 0, 1.0) == doctest::Approx(0.36).epsilon(1e-12));
  CHECK(contrastive_loss(0.4, 1, 1.0) == doctest::Approx(0.36).epsilon(1e-12));
  CHECK(contrastive_loss(1.5, 1, 1.0) == 0.0);
  CHECK(contrastive_loss(0.0, 0, 1.0) == 0.0);
  const double h = 1e-6;
  for (int y : {0, 1}) {
    for (double d : {0.1, 0.4, 0.7, 1.3, 1.9}) {
      CAPTURE(y);
      CAPTURE(d);
      const double numeric = (contrastive_loss(d + h, y, 1.0) - contrastive_loss(d - h, y, 1.0)) / (2 * h);
      CHECK(std::abs(contrastive_loss_grad(d, y, 1.0) - numeric) < 1e-6);
    }
  }
}

TEST_CASE("nearest-support classification") {
  Rng rng(3);
  std::vector<Embedding> support;
  const std::vector<int> classes{4, 1, 7, 2, 9};
  for (int i = 0; i < 5; ++i) support.push_back(random_embedding(8, rng));
  for (std::size_t i = 0; i < support.size(); ++i) {
    CHECK(classify_by_embeddings(support, classes, support[i], DistanceKind::cosine) == classes[i]);
  }

  // Three classes along the axes: each axis-dominant target maps to its class.
  const std::vector<Embedding> axes{{{1, 0, 0}}, {{0, 1, 0}}, {{0, 0, 1}}};
  const std::vector<int> axis_classes{0, 1, 2};
  CHECK(classify_by_embeddings(axes, axis_classes, Embedding{{0.9, 0.1, 0.2}}, DistanceKind::cosine) == 0);
  CHECK(classify_by_embeddings(axes, axis_classes, Embedding{{0.1, 0.2, 0.9}}, DistanceKind::cosine) == 2);
  // An equidistant target goes to the lowest class id.
  CHECK(classify_by_embeddings(axes, axis_classes, Embedding{{1, 1, 1}}, DistanceKind::cosine) == 0);

  for (int ep = 0; ep < 200; ++ep) {
    std::vector<Embedding> s;
    for (int i = 0; i < 5; ++i) s.push_back(random_embedding(6, rng));
    const Embedding t = random_embedding(6, rng);
    CHECK(classify_by_embeddings(s, classes, t, DistanceKind::cosine) == brute_force_class(s, classes, t));
  }
}

TEST_CASE("one-shot accuracy on prescribed embeddings") {
  // Five classes, three samples each; every sample gets its own source.
  LabeledImageSet set;
  Rng img_rng(4);
  const ImageTensor img = random_unit_image(16, 16, ColorSpace::rgb, img_rng);
  for (int c = 0; c < 5; ++c) {
    for (int k = 0; k < 3; ++k) set.add(img, c, "c" + std::to_string(c) + "_" + std::to_string(k));
  }

  SUBCASE("identical class embeddings are always right") {
    Rng rng(5);
    std::vector<Embedding> emb;
    std::vector<Embedding> centers;
    for (int c = 0; c < 5; ++c) centers.push_back(random_embedding(16, rng));
    for (const auto& s : set.samples()) emb.push_back(centers[static_cast<std::size_t>(s.class_id)]);
    const OneShotReport r = evaluate_one_shot_embeddings(set, emb, set, emb, DistanceKind::cosine, 50, 5, rng);
    CHECK(r.accuracy == 1.0);
    CHECK(r.predictions == 50 * 5);  // one target per class
    CHECK(r.records.size() == 50);
  }
  SUBCASE("independent random embeddings sit at chance") {
    Rng rng(6);
    std::vector<Embedding> emb;
    for (std::size_t i = 0; i < set.size(); ++i) emb.push_back(random_embedding(16, rng));
    int correct = 0, total = 0;
    // Fresh embeddings per block so the estimate averages over draws.
    for (int block = 0; block < 10; ++block) {
      for (auto& e : emb) e = random_embedding(16, rng);
      const OneShotReport r = evaluate_one_shot_embeddings(set, emb, set, emb, DistanceKind::cosine, 100, 5, rng);
      correct += r.correct;
      total += r.predictions;
    }
    CHECK(total == 5000);
    CHECK(static_cast<double>(correct) / total == doctest::Approx(0.2).epsilon(0.25));
  }
  SUBCASE("too few classes") {
    Rng rng(7);
    std::vector<Embedding> emb(set.size(), Embedding{{1.0, 0.0}});
    CHECK_THROWS_AS(evaluate_one_shot_embeddings(set, emb, set, emb, DistanceKind::cosine, 10, 6, rng),
                    ValidationError);
    CHECK_THROWS_AS(evaluate_one_shot_embeddings(set, emb, set, emb, DistanceKind::cosine, 10, 1, rng),
                    ValidationError);
  }
}

TEST_CASE("episode validation") {
  Rng rng(8);
  const ImageTensor img = random_unit_image(16, 16, ColorSpace::rgb, rng);
  OneShotEpisode ep;
  ep.support = {{0, img}, {0, img}};
  ep.targets = {{0, img}};
  CHECK_THROWS_AS(ep.validate(), ValidationError);
  ep.support = {{0, img}, {1, img}};
  ep.targets = {{2, img}};
  CHECK_THROWS_AS(ep.validate(), ValidationError);
}

TEST_CASE("twin distances of identical inputs vanish") {
  const SiameseNetwork net = make_net(small_config());
  Rng rng(9);
  Tensor x({3, 3, 32, 32});
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : x.data) v = u(rng);
  ag::NoGradGuard no_grad;
  const ag::Var d = net.pair_distances(ag::Var(x), ag::Var(x), {});
  REQUIRE(d.shape() == Shape{3});
  for (double v : d.value().data) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("training is deterministic and lowers the loss") {
  const LabeledImageSet data = small_corpus(3, 4, 10);
  SiameseRunConfig run;
  run.model = small_config();
  run.pairs_per_epoch = 64;
  run.val_pairs = 16;
  run.batch = 8;
  run.epochs = 4;
  const SiameseTrainResult a = train_siamese(run, data, 3);
  const SiameseTrainResult b = train_siamese(run, data, 3);
  REQUIRE(a.history.size() == 4);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_loss == b.history[i].val_loss);
  }
  CHECK(a.history.back().train_loss < a.history.front().train_loss);

  LabeledImageSet one_class;
  for (const auto& s : data.samples()) {
    if (s.class_id == data.samples().front().class_id) one_class.add(s.image, s.class_id, s.source);
  }
  CHECK_THROWS_AS(train_siamese(run, one_class, 3), ValidationError);
}

TEST_CASE("siamese checkpoint round-trip") {
  test::TempDir dir("siamese");
  const SiameseNetwork net = make_net(small_config(BackboneKind::tiny_cnn, 16), 11);
  save_siamese(net, nullptr, 11, 0, dir / "s.npxckpt");
  const SiameseNetwork back = load_siamese(dir / "s.npxckpt");
  CHECK(back.config().embedding_dim == 16);
  Rng rng(12);
  const ImageTensor img = random_unit_image(32, 32, ColorSpace::rgb, rng);
  CHECK(embed(net, img).vector == embed(back, img).vector);
}
