#include "npx/siamese.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "npx/artifacts.hpp"
#include "npx/errors.hpp"

using nlohmann::json;

namespace npx {

namespace {

constexpr std::uint64_t kStreamInit = 0x73696e6974;
constexpr std::uint64_t kStreamPairs = 0x7061697273;
constexpr std::uint64_t kStreamVal = 0x76616c;

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

ImageTensor as_unit(const ImageTensor& img) {
  return img.range() == ValueRange::unit_signed ? img : to_unit(img);
}

struct PairBatch {
  Tensor x1;
  Tensor x2;
  std::vector<int> labels;
};

PairBatch sample_batch(const LabeledImageSet& set, Rng& rng, double p_similar, int n) {
  std::vector<ImageTensor> a, b;
  PairBatch out;
  for (int i = 0; i < n; ++i) {
    PairSample p = sample_pair(set, rng, p_similar);
    a.push_back(std::move(p.x1));
    b.push_back(std::move(p.x2));
    out.labels.push_back(p.y);
  }
  out.x1 = stack_batch(a);
  out.x2 = stack_batch(b);
  return out;
}

LabeledImageSet unit_copy(const LabeledImageSet& set) {
  LabeledImageSet out;
  for (const auto& s : set.samples()) out.add(as_unit(s.image), s.class_id, s.source);
  for (const auto& [id, name] : set.class_names()) out.set_class_name(id, name);
  return out;
}

}  // namespace

std::string to_string(DistanceKind d) { return d == DistanceKind::cosine ? "cosine" : "euclidean"; }

DistanceKind distance_from_string(const std::string& s) {
  if (s == "cosine") return DistanceKind::cosine;
  if (s == "euclidean") return DistanceKind::euclidean;
  throw ValidationError("distance must be 'cosine' or 'euclidean', got '" + s + "'");
}

void SiameseConfig::validate() const {
  if (!(margin > 0.0) || !std::isfinite(margin)) throw ValidationError("margin must be > 0");
  if (embedding_dim < 8) throw ValidationError("embedding_dim must be >= 8, got " + std::to_string(embedding_dim));
  if (channels != 1 && channels != 3) throw ValidationError("channels must be 1 or 3");
  if (image_size < kMinImageSide) throw ValidationError("image_size below the minimum image side");
}

json to_json(const SiameseConfig& c) {
  return json{{"backbone", to_string(c.backbone)}, {"embedding_dim", c.embedding_dim},
              {"margin", c.margin},                {"distance", to_string(c.distance)},
              {"pretrained", c.pretrained},        {"image_size", c.image_size},
              {"channels", c.channels}};
}

SiameseConfig siamese_config_from_echo(const json& j) {
  try {
    SiameseConfig c;
    c.backbone = backbone_from_string(j.at("backbone").get<std::string>());
    c.embedding_dim = j.at("embedding_dim").get<int>();
    c.margin = j.at("margin").get<double>();
    c.distance = distance_from_string(j.at("distance").get<std::string>());
    c.pretrained = j.at("pretrained").get<bool>();
    c.image_size = j.at("image_size").get<int>();
    c.channels = j.at("channels").get<int>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ParseError(std::string("siamese config echo is malformed: ") + e.what());
  }
}

void SiameseRunConfig::validate() const {
  model.validate();
  if (pairs_per_epoch < 1) throw ValidationError("pairs_per_epoch must be >= 1");
  if (val_pairs < 0) throw ValidationError("val_pairs must be >= 0");
  if (batch < 1) throw ValidationError("batch must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("betas must lie in [0, 1)");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (!(p_similar >= 0.0 && p_similar <= 1.0)) throw ValidationError("p_similar must lie in [0, 1]");
  if (model.pretrained && !init_checkpoint) {
    throw ValidationError("pretrained is set but no pretrained weights are bundled; pass an init checkpoint");
  }
}

json to_json(const SiameseRunConfig& c) {
  json j = to_json(c.model);
  j.update(json{{"pairs_per_epoch", c.pairs_per_epoch},
                {"val_pairs", c.val_pairs},
                {"batch", c.batch},
                {"lr", c.lr},
                {"betas", {c.beta1, c.beta2}},
                {"epochs", c.epochs},
                {"seed", c.seed},
                {"p_similar", c.p_similar}});
  if (c.init_checkpoint) j["init_checkpoint"] = *c.init_checkpoint;
  return j;
}

void Embedding::validate() const {
  if (vector.empty()) throw ValidationError("empty embedding");
  for (double v : vector) {
    if (!std::isfinite(v)) throw ValidationError("embedding has a non-finite entry");
  }
  if (norm(vector) == 0.0) throw ValidationError("embedding has zero norm");
}

SiameseNetwork::SiameseNetwork(const SiameseConfig& cfg)
    : cfg_(cfg), store_(std::make_unique<nn::ParameterStore>()) {
  cfg_.validate();
  backbone_ = make_backbone(cfg_.backbone, *store_, "backbone", cfg_.channels);
  if (cfg_.image_size < backbone_->min_input()) {
    throw ValidationError(to_string(cfg_.backbone) + " needs inputs of at least " +
                          std::to_string(backbone_->min_input()) + " pixels");
  }
  head_ = nn::Linear(*store_, "embedding", backbone_->feature_dim(), cfg_.embedding_dim);
}

ag::Var SiameseNetwork::forward(const ag::Var& x, const nn::ForwardContext& ctx) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.image_size || s[3] != cfg_.image_size) {
    throw ValidationError("siamese input must be (N, " + std::to_string(cfg_.channels) + ", " +
                          std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.image_size) + "), got " +
                          shape_str(s));
  }
  return head_(backbone_->features(x, ctx));
}

ag::Var SiameseNetwork::pair_distances(const ag::Var& x1, const ag::Var& x2, const nn::ForwardContext& ctx) const {
  if (x1.shape() != x2.shape()) throw ValidationError("twin inputs differ in shape");
  const int n = x1.shape()[0];
  const ag::Var e = forward(ag::concat_batch(x1, x2), ctx);
  const ag::Var e1 = ag::slice_batch(e, 0, n), e2 = ag::slice_batch(e, n, 2 * n);
  return cfg_.distance == DistanceKind::cosine ? ag::cosine_distance_rows(e1, e2)
                                               : ag::euclidean_distance_rows(e1, e2);
}

void init_siamese_params(SiameseNetwork& net, std::uint64_t seed) {
  nn::initialize(net.params(), nn::InitScheme::kaiming, 0.0, seed);
}

std::vector<Embedding> embed_all(const SiameseNetwork& net, std::span<const ImageTensor* const> images, int chunk) {
  std::vector<Embedding> out;
  out.reserve(images.size());
  ag::NoGradGuard no_grad;
  for (std::size_t begin = 0; begin < images.size(); begin += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(images.size(), begin + static_cast<std::size_t>(chunk));
    std::vector<ImageTensor> unit;
    for (std::size_t i = begin; i < end; ++i) unit.push_back(as_unit(*images[i]));
    const ag::Var e = net.forward(ag::Var(stack_batch(unit)), nn::ForwardContext{});
    const int dim = e.shape()[1];
    for (std::size_t i = 0; i < unit.size(); ++i) {
      const auto* row = e.value().ptr() + i * static_cast<std::size_t>(dim);
      Embedding emb{std::vector<double>(row, row + dim)};
      emb.validate();
      out.push_back(std::move(emb));
    }
  }
  return out;
}

Embedding embed(const SiameseNetwork& net, const ImageTensor& image) {
  const ImageTensor* p = &image;
  return embed_all(net, std::span<const ImageTensor* const>(&p, 1)).front();
}

double cosine_distance(const Embedding& e1, const Embedding& e2) {
  if (e1.vector.size() != e2.vector.size()) throw ValidationError("embeddings differ in length");
  const double n1 = norm(e1.vector), n2 = norm(e2.vector);
  if (n1 == 0.0 || n2 == 0.0) throw ValidationError("cosine distance of a zero-norm embedding");
  double dot = 0.0;
  for (std::size_t i = 0; i < e1.vector.size(); ++i) dot += e1.vector[i] * e2.vector[i];
  return std::clamp(1.0 - dot / (n1 * n2), 0.0, 2.0);
}

double euclidean_distance(const Embedding& e1, const Embedding& e2) {
  if (e1.vector.size() != e2.vector.size()) throw ValidationError("embeddings differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < e1.vector.size(); ++i) s += (e1.vector[i] - e2.vector[i]) * (e1.vector[i] - e2.vector[i]);
  return std::sqrt(s);
}

double embedding_distance(const Embedding& e1, const Embedding& e2, DistanceKind kind) {
  return kind == DistanceKind::cosine ? cosine_distance(e1, e2) : euclidean_distance(e1, e2);
}

double contrastive_loss(double d, int y, double margin) {
  if (y != 0 && y != 1) throw ValidationError("pair label must be 0 or 1");
  if (!(margin > 0.0)) throw ValidationError("margin must be > 0");
  const double hinge = std::max(0.0, margin - d);
  return (1 - y) * d * d + y * hinge * hinge;
}

double contrastive_loss_grad(double d, int y, double margin) {
  if (y == 0) return 2.0 * d;
  return d < margin ? -2.0 * (margin - d) : 0.0;
}

SiameseTrainResult train_siamese(const SiameseRunConfig& run, const LabeledImageSet& train, std::uint64_t seed,
                                 const SiameseTrainOptions& options) {
  run.validate();
  train.validate();
  if (train.class_count() < 2) throw ValidationError("siamese training needs at least 2 classes");
  for (const auto& s : train.samples()) {
    if (s.image.height() != run.model.image_size || s.image.width() != run.model.image_size ||
        s.image.channels() != run.model.channels) {
      throw ValidationError("training image " + s.source + " does not match image_size/channels of the config");
    }
  }
  const LabeledImageSet unit = unit_copy(train);

  SiameseNetwork net(run.model);
  init_siamese_params(net, derive_seed(seed, kStreamInit));
  if (run.model.pretrained) {
    const Checkpoint init = load_checkpoint(*run.init_checkpoint, Component::siamese);
    restore_checkpoint(init, net.params(), nullptr);
  }
  Adam opt(net.params().trainable(), AdamConfig{run.lr, run.beta1, run.beta2});
  const double margin = run.model.margin;

  SiameseTrainResult result{std::move(net), std::move(opt), {}};
  SiameseNetwork& model = result.net;
  for (int epoch = 1; epoch <= run.epochs; ++epoch) {
    Rng pair_rng(derive_seed(seed, kStreamPairs, static_cast<std::uint64_t>(epoch)));
    double total = 0.0;
    for (int done = 0; done < run.pairs_per_epoch;) {
      const int n = std::min(run.batch, run.pairs_per_epoch - done);
      const PairBatch b = sample_batch(unit, pair_rng, run.p_similar, n);
      result.optimizer.zero_grad();
      const ag::Var d = model.pair_distances(ag::Var(b.x1), ag::Var(b.x2), nn::ForwardContext{true, true, nullptr});
      const ag::Var loss = ag::contrastive_loss(d, b.labels, margin);
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("contrastive loss is not finite in epoch " + std::to_string(epoch), epoch, "");
      }
      ag::backward(loss);
      result.optimizer.step();
      total += loss.item() * n;
      done += n;
    }

    double val_total = 0.0;
    if (run.val_pairs > 0) {
      Rng val_rng(derive_seed(seed, kStreamVal, static_cast<std::uint64_t>(epoch)));
      ag::NoGradGuard no_grad;
      for (int done = 0; done < run.val_pairs;) {
        const int n = std::min(run.batch, run.val_pairs - done);
        const PairBatch b = sample_batch(unit, val_rng, run.p_similar, n);
        const ag::Var d = model.pair_distances(ag::Var(b.x1), ag::Var(b.x2), nn::ForwardContext{});
        val_total += ag::contrastive_loss(d, b.labels, margin).item() * n;
        done += n;
      }
    }
    const SiameseEpochRecord rec{epoch, total / run.pairs_per_epoch,
                                 run.val_pairs > 0 ? val_total / run.val_pairs : 0.0};
    result.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  return result;
}

void save_siamese(const SiameseNetwork& net, const Adam* optimizer, std::uint64_t seed, int epoch,
                  const std::filesystem::path& path) {
  save_checkpoint(capture_checkpoint(Component::siamese, net.params(), optimizer, seed, epoch,
                                     optimizer ? optimizer->step_count() : 0, json{{"model", to_json(net.config())}}),
                  path);
}

SiameseNetwork load_siamese(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path, Component::siamese);
  if (!ckpt.config.contains("model")) throw ParseError("siamese checkpoint lacks its config echo");
  SiameseNetwork net(siamese_config_from_echo(ckpt.config["model"]));
  restore_checkpoint(ckpt, net.params(), nullptr);
  return net;
}

// -- one-shot evaluation ----------------------------------------------------------

void OneShotEpisode::validate() const {
  std::set<int> classes;
  for (const auto& [cls, _] : support) {
    if (!classes.insert(cls).second) throw ValidationError("support lists class " + std::to_string(cls) + " twice");
  }
  if (support.empty()) throw ValidationError("episode has an empty support set");
  for (const auto& [cls, _] : targets) {
    if (!classes.count(cls)) throw ValidationError("target class " + std::to_string(cls) + " missing from support");
  }
}

int classify_by_embeddings(std::span<const Embedding> support, std::span<const int> support_classes,
                           const Embedding& target, DistanceKind distance) {
  if (support.empty() || support.size() != support_classes.size()) {
    throw ValidationError("support embeddings and classes must be non-empty and aligned");
  }
  int best_class = support_classes[0];
  double best = embedding_distance(target, support[0], distance);
  for (std::size_t i = 1; i < support.size(); ++i) {
    const double d = embedding_distance(target, support[i], distance);
    if (d < best || (d == best && support_classes[i] < best_class)) {
      best = d;
      best_class = support_classes[i];
    }
  }
  return best_class;
}

int one_shot_classify(const SiameseNetwork& net, const OneShotEpisode& episode, std::size_t target_index) {
  episode.validate();
  if (target_index >= episode.targets.size()) throw ValidationError("target index out of range");
  std::vector<const ImageTensor*> images;
  std::vector<int> classes;
  for (const auto& [cls, img] : episode.support) {
    images.push_back(&img);
    classes.push_back(cls);
  }
  const auto support = embed_all(net, images);
  const Embedding target = embed(net, episode.targets[target_index].second);
  return classify_by_embeddings(support, classes, target, net.config().distance);
}

json to_json(const OneShotReport& r) {
  json records = json::array();
  for (const auto& e : r.records) {
    records.push_back(
        {{"classes", e.classes}, {"targets", e.targets}, {"predictions", e.predictions}, {"correct", e.correct}});
  }
  return json{{"n_way", r.n_way},
              {"episodes", r.episodes},
              {"predictions", r.predictions},
              {"correct", r.correct},
              {"accuracy", r.accuracy},
              {"records", records}};
}

OneShotReport evaluate_one_shot_embeddings(const LabeledImageSet& eval_set, std::span<const Embedding> eval_emb,
                                           const LabeledImageSet& support_source,
                                           std::span<const Embedding> support_emb, DistanceKind distance,
                                           int episodes, int n_way, Rng& rng, const OneShotOptions& options) {
  if (eval_emb.size() != eval_set.size() || support_emb.size() != support_source.size()) {
    throw ValidationError("embeddings do not align with their image sets");
  }
  if (episodes < 1) throw ValidationError("episodes must be >= 1");
  if (options.targets_per_class < 1) throw ValidationError("targets_per_class must be >= 1");
  const std::vector<int> classes = eval_set.classes();
  const auto& support_index = support_source.class_index();
  for (int c : classes) {
    if (!support_index.count(c)) {
      throw ValidationError("eval class " + std::to_string(c) + " has no image in the support source");
    }
  }
  if (n_way < 2 || n_way > static_cast<int>(classes.size())) {
    throw ValidationError("n_way " + std::to_string(n_way) + " needs between 2 and " +
                          std::to_string(classes.size()) + " eval classes");
  }

  OneShotReport report;
  report.n_way = n_way;
  report.episodes = episodes;
  const auto& eval_index = eval_set.class_index();
  for (int ep = 0; ep < episodes; ++ep) {
    std::vector<int> pool = classes;
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(static_cast<std::size_t>(n_way));
    std::sort(pool.begin(), pool.end());

    std::vector<Embedding> support;
    std::vector<int> support_classes;
    std::vector<std::string> support_sources;
    for (int c : pool) {
      const auto& pos = support_index.at(c);
      const std::size_t pick = pos[std::uniform_int_distribution<std::size_t>(0, pos.size() - 1)(rng)];
      support.push_back(support_emb[pick]);
      support_classes.push_back(c);
      support_sources.push_back(support_source.samples()[pick].source);
    }

    EpisodeRecord rec;
    rec.classes = pool;
    for (std::size_t k = 0; k < pool.size(); ++k) {
      std::vector<std::size_t> candidates;
      for (std::size_t p : eval_index.at(pool[k])) {
        if (!options.exclude_same_source || eval_set.samples()[p].source.empty() ||
            eval_set.samples()[p].source != support_sources[k]) {
          candidates.push_back(p);
        }
      }
      if (candidates.empty()) {
        throw ValidationError("class " + std::to_string(pool[k]) + " has no target distinct from its support");
      }
      for (int t = 0; t < options.targets_per_class; ++t) {
        const std::size_t pick = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
        const int predicted = classify_by_embeddings(support, support_classes, eval_emb[pick], distance);
        rec.targets.push_back(pool[k]);
        rec.predictions.push_back(predicted);
        if (predicted == pool[k]) ++rec.correct;
      }
    }
    report.predictions += static_cast<int>(rec.targets.size());
    report.correct += rec.correct;
    report.records.push_back(std::move(rec));
  }
  report.accuracy = static_cast<double>(report.correct) / report.predictions;
  return report;
}

OneShotReport evaluate_one_shot(const SiameseNetwork& net, const LabeledImageSet& eval_set,
                                const LabeledImageSet& support_source, int episodes, int n_way, Rng& rng,
                                const OneShotOptions& options) {
  auto embed_set = [&](const LabeledImageSet& set) {
    std::vector<const ImageTensor*> images;
    for (const auto& s : set.samples()) images.push_back(&s.image);
    return embed_all(net, images);
  };
  const std::vector<Embedding> eval_emb = embed_set(eval_set);
  const std::vector<Embedding> support_emb = &eval_set == &support_source ? eval_emb : embed_set(support_source);
  return evaluate_one_shot_embeddings(eval_set, eval_emb, support_source, support_emb, net.config().distance,
                                      episodes, n_way, rng, options);
}

}  // namespace npx
