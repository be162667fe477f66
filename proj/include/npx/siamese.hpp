#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "npx/backbones.hpp"
#include "npx/dataset.hpp"
#include "npx/optim.hpp"

namespace npx {

enum class DistanceKind { cosine, euclidean };

std::string to_string(DistanceKind d);
DistanceKind distance_from_string(const std::string& s);

struct SiameseConfig {
  BackboneKind backbone = BackboneKind::resnet18;
  int embedding_dim = 128;
  double margin = 1.0;
  DistanceKind distance = DistanceKind::cosine;
  bool pretrained = false;
  int image_size = 256;
  int channels = 3;

  void validate() const;
};

nlohmann::json to_json(const SiameseConfig& cfg);
SiameseConfig siamese_config_from_echo(const nlohmann::json& j);

struct SiameseRunConfig {
  SiameseConfig model;
  int pairs_per_epoch = 10000;
  int val_pairs = 1000;
  int batch = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int epochs = 35;
  std::uint64_t seed = 0;
  double p_similar = 0.5;
  std::optional<std::string> init_checkpoint;  // required when model.pretrained is set

  void validate() const;
};

nlohmann::json to_json(const SiameseRunConfig& cfg);

struct Embedding {
  std::vector<double> vector;

  /// Throws unless every entry is finite and the norm is non-zero.
  void validate() const;
};

/// One backbone plus an embedding projection; both twins run through it.
class SiameseNetwork {
 public:
  explicit SiameseNetwork(const SiameseConfig& cfg);

  SiameseNetwork(const SiameseNetwork&) = delete;
  SiameseNetwork& operator=(const SiameseNetwork&) = delete;
  SiameseNetwork(SiameseNetwork&&) = default;
  SiameseNetwork& operator=(SiameseNetwork&&) = default;

  const SiameseConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return *store_; }
  const nn::ParameterStore& params() const { return *store_; }

  /// (N, C, S, S) -> (N, embedding_dim).
  ag::Var forward(const ag::Var& x, const nn::ForwardContext& ctx) const;

  /// Distances between the twin embeddings of x1[i] and x2[i]. Both halves run
  /// as one batch through the shared parameters.
  ag::Var pair_distances(const ag::Var& x1, const ag::Var& x2, const nn::ForwardContext& ctx) const;

 private:
  SiameseConfig cfg_;
  std::unique_ptr<nn::ParameterStore> store_;
  std::unique_ptr<Backbone> backbone_;
  nn::Linear head_;
};

/// Kaiming-normal initialization of a fresh network.
void init_siamese_params(SiameseNetwork& net, std::uint64_t seed);

/// Eval-mode embedding of one image (byte or unit_signed).
Embedding embed(const SiameseNetwork& net, const ImageTensor& image);

/// Eval-mode embeddings in chunks of `chunk` images.
std::vector<Embedding> embed_all(const SiameseNetwork& net, std::span<const ImageTensor* const> images,
                                 int chunk = 16);

/// 1 - cos(e1, e2), in [0, 2].
double cosine_distance(const Embedding& e1, const Embedding& e2);
double euclidean_distance(const Embedding& e1, const Embedding& e2);
double embedding_distance(const Embedding& e1, const Embedding& e2, DistanceKind kind);

/// (1 - y) d^2 + y max(0, m - d)^2.
double contrastive_loss(double d, int y, double margin);

/// d/dd of contrastive_loss.
double contrastive_loss_grad(double d, int y, double margin);

struct SiameseEpochRecord {
  int epoch;
  double train_loss;
  double val_loss;
};

struct SiameseTrainOptions {
  std::function<void(const SiameseEpochRecord&)> on_epoch;
};

struct SiameseTrainResult {
  SiameseNetwork net;
  Adam optimizer;
  std::vector<SiameseEpochRecord> history;
};

/// Contrastive training on freshly sampled pairs each epoch. Validation pairs
/// come from the same classes through an independent stream and are only
/// recorded.
SiameseTrainResult train_siamese(const SiameseRunConfig& run, const LabeledImageSet& train, std::uint64_t seed,
                                 const SiameseTrainOptions& options = {});

void save_siamese(const SiameseNetwork& net, const Adam* optimizer, std::uint64_t seed, int epoch,
                  const std::filesystem::path& path);
SiameseNetwork load_siamese(const std::filesystem::path& path);

// -- one-shot evaluation ----------------------------------------------------------

struct OneShotEpisode {
  std::vector<std::pair<int, ImageTensor>> support;
  std::vector<std::pair<int, ImageTensor>> targets;

  /// Unique support classes; every target class present in the support.
  void validate() const;
};

/// Class of the nearest support embedding; ties go to the lowest class id.
int classify_by_embeddings(std::span<const Embedding> support, std::span<const int> support_classes,
                           const Embedding& target, DistanceKind distance);

int one_shot_classify(const SiameseNetwork& net, const OneShotEpisode& episode, std::size_t target_index);

struct EpisodeRecord {
  std::vector<int> classes;
  std::vector<int> targets;
  std::vector<int> predictions;
  int correct = 0;
};

struct OneShotReport {
  int n_way = 0;
  int episodes = 0;
  int predictions = 0;
  int correct = 0;
  double accuracy = 0.0;
  std::vector<EpisodeRecord> records;
};

nlohmann::json to_json(const OneShotReport& r);

struct OneShotOptions {
  int targets_per_class = 1;
  /// Skip targets whose source path equals the chosen support's, so a
  /// target is never the support image itself (or its denoised copy).
  bool exclude_same_source = true;
};

/// Embedding-level evaluation; `eval_emb` and `support_emb` align with the
/// samples of the two sets.
OneShotReport evaluate_one_shot_embeddings(const LabeledImageSet& eval_set, std::span<const Embedding> eval_emb,
                                           const LabeledImageSet& support_source,
                                           std::span<const Embedding> support_emb, DistanceKind distance,
                                           int episodes, int n_way, Rng& rng, const OneShotOptions& options = {});

OneShotReport evaluate_one_shot(const SiameseNetwork& net, const LabeledImageSet& eval_set,
                                const LabeledImageSet& support_source, int episodes, int n_way, Rng& rng,
                                const OneShotOptions& options = {});

}  // namespace npx
