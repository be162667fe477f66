#include "npx/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "npx/artifacts.hpp"
#include "npx/config.hpp"
#include "npx/dataset.hpp"
#include "npx/degradation.hpp"
#include "npx/errors.hpp"
#include "npx/gan_training.hpp"
#include "npx/metrics.hpp"
#include "npx/plots.hpp"
#include "npx/siamese.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace npx {

namespace {

constexpr std::uint64_t kStreamEpisodes = 0x65706973;

std::string fmt_num(double v, int precision = 6) {
  if (std::isinf(v)) return "inf";
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

json num_or_inf(double v) { return std::isinf(v) ? json("inf") : json(v); }

// Starts a run record; finish() stamps it and appends it to <out>/run.json.
class RunLog {
 public:
  RunLog(std::string command, json config) {
    rec_.command = std::move(command);
    rec_.config = std::move(config);
    rec_.config_hash = config_hash(rec_.config);
    rec_.started = utc_timestamp();
    std::string stamp;
    for (char c : rec_.started) {
      if (std::isdigit(static_cast<unsigned char>(c))) stamp += c;
    }
    rec_.run_id = rec_.command + "-" + stamp + "-" + rec_.config_hash.substr(0, 8);
  }

  void fingerprint(const fs::path& root) {
    for (const auto& [k, v] : dataset_fingerprint(root)) rec_.dataset_fingerprint[root.filename().string() + "/" + k] = v;
  }
  void metrics(json m) { rec_.metrics = std::move(m); }
  void checkpoint(const fs::path& p) { rec_.checkpoints.push_back(p.string()); }

  fs::path finish(const fs::path& out) {
    rec_.finished = utc_timestamp();
    RunManifest manifest(out / "run.json");
    manifest.append(rec_);
    return manifest.path();
  }

 private:
  RunRecord rec_;
};

// Relabels `set` so that class ids follow the class names of `reference`.
LabeledImageSet align_classes(const LabeledImageSet& set, const LabeledImageSet& reference) {
  std::map<std::string, int> ids;
  for (const auto& [id, name] : reference.class_names()) ids[name] = id;
  LabeledImageSet out;
  for (const auto& s : set.samples()) {
    const std::string& name = set.class_names().at(s.class_id);
    const auto it = ids.find(name);
    if (it == ids.end()) throw ValidationError("class '" + name + "' is missing from the support source");
    out.add(s.image, it->second, s.source);
    out.set_class_name(it->second, name);
  }
  return out;
}

LabeledImageSet restrict_to_names(const LabeledImageSet& set, const std::vector<std::string>& names) {
  std::vector<int> keep;
  for (const auto& [id, name] : set.class_names()) {
    if (std::find(names.begin(), names.end(), name) != names.end()) keep.push_back(id);
  }
  if (keep.size() != names.size()) throw ValidationError("split file names classes absent from the dataset");
  return set.subset(keep);
}

std::vector<std::string> class_names_of(const LabeledImageSet& set) {
  std::vector<std::string> names;
  for (const auto& [id, name] : set.class_names()) names.push_back(name);
  return names;
}

struct SynthArgs {
  int classes = 5;
  int per_class = 8;
  int size = 64;
  std::string seed;
  std::string degradation;
  bool gray = false;
  std::string out;
};

CommandResult run_synth(const SynthArgs& a) {
  SyntheticCorpusSpec spec;
  spec.classes = a.classes;
  spec.per_class = a.per_class;
  spec.size = a.size;
  spec.seed = resolve_seed(a.seed);
  spec.colorspace = a.gray ? ColorSpace::gray : ColorSpace::rgb;
  if (!a.degradation.empty()) spec.degradation = degradation_config_from_json(read_json_file(a.degradation));
  if (spec.classes < 1 || spec.per_class < 1) throw ValidationError("--classes and --per-class must be >= 1");

  const json config{{"classes", spec.classes},   {"per_class", spec.per_class},
                    {"size", spec.size},         {"seed", spec.seed},
                    {"gray", a.gray},            {"degradation", to_json(spec.degradation)}};
  RunLog log("synth", config);
  const SyntheticCorpus corpus = make_synthetic_corpus(spec);
  CommandResult r;
  r.artifacts_written = write_synthetic_corpus(corpus, a.out);
  log.fingerprint(fs::path(a.out) / "clean");
  log.fingerprint(fs::path(a.out) / "noisy");
  log.metrics(json{{"clean_images", corpus.clean.size()}, {"noisy_images", corpus.noisy.size()}});
  r.artifacts_written.push_back(log.finish(a.out));
  r.summary = "wrote " + std::to_string(corpus.clean.size()) + " clean and " + std::to_string(corpus.noisy.size()) +
              " noisy images under " + a.out;
  return r;
}

struct TrainGanArgs {
  std::string data;
  std::string noisy;
  std::string clean;
  std::string config;
  std::string seed;
  int epochs = 0;
  std::int64_t max_steps = 0;
  std::string resume_generator;
  std::string resume_discriminator;
  int panels = 4;
  std::string out;
};

double mean_l1(const std::vector<HistoryRecord>& h, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += h[i].loss_G_gen;
  return end > begin ? s / static_cast<double>(end - begin) : 0.0;
}

CommandResult run_train_gan(const TrainGanArgs& a) {
  GanRunConfig cfg = a.config.empty() ? GanRunConfig{} : parse_gan_config_file(a.config);
  if (a.epochs > 0) cfg.epochs = a.epochs;
  if (!a.seed.empty() || std::getenv("NPX_SEED")) cfg.seed = resolve_seed(a.seed);
  cfg.validate();
  const fs::path noisy_root = !a.noisy.empty() ? fs::path(a.noisy) : fs::path(a.data) / "noisy";
  const fs::path clean_root = !a.clean.empty() ? fs::path(a.clean) : fs::path(a.data) / "clean";
  if (a.data.empty() && (a.noisy.empty() || a.clean.empty())) {
    throw ValidationError("train-gan needs --data or both --noisy and --clean");
  }
  const auto pairs = load_gan_pairs(noisy_root, clean_root, {cfg.image_size, cfg.image_size});

  RunLog log("train-gan", to_json(cfg));
  log.fingerprint(noisy_root);
  log.fingerprint(clean_root);
  const fs::path out(a.out);
  GanTrainOptions opts;
  opts.checkpoint_dir = out / "checkpoints";
  if (!a.resume_generator.empty()) opts.resume_generator = a.resume_generator;
  if (!a.resume_discriminator.empty()) opts.resume_discriminator = a.resume_discriminator;
  if (a.max_steps > 0) opts.max_steps = a.max_steps;
  opts.on_step = [](const HistoryRecord& h) {
    if (h.step % 10 == 0) {
      std::fprintf(stderr, "step %lld  loss_D %.5f  loss_G %.5f  L1 %.5f\n", static_cast<long long>(h.step), h.loss_D,
                   h.loss_G, h.loss_G_gen);
    }
  };
  GanTrainState state = train_gan(cfg, pairs, cfg.seed, opts);
  // A step limit can stop mid-epoch after the last scheduled checkpoint.
  const bool stopped_early = state.epoch < cfg.epochs;
  if (stopped_early && state.step > 0) {
    state.checkpoints.push_back(save_gan_state(state, out / "checkpoints" / "final").string());
  }

  CommandResult r;
  for (const auto& c : state.checkpoints) {
    r.artifacts_written.emplace_back(c);
    log.checkpoint(c);
  }
  const fs::path history_csv = out / "history.csv";
  write_history_csv(state.history, history_csv);
  r.artifacts_written.push_back(history_csv);
  json m{{"steps", state.step}, {"epochs", state.epoch}};
  if (!state.history.empty()) {
    plot_loss_curves(state.history, out / "loss_curves.png");
    r.artifacts_written.push_back(out / "loss_curves.png");
    const auto& last = state.history.back();
    const std::size_t n = state.history.size(), k = std::min<std::size_t>(10, n);
    m.update(json{{"final_loss_D", last.loss_D},
                  {"final_loss_G", last.loss_G},
                  {"final_loss_G_gen", last.loss_G_gen},
                  {"l1_first10", mean_l1(state.history, 0, k)},
                  {"l1_last10", mean_l1(state.history, n - k, n)}});
  }

  const int panels = std::min<int>(a.panels, static_cast<int>(pairs.size()));
  if (panels > 0) {
    std::vector<ImageTensor> noisy;
    for (int i = 0; i < panels; ++i) noisy.push_back(to_unit(pairs[static_cast<std::size_t>(i)].noisy));
    const auto generated = generator_forward(state.generator, noisy);
    for (int i = 0; i < panels; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "triplet_%02d.png", i);
      const fs::path p = out / "panels" / name;
      const auto& pr = pairs[static_cast<std::size_t>(i)];
      plot_triplet_panel(pr.clean, pr.noisy, generated[static_cast<std::size_t>(i)], p);
      r.artifacts_written.push_back(p);
    }
  }
  log.metrics(m);
  r.artifacts_written.push_back(log.finish(out));
  r.summary = "trained " + std::to_string(state.step) + " steps over " + std::to_string(state.epoch) +
              " epochs; final L1 " + (state.history.empty() ? "n/a" : fmt_num(state.history.back().loss_G_gen));
  return r;
}

struct DenoiseArgs {
  std::string ckpt;
  std::string in;
  std::string out;
  int batch = 8;
};

CommandResult run_denoise(const DenoiseArgs& a) {
  const UNetGenerator gen = load_generator(a.ckpt);
  const GeneratorConfig& g = gen.config();
  const ColorSpace cs = g.input_channels == 1 ? ColorSpace::gray : ColorSpace::rgb;
  const auto files = list_images_recursive(a.in);
  if (files.empty()) throw ValidationError("no images found under " + a.in);
  if (a.batch < 1) throw ValidationError("--batch must be >= 1");

  RunLog log("denoise", json{{"ckpt", a.ckpt}, {"ckpt_sha256", sha256_file(a.ckpt)}, {"in", a.in}});
  log.fingerprint(a.in);
  CommandResult r;
  for (std::size_t begin = 0; begin < files.size(); begin += static_cast<std::size_t>(a.batch)) {
    const std::size_t end = std::min(files.size(), begin + static_cast<std::size_t>(a.batch));
    std::vector<ImageTensor> batch;
    for (std::size_t i = begin; i < end; ++i) {
      batch.push_back(to_unit(load_image(fs::path(a.in) / files[i], cs, std::make_pair(g.image_size, g.image_size))));
    }
    const auto out = generator_forward(gen, batch);
    for (std::size_t i = begin; i < end; ++i) {
      const fs::path p = fs::path(a.out) / files[i];
      save_image(to_byte(out[i - begin]), p);
      r.artifacts_written.push_back(p);
    }
  }
  log.metrics(json{{"images", files.size()}});
  r.artifacts_written.push_back(log.finish(a.out));
  r.summary = "denoised " + std::to_string(files.size()) + " images into " + a.out;
  return r;
}

struct TrainSiameseArgs {
  std::string data;
  std::string config;
  std::string seed;
  double train_fraction = 0.6;
  bool all_classes = false;
  int epochs = 0;
  int pairs_per_epoch = 0;
  std::string out;
};

CommandResult run_train_siamese(const TrainSiameseArgs& a) {
  SiameseRunConfig cfg = a.config.empty() ? SiameseRunConfig{} : parse_siamese_config_file(a.config);
  if (a.epochs > 0) cfg.epochs = a.epochs;
  if (a.pairs_per_epoch > 0) cfg.pairs_per_epoch = a.pairs_per_epoch;
  if (!a.seed.empty() || std::getenv("NPX_SEED")) cfg.seed = resolve_seed(a.seed);
  cfg.validate();
  const ColorSpace cs = cfg.model.channels == 1 ? ColorSpace::gray : ColorSpace::rgb;
  const LabeledImageSet all = load_class_dataset(a.data, {cfg.model.image_size, cfg.model.image_size}, cs);

  LabeledImageSet train, eval;
  if (a.all_classes) {
    train = all;
    eval = all;
  } else {
    std::tie(train, eval) = split_by_class(all, a.train_fraction, cfg.seed);
  }
  json config = to_json(cfg);
  config["train_fraction"] = a.all_classes ? 1.0 : a.train_fraction;
  RunLog log("train-siamese", config);
  log.fingerprint(a.data);

  const fs::path out(a.out);
  const SiameseTrainResult res = train_siamese(cfg, train, cfg.seed, {[](const SiameseEpochRecord& e) {
                                                 std::fprintf(stderr, "epoch %d  train %.5f  val %.5f\n", e.epoch,
                                                              e.train_loss, e.val_loss);
                                               }});
  CommandResult r;
  const fs::path ckpt = out / "siamese.npxckpt";
  save_siamese(res.net, &res.optimizer, cfg.seed, cfg.epochs, ckpt);
  log.checkpoint(ckpt);
  r.artifacts_written.push_back(ckpt);

  std::string csv = "epoch,train_loss,val_loss\n";
  for (const auto& e : res.history) {
    csv += std::to_string(e.epoch) + "," + fmt_num(e.train_loss, 10) + "," + fmt_num(e.val_loss, 10) + "\n";
  }
  write_file_atomic(out / "siamese_history.csv", csv);
  r.artifacts_written.push_back(out / "siamese_history.csv");
  const json split{{"train_classes", class_names_of(train)}, {"eval_classes", class_names_of(eval)}};
  write_file_atomic(out / "split.json", split.dump(2) + "\n");
  r.artifacts_written.push_back(out / "split.json");

  log.metrics(json{{"first_train_loss", res.history.front().train_loss},
                   {"final_train_loss", res.history.back().train_loss},
                   {"final_val_loss", res.history.back().val_loss},
                   {"train_classes", train.class_count()}});
  r.artifacts_written.push_back(log.finish(out));
  r.summary = "trained " + to_string(cfg.model.backbone) + " for " + std::to_string(cfg.epochs) +
              " epochs; final train loss " + fmt_num(res.history.back().train_loss);
  return r;
}

struct EvalArgs {
  std::string ckpt;
  std::string clean;
  std::string targets;
  std::string support = "clean";
  std::string split;
  int n_way = 5;
  int episodes = 200;
  int targets_per_class = 1;
  std::string seed;
  std::string out;
};

CommandResult run_eval_oneshot(const EvalArgs& a) {
  if (a.support != "clean" && a.support != "generated") {
    throw ValidationError("--support must be 'clean' or 'generated'");
  }
  const SiameseNetwork net = load_siamese(a.ckpt);
  const SiameseConfig& mc = net.config();
  const ColorSpace cs = mc.channels == 1 ? ColorSpace::gray : ColorSpace::rgb;
  const std::pair<int, int> size{mc.image_size, mc.image_size};
  const fs::path targets_root = a.targets.empty() ? fs::path(a.clean) : fs::path(a.targets);

  LabeledImageSet clean = load_class_dataset(a.clean, size, cs);
  LabeledImageSet targets = align_classes(load_class_dataset(targets_root, size, cs), clean);
  if (!a.split.empty()) {
    const auto names = read_json_file(a.split).at("eval_classes").get<std::vector<std::string>>();
    clean = restrict_to_names(clean, names);
    targets = restrict_to_names(targets, names);
  }
  const std::uint64_t seed = resolve_seed(a.seed);
  const json config{{"ckpt", a.ckpt},
                    {"ckpt_sha256", sha256_file(a.ckpt)},
                    {"support", a.support},
                    {"n_way", a.n_way},
                    {"episodes", a.episodes},
                    {"targets_per_class", a.targets_per_class},
                    {"split", a.split},
                    {"seed", seed}};
  RunLog log("eval-oneshot", config);
  log.fingerprint(a.clean);
  if (targets_root != fs::path(a.clean)) log.fingerprint(targets_root);

  Rng rng(derive_seed(seed, kStreamEpisodes));
  OneShotOptions opts;
  opts.targets_per_class = a.targets_per_class;
  const LabeledImageSet& support_source = a.support == "clean" ? clean : targets;
  const OneShotReport rep = evaluate_one_shot(net, targets, support_source, a.episodes, a.n_way, rng, opts);

  json report = to_json(rep);
  report["support"] = a.support;
  report["backbone"] = to_string(mc.backbone);
  const fs::path out(a.out);
  write_file_atomic(out / "oneshot.json", report.dump(2) + "\n");
  CommandResult r;
  r.artifacts_written.push_back(out / "oneshot.json");
  log.metrics(json{{"accuracy", rep.accuracy},
                   {"n_way", rep.n_way},
                   {"episodes", rep.episodes},
                   {"predictions", rep.predictions},
                   {"support", a.support},
                   {"backbone", to_string(mc.backbone)}});
  r.artifacts_written.push_back(log.finish(out));
  r.summary = std::to_string(a.n_way) + "-way one-shot accuracy " + fmt_num(rep.accuracy, 4) + " over " +
              std::to_string(rep.episodes) + " episodes";
  return r;
}

struct MetricsArgs {
  std::string pred;
  std::string ref;
  std::string gray = "luminance";
  std::string brisque_model;
  std::string out;
};

CommandResult run_metrics(const MetricsArgs& a) {
  GrayMode mode;
  if (a.gray == "luminance") {
    mode = GrayMode::luminance;
  } else if (a.gray == "rgb-mean") {
    mode = GrayMode::rgb_mean;
  } else {
    throw ValidationError("--gray must be 'luminance' or 'rgb-mean'");
  }
  std::optional<BrisqueModel> model;
  if (!a.brisque_model.empty()) model = load_brisque_model(a.brisque_model);
  const auto files = list_images_recursive(a.pred);
  if (files.empty()) throw ValidationError("no images found under " + a.pred);

  RunLog log("metrics", json{{"pred", a.pred}, {"ref", a.ref}, {"gray", a.gray}, {"brisque_model", a.brisque_model}});
  log.fingerprint(a.pred);
  log.fingerprint(a.ref);

  std::string csv = model ? "image_id,mse,rmse,psnr_db,ssim,brisque_score\n" : "image_id,mse,rmse,psnr_db,ssim\n";
  json images = json::array();
  double sum_mse = 0.0, sum_rmse = 0.0, sum_psnr = 0.0, sum_ssim = 0.0, sum_brisque = 0.0;
  for (const auto& rel : files) {
    const fs::path ref_path = fs::path(a.ref) / rel;
    if (!fs::exists(ref_path)) throw ValidationError("reference image missing for " + rel.generic_string());
    const ImageTensor pred = metric_gray(load_image(fs::path(a.pred) / rel, ColorSpace::rgb), mode);
    const ImageTensor ref = metric_gray(load_image(ref_path, ColorSpace::rgb), mode);
    if (!pred.same_layout(ref)) throw ValidationError("size mismatch for " + rel.generic_string());
    const double m = mse(pred, ref), rm = rmse_from_mse(m), p = psnr(m), s = ssim(pred, ref);
    sum_mse += m;
    sum_rmse += rm;
    sum_psnr += p;
    sum_ssim += s;
    json row{{"image_id", rel.generic_string()}, {"mse", m}, {"rmse", rm}, {"psnr_db", num_or_inf(p)}, {"ssim", s}};
    csv += rel.generic_string() + "," + fmt_num(m, 10) + "," + fmt_num(rm, 10) + "," + fmt_num(p, 10) + "," +
           fmt_num(s, 10);
    if (model) {
      const double b = *brisque_score(brisque_features(pred), model);
      sum_brisque += b;
      row["brisque_score"] = b;
      csv += "," + fmt_num(b, 10);
    }
    csv += "\n";
    images.push_back(row);
  }
  const double n = static_cast<double>(files.size());
  json mean{{"mse", sum_mse / n}, {"rmse", sum_rmse / n}, {"psnr_db", num_or_inf(sum_psnr / n)}, {"ssim", sum_ssim / n}};
  csv += "mean," + fmt_num(sum_mse / n, 10) + "," + fmt_num(sum_rmse / n, 10) + "," + fmt_num(sum_psnr / n, 10) + "," +
         fmt_num(sum_ssim / n, 10);
  if (model) {
    mean["brisque_score"] = sum_brisque / n;
    csv += "," + fmt_num(sum_brisque / n, 10);
  }
  csv += "\n";

  const fs::path out(a.out);
  write_file_atomic(out / "metrics.csv", csv);
  const json doc{{"gray", a.gray}, {"count", files.size()}, {"images", images}, {"mean", mean}};
  write_file_atomic(out / "metrics.json", doc.dump(2) + "\n");
  CommandResult r;
  r.artifacts_written = {out / "metrics.csv", out / "metrics.json"};
  json summary_metrics = mean;
  summary_metrics["count"] = files.size();
  log.metrics(summary_metrics);
  r.artifacts_written.push_back(log.finish(out));
  r.summary = "metrics over " + std::to_string(files.size()) + " images: MSE " + fmt_num(sum_mse / n) + ", PSNR " +
              fmt_num(sum_psnr / n) + " dB, SSIM " + fmt_num(sum_ssim / n);
  return r;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
};

std::string cell(const json& m, const std::string& key) {
  if (!m.contains(key)) return "";
  const json& v = m.at(key);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) return fmt_num(v.get<double>(), 6);
  return v.dump();
}

CommandResult run_report(const ReportArgs& a) {
  std::vector<RunRecord> runs;
  for (const auto& p : a.runs) {
    const fs::path path = fs::is_directory(p) ? fs::path(p) / "run.json" : fs::path(p);
    if (!fs::exists(path)) throw NotFoundError("run manifest not found: " + path.string());
    RunManifest m(path);
    for (const auto& rec : m.runs()) {
      verify_run_record(rec);
      runs.push_back(rec);
    }
  }
  if (runs.empty()) throw ValidationError("no runs to report");

  std::string md = "# Run report\n\n";
  std::string csv = "run_id,command,config_hash,metric,value\n";
  for (const auto& r : runs) {
    for (const auto& [k, v] : r.metrics.items()) {
      csv += r.run_id + "," + r.command + "," + r.config_hash + "," + k + "," + cell(r.metrics, k) + "\n";
    }
  }

  auto section = [&](const std::string& title, const std::string& command, const std::vector<std::string>& keys,
                     const std::vector<std::string>& headers) {
    std::string rows;
    for (const auto& r : runs) {
      if (r.command != command) continue;
      rows += "| " + r.run_id;
      for (const auto& k : keys) rows += " | " + cell(r.metrics, k);
      rows += " |\n";
    }
    if (rows.empty()) return;
    md += "## " + title + "\n\n| run";
    for (const auto& h : headers) md += " | " + h;
    md += " |\n|---";
    for (std::size_t i = 0; i < headers.size(); ++i) md += "|---";
    md += "|\n" + rows + "\n";
  };
  section("Image quality", "metrics", {"count", "mse", "rmse", "psnr_db", "ssim", "brisque_score"},
          {"images", "MSE", "RMSE", "PSNR (dB)", "SSIM", "BRISQUE"});
  section("One-shot classification", "eval-oneshot", {"backbone", "support", "n_way", "episodes", "accuracy"},
          {"backbone", "support", "n-way", "episodes", "accuracy"});
  section("GAN training", "train-gan", {"steps", "final_loss_D", "final_loss_G", "l1_first10", "l1_last10"},
          {"steps", "loss_D", "loss_G", "L1 first 10", "L1 last 10"});
  section("Siamese training", "train-siamese", {"train_classes", "first_train_loss", "final_train_loss", "final_val_loss"},
          {"classes", "first train loss", "final train loss", "final val loss"});

  const fs::path out(a.out);
  write_file_atomic(out / "report.md", md);
  write_file_atomic(out / "report.csv", csv);
  CommandResult r;
  r.artifacts_written = {out / "report.md", out / "report.csv"};
  r.summary = "reported " + std::to_string(runs.size()) + " runs";
  return r;
}

}  // namespace

std::uint64_t resolve_seed(const std::string& flag_value) {
  std::string text = flag_value;
  std::string origin = "--seed";
  if (text.empty()) {
    const char* env = std::getenv("NPX_SEED");
    if (!env || !*env) return 0;
    text = env;
    origin = "NPX_SEED";
  }
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    if (text.front() == '-') throw std::invalid_argument("negative");
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ValidationError(origin + " must be a non-negative integer, got '" + text + "'");
  return v;
}

CommandResult cmd_dispatch(const std::vector<std::string>& args) {
  CLI::App app{"Watermark denoising and one-shot classification toolkit", "npxtool"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic clean/noisy watermark corpus");
  c_synth->add_option("--classes", synth.classes, "Number of classes")->capture_default_str();
  c_synth->add_option("--per-class", synth.per_class, "Images per class")->capture_default_str();
  c_synth->add_option("--size", synth.size, "Image side in pixels")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "Seed (falls back to NPX_SEED)");
  c_synth->add_option("--degradation", synth.degradation, "Degradation config JSON")->check(CLI::ExistingFile);
  c_synth->add_flag("--gray", synth.gray, "Single-channel images");
  c_synth->add_option("--out", synth.out, "Output root")->required();

  TrainGanArgs gan;
  auto* c_gan = app.add_subcommand("train-gan", "Train the denoising GAN on noisy/clean pairs");
  c_gan->add_option("--data", gan.data, "Root holding noisy/ and clean/");
  c_gan->add_option("--noisy", gan.noisy, "Noisy image root");
  c_gan->add_option("--clean", gan.clean, "Clean image root");
  c_gan->add_option("--config", gan.config, "Run config JSON")->check(CLI::ExistingFile);
  c_gan->add_option("--seed", gan.seed, "Seed (overrides the config; falls back to NPX_SEED)");
  c_gan->add_option("--epochs", gan.epochs, "Override the configured epochs");
  c_gan->add_option("--max-steps", gan.max_steps, "Stop after this many steps");
  c_gan->add_option("--resume-generator", gan.resume_generator, "Generator checkpoint to resume from");
  c_gan->add_option("--resume-discriminator", gan.resume_discriminator, "Discriminator checkpoint to resume from");
  c_gan->add_option("--panels", gan.panels, "Triplet panels to render")->capture_default_str();
  c_gan->add_option("--out", gan.out, "Output root")->required();

  DenoiseArgs den;
  auto* c_den = app.add_subcommand("denoise", "Run a trained generator over a directory of images");
  c_den->add_option("--ckpt", den.ckpt, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  c_den->add_option("--in", den.in, "Input image root")->required()->check(CLI::ExistingDirectory);
  c_den->add_option("--out", den.out, "Output root")->required();
  c_den->add_option("--batch", den.batch, "Images per forward pass")->capture_default_str();

  TrainSiameseArgs sia;
  auto* c_sia = app.add_subcommand("train-siamese", "Train the Siamese embedding network");
  c_sia->add_option("--data", sia.data, "Class-per-directory image root")->required();
  c_sia->add_option("--config", sia.config, "Run config JSON")->check(CLI::ExistingFile);
  c_sia->add_option("--seed", sia.seed, "Seed (overrides the config; falls back to NPX_SEED)");
  c_sia->add_option("--train-fraction", sia.train_fraction, "Fraction of classes used for training")
      ->capture_default_str();
  c_sia->add_flag("--all-classes", sia.all_classes, "Train on every class instead of a class-disjoint split");
  c_sia->add_option("--epochs", sia.epochs, "Override the configured epochs");
  c_sia->add_option("--pairs-per-epoch", sia.pairs_per_epoch, "Override the configured pairs per epoch");
  c_sia->add_option("--out", sia.out, "Output root")->required();

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval-oneshot", "N-way one-shot evaluation");
  c_ev->add_option("--ckpt", ev.ckpt, "Siamese checkpoint")->required()->check(CLI::ExistingFile);
  c_ev->add_option("--clean", ev.clean, "Clean class-per-directory root")->required();
  c_ev->add_option("--targets", ev.targets, "Target images (same layout), e.g. denoised output; default --clean");
  c_ev->add_option("--support", ev.support, "Support images: clean originals or the target set")
      ->capture_default_str()
      ->check(CLI::IsMember({"clean", "generated"}));
  c_ev->add_option("--split", ev.split, "split.json from train-siamese; restricts to its eval classes");
  c_ev->add_option("--n-way", ev.n_way, "Classes per episode")->capture_default_str();
  c_ev->add_option("--episodes", ev.episodes, "Episodes")->capture_default_str();
  c_ev->add_option("--targets-per-class", ev.targets_per_class, "Targets per class and episode")
      ->capture_default_str();
  c_ev->add_option("--seed", ev.seed, "Seed (falls back to NPX_SEED)");
  c_ev->add_option("--out", ev.out, "Output root")->required();

  MetricsArgs met;
  auto* c_met = app.add_subcommand("metrics", "MSE/RMSE/PSNR/SSIM (and BRISQUE) of predictions against references");
  c_met->add_option("--pred", met.pred, "Predicted image root")->required()->check(CLI::ExistingDirectory);
  c_met->add_option("--ref", met.ref, "Reference image root")->required()->check(CLI::ExistingDirectory);
  c_met->add_option("--gray", met.gray, "Gray conversion")->capture_default_str()->check(
      CLI::IsMember({"luminance", "rgb-mean"}));
  c_met->add_option("--brisque-model", met.brisque_model, "Linear BRISQUE model JSON")->check(CLI::ExistingFile);
  c_met->add_option("--out", met.out, "Output root")->required();

  ReportArgs rep;
  auto* c_rep = app.add_subcommand("report", "Aggregate run manifests into markdown and CSV tables");
  c_rep->add_option("--runs", rep.runs, "run.json files or directories holding one")->required();
  c_rep->add_option("--out", rep.out, "Output root")->required();

  CommandResult result;
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    result.summary = app.help();
    return result;
  } catch (const CLI::CallForAllHelp&) {
    result.summary = app.help("", CLI::AppFormatMode::All);
    return result;
  } catch (const CLI::ParseError& e) {
    result.exit_code = 1;
    result.summary = std::string("error: ") + e.what() + "\n\n" + app.help();
    return result;
  }

  try {
    if (c_synth->parsed()) return run_synth(synth);
    if (c_gan->parsed()) return run_train_gan(gan);
    if (c_den->parsed()) return run_denoise(den);
    if (c_sia->parsed()) return run_train_siamese(sia);
    if (c_ev->parsed()) return run_eval_oneshot(ev);
    if (c_met->parsed()) return run_metrics(met);
    if (c_rep->parsed()) return run_report(rep);
  } catch (const ValidationError& e) {
    result.exit_code = 1;
    result.summary = std::string("validation error: ") + e.what();
    return result;
  } catch (const DivergenceError& e) {
    result.exit_code = 2;
    result.summary = std::string("training diverged: ") + e.what() +
                     (e.last_checkpoint().empty() ? "" : " (last good checkpoint: " + e.last_checkpoint() + ")");
    return result;
  } catch (const std::exception& e) {
    result.exit_code = 2;
    result.summary = std::string("error: ") + e.what();
    return result;
  }
  result.exit_code = 1;
  result.summary = app.help();
  return result;
}

}  // namespace npx
