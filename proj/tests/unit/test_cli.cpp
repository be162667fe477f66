#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include "npx/artifacts.hpp"
#include "npx/cli.hpp"
#include "npx/dataset.hpp"
#include "npx/errors.hpp"
#include "npx/metrics.hpp"
#include "npx/plots.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace npx;
using nlohmann::json;
using npx::test::TempDir;

namespace {

CommandResult run(std::vector<std::string> args) {
  CommandResult r = cmd_dispatch(args);
  INFO(r.summary);
  return r;
}

int count_pngs(const fs::path& root) {
  int n = 0;
  for (const auto& e : fs::recursive_directory_iterator(root)) n += e.path().extension() == ".png";
  return n;
}

std::vector<std::string> relative_pngs(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.path().extension() == ".png") out.push_back(fs::relative(e.path(), root).generic_string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

// Small synthetic corpus plus a two-step generator checkpoint, shared by the
// pipeline cases.
struct Pipeline {
  TempDir dir{"cli"};
  fs::path data = dir / "data";
  fs::path gan = dir / "gan";

  Pipeline() {
    REQUIRE(run({"synth", "--classes", "3", "--per-class", "3", "--size", "32", "--seed", "4", "--out",
                 data.string()})
                .exit_code == 0);
    write_text(dir / "gan.json", R"({"image_size": 32, "depth": 5, "base_channels": 4, "disc_layers": 2,
                                     "disc_base_channels": 4, "batch_size": 4, "epochs": 1})");
    REQUIRE(run({"train-gan", "--data", data.string(), "--config", (dir / "gan.json").string(), "--seed", "1",
                 "--max-steps", "2", "--panels", "2", "--out", gan.string()})
                .exit_code == 0);
  }

  fs::path checkpoint() const {
    for (const auto& e : fs::recursive_directory_iterator(gan / "checkpoints")) {
      if (e.path().filename().string().rfind("generator_", 0) == 0) return e.path();
    }
    FAIL("no generator checkpoint written");
    return {};
  }
};

}  // namespace

TEST_CASE("synth writes the expected corpus and is reproducible") {
  TempDir dir("synth");
  const CommandResult a = run({"synth", "--seed", "9", "--out", (dir / "a").string()});
  REQUIRE(a.exit_code == 0);
  CHECK(count_pngs(dir / "a/clean") == 40);
  CHECK(count_pngs(dir / "a/noisy") == 40);
  REQUIRE(run({"synth", "--seed", "9", "--out", (dir / "b").string()}).exit_code == 0);
  CHECK(dataset_fingerprint(dir / "a/clean") == dataset_fingerprint(dir / "b/clean"));
  CHECK(dataset_fingerprint(dir / "a/noisy") == dataset_fingerprint(dir / "b/noisy"));

  const RunManifest m(dir / "a/run.json");
  REQUIRE(m.runs().size() == 1);
  CHECK(m.runs()[0].command == "synth");
  CHECK_NOTHROW(verify_run_record(m.runs()[0]));
  CHECK(!m.runs()[0].dataset_fingerprint.empty());

  REQUIRE(run({"synth", "--seed", "10", "--out", (dir / "c").string()}).exit_code == 0);
  CHECK(dataset_fingerprint(dir / "a/noisy") != dataset_fingerprint(dir / "c/noisy"));
}

TEST_CASE("gan pipeline: train, denoise, metrics, report") {
  Pipeline p;
  CHECK(fs::exists(p.gan / "history.csv"));
  CHECK(fs::exists(p.gan / "loss_curves.png"));
  CHECK(fs::exists(p.gan / "panels/triplet_00.png"));
  CHECK(fs::exists(p.gan / "run.json"));
  CHECK(read_history_csv(p.gan / "history.csv").size() == 2);

  const fs::path den = p.dir / "denoised";
  REQUIRE(run({"denoise", "--ckpt", p.checkpoint().string(), "--in", (p.data / "noisy").string(), "--out",
               den.string(), "--batch", "4"})
              .exit_code == 0);
  CHECK(relative_pngs(den) == relative_pngs(p.data / "noisy"));
  const ImageTensor sample = load_image(den / relative_pngs(den).front(), ColorSpace::rgb);
  CHECK(sample.height() == 32);

  const fs::path met = p.dir / "metrics";
  REQUIRE(run({"metrics", "--pred", den.string(), "--ref", (p.data / "clean").string(), "--out", met.string()})
              .exit_code == 0);
  const json doc = read_json_file(met / "metrics.json");
  REQUIRE(doc["count"] == 9);
  double sum = 0.0;
  for (const auto& row : doc["images"]) {
    const std::string id = row["image_id"];
    const ImageTensor pred = metric_gray(load_image(den / id, ColorSpace::rgb));
    const ImageTensor ref = metric_gray(load_image(p.data / "clean" / id, ColorSpace::rgb));
    CHECK(row["mse"].get<double>() == doctest::Approx(mse(pred, ref)).epsilon(1e-12));
    CHECK(row["ssim"].get<double>() == doctest::Approx(ssim(pred, ref)).epsilon(1e-12));
    CHECK(row["psnr_db"].get<double>() == doctest::Approx(psnr(mse(pred, ref))).epsilon(1e-12));
    sum += row["mse"].get<double>();
  }
  CHECK(doc["mean"]["mse"].get<double>() == doctest::Approx(sum / 9));
  std::ifstream csv(met / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "image_id,mse,rmse,psnr_db,ssim");

  const fs::path rep = p.dir / "report";
  REQUIRE(run({"report", "--runs", p.gan.string(), met.string(), "--out", rep.string()}).exit_code == 0);
  const std::string md = read_file(rep / "report.md");
  CHECK(md.find("Image quality") != std::string::npos);
  CHECK(md.find("GAN training") != std::string::npos);
  CHECK(read_file(rep / "report.csv").rfind("run_id,command,config_hash,metric,value", 0) == 0);
}

TEST_CASE("siamese pipeline: train and evaluate one-shot") {
  TempDir dir("sia");
  const fs::path data = dir / "data";
  REQUIRE(run({"synth", "--classes", "5", "--per-class", "3", "--size", "32", "--out", data.string()}).exit_code ==
          0);
  write_text(dir / "sia.json", R"({"backbone": "tiny-cnn", "image_size": 32, "embedding_dim": 16,
                                   "pairs_per_epoch": 16, "val_pairs": 8, "epochs": 1})");
  const fs::path model = dir / "model";
  REQUIRE(run({"train-siamese", "--data", (data / "clean").string(), "--config", (dir / "sia.json").string(),
               "--all-classes", "--out", model.string()})
              .exit_code == 0);
  CHECK(fs::exists(model / "siamese.npxckpt"));
  CHECK(fs::exists(model / "split.json"));

  const fs::path ev = dir / "eval";
  REQUIRE(run({"eval-oneshot", "--ckpt", (model / "siamese.npxckpt").string(), "--clean", (data / "clean").string(),
               "--targets", (data / "noisy").string(), "--n-way", "5", "--episodes", "20", "--out", ev.string()})
              .exit_code == 0);
  const json report = read_json_file(ev / "oneshot.json");
  CHECK(report["episodes"] == 20);
  CHECK(report["n_way"] == 5);
  CHECK(report["accuracy"].get<double>() >= 0.0);
  CHECK(report["accuracy"].get<double>() <= 1.0);

  CHECK(run({"eval-oneshot", "--ckpt", (model / "siamese.npxckpt").string(), "--clean", (data / "clean").string(),
             "--n-way", "6", "--out", ev.string()})
            .exit_code == 1);
}

TEST_CASE("exit codes") {
  TempDir dir("exit");
  CHECK(run({}).exit_code == 1);
  CHECK(run({"frobnicate"}).exit_code == 1);
  CHECK(run({"synth"}).exit_code == 1);  // --out is required
  CHECK(run({"synth", "--classes", "zero", "--out", "x"}).exit_code == 1);
  CHECK(run({"--help"}).exit_code == 0);
  CHECK(run({"synth", "--size", "8", "--out", (dir / "tiny").string()}).exit_code == 1);

  write_text(dir / "bad.npxckpt", "NPXCKPT1 definitely not a checkpoint");
  fs::create_directories(dir / "in");
  const CommandResult corrupt =
      run({"denoise", "--ckpt", (dir / "bad.npxckpt").string(), "--in", (dir / "in").string(), "--out",
           (dir / "out").string()});
  CHECK(corrupt.exit_code == 2);
  CHECK(corrupt.summary.find("bad.npxckpt") != std::string::npos);

  write_text(dir / "cfg.json", R"({"lr": "fast"})");
  fs::create_directories(dir / "data/noisy");
  fs::create_directories(dir / "data/clean");
  CHECK(run({"train-gan", "--data", (dir / "data").string(), "--config", (dir / "cfg.json").string(), "--out",
             (dir / "g").string()})
            .exit_code == 1);
  CHECK(run({"report", "--runs", (dir / "missing").string(), "--out", (dir / "r").string()}).exit_code == 2);
}

TEST_CASE("seed resolution") {
  unsetenv("NPX_SEED");
  CHECK(resolve_seed("") == 0);
  CHECK(resolve_seed("17") == 17);
  setenv("NPX_SEED", "23", 1);
  CHECK(resolve_seed("") == 23);
  CHECK(resolve_seed("5") == 5);
  setenv("NPX_SEED", "abc", 1);
  CHECK_THROWS_AS(resolve_seed(""), ValidationError);
  unsetenv("NPX_SEED");
  CHECK_THROWS_AS(resolve_seed("-3"), ValidationError);
}

TEST_CASE("triplet panel layout") {
  TempDir dir("panel");
  auto solid = [](float v) {
    return ImageTensor(64, 64, ColorSpace::gray, ValueRange::byte, std::vector<float>(64 * 64, v));
  };
  plot_triplet_panel(solid(10), solid(120), solid(230), dir / "p.png");
  const ImageTensor panel = load_image(dir / "p.png", ColorSpace::gray);
  CHECK(panel.width() >= 3 * 64);
  CHECK(panel.height() >= 64);
  // Sample the centre of each tile, left to right.
  std::vector<double> centres;
  for (int i = 0; i < 3; ++i) {
    const int x0 = (panel.width() - 3 * 64) / 4 * (i + 1) + i * 64;
    centres.push_back(panel.at(8 + 32, x0 + 32, 0));
  }
  CHECK(centres == std::vector<double>{10, 120, 230});

  const ImageTensor small(32, 32, ColorSpace::gray, ValueRange::byte, std::vector<float>(32 * 32, 0.0f));
  CHECK_THROWS_AS(plot_triplet_panel(solid(1), small, solid(1), dir / "q.png"), ValidationError);
}

TEST_CASE("loss curve plot") {
  TempDir dir("loss");
  std::vector<HistoryRecord> history;
  for (int i = 0; i < 50; ++i) history.push_back({i, 1.0 / (i + 1), 2.0 / (i + 1), 0.1});
  const LossPlotInfo info = plot_loss_curves(history, dir / "loss.png");
  CHECK(info.x_min == 0);
  CHECK(info.x_max == 49);
  CHECK(info.series == 2);
  CHECK(info.y_max >= 2.0);
  const ImageTensor img = load_image(dir / "loss.png", ColorSpace::rgb);
  CHECK(img.width() == info.width);
  CHECK(img.height() == info.height);

  const std::vector<HistoryRecord> one{{7, 0.5, 0.7, 0.2}};
  const LossPlotInfo single = plot_loss_curves(one, dir / "one.png");
  CHECK(single.x_min == 7);
  CHECK(single.x_max == 7);
  CHECK(fs::exists(dir / "one.png"));
  CHECK_THROWS_AS(plot_loss_curves(std::vector<HistoryRecord>{}, dir / "none.png"), ValidationError);
}
