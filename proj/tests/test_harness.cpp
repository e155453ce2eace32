#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "reid/harness.hpp"

namespace fs = std::filesystem;
namespace harness = reid::harness;
namespace synth = reid::synthdata;
using reid::Tensor;

namespace {

struct TempTree {
  fs::path root;
  explicit TempTree(const std::string& name) : root(fs::temp_directory_path() / name) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~TempTree() { fs::remove_all(root); }
};

// Small-but-real experiment: 8 identities, 48x16 images, tiny encoder.
harness::ExperimentConfig tiny_config(const fs::path& data_dir) {
  harness::ExperimentConfig cfg;
  cfg.model.input_h = 48;
  cfg.model.input_w = 16;
  cfg.model.downsample = 8;
  cfg.model.channels = 16;
  cfg.model.reduced_channels = 8;
  cfg.model.n_regions = 8;
  cfg.data_dir = data_dir.string();
  cfg.epochs = 2;
  cfg.lr_decay_epoch = 2;
  cfg.batch_p = 2;
  cfg.batch_k = 2;
  cfg.seed = 5;
  return cfg;
}

fs::path make_tiny_dataset(const fs::path& where, std::uint64_t seed = 21, int height = 48,
                           int width = 16) {
  synth::GenerateConfig g;
  g.seed = seed;
  g.n_identities = 8;
  g.images_per_identity = 6;
  g.height = height;
  g.width = width;
  synth::generate_dataset(g, where);
  return where;
}

}  // namespace

TEST_CASE("config files, overrides, hashing and run directories") {
  TempTree tmp("reid_cfg_test");
  const fs::path cfg_file = tmp.root / "exp.cfg";
  {
    std::ofstream os(cfg_file);
    os << "# experiment setup\n";
    os << "height = 48\n";
    os << "width = 16\n";
    os << "epochs = 3\n";
    os << "lambda = 0.2\n";
    os << "variant = g\n";
  }
  harness::ExperimentConfig cfg = harness::parse_config_file(cfg_file);
  CHECK(cfg.model.input_h == 48);
  CHECK(cfg.epochs == 3);
  CHECK(cfg.lambda == doctest::Approx(0.2));
  CHECK(cfg.variant == harness::Variant::g);

  harness::apply_override(cfg, "tau", "0.7");
  CHECK(cfg.tau == doctest::Approx(0.7));
  CHECK_THROWS(harness::apply_override(cfg, "bogus_key", "1"));

  const std::uint64_t h1 = harness::config_hash(cfg);
  harness::apply_override(cfg, "seed", "99");
  CHECK(harness::config_hash(cfg) != h1);

  const fs::path dir = harness::run_directory(cfg, (tmp.root / "out").string());
  CHECK(dir.string().find("run-") != std::string::npos);
  CHECK(dir.string().find("-s99") != std::string::npos);

  // Environment root override applies when no explicit root is given.
  setenv("REID_OUT_ROOT", (tmp.root / "env_runs").c_str(), 1);
  const fs::path env_dir = harness::run_directory(cfg, "");
  CHECK(env_dir.string().find((tmp.root / "env_runs").string()) == 0);
  unsetenv("REID_OUT_ROOT");
}

TEST_CASE("training is deterministic, checkpoints round-trip, descriptors export") {
  TempTree tmp("reid_train_test");
  const fs::path data = make_tiny_dataset(tmp.root / "data");
  harness::ExperimentConfig cfg = tiny_config(data);

  const harness::TrainResult r1 = harness::train(cfg, (tmp.root / "o1").string());
  const harness::TrainResult r2 = harness::train(cfg, (tmp.root / "o2").string());
  REQUIRE(r1.log.epochs.size() == 2);
  CHECK(harness::TrainLog::same_trajectory(r1.log, r2.log));
  for (const auto& e : r1.log.epochs) {
    CHECK(std::isfinite(e.total_loss));
    CHECK(e.total_loss >= 0.0);
    CHECK(e.unconfident_fraction >= 0.0);
    CHECK(e.unconfident_fraction <= 1.0 + 1e-12);
  }

  // The written log parses back to the same trajectory.
  const harness::TrainLog parsed = harness::TrainLog::read(r1.run_dir / "trainlog.txt");
  CHECK(harness::TrainLog::same_trajectory(parsed, r1.log));

  // Exported descriptor files exist and parse.
  const auto gallery = reid::align::read_descriptor_file(r1.run_dir / "gallery.desc");
  const auto probes = reid::align::read_descriptor_file(r1.run_dir / "probe.desc");
  CHECK(gallery.size() == 4 * 3);  // 4 eval ids x 3 full views
  CHECK(probes.size() == 4 * 3);   // remaining half/occluded views
  CHECK(gallery[0].n_regions == 8);

  // Metrics from a checkpoint are reproducible bit for bit.
  const synth::DatasetManifest manifest = synth::load_manifest(data);
  const auto m1 = harness::evaluate_checkpoint(r1.checkpoint, manifest, cfg.variant, cfg.tau,
                                               cfg.epsilon, harness::EvalOptions{});
  const auto m2 = harness::evaluate_checkpoint(r1.checkpoint, manifest, cfg.variant, cfg.tau,
                                               cfg.epsilon, harness::EvalOptions{});
  REQUIRE(m1.cmc == m2.cmc);
  REQUIRE(m1.map == m2.map);
  REQUIRE(m1.pr_auc == m2.pr_auc);

  // Same-seed retraining reproduces the same checkpoint bytes.
  std::ifstream f1(r1.checkpoint, std::ios::binary), f2(r2.checkpoint, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
}

TEST_CASE("every variant trains and evaluates on the tiny benchmark") {
  TempTree tmp("reid_variant_test");
  const fs::path data = make_tiny_dataset(tmp.root / "data");
  harness::ExperimentConfig cfg = tiny_config(data);
  cfg.epochs = 1;
  for (const harness::Variant v : {harness::Variant::full, harness::Variant::g,
                                   harness::Variant::w, harness::Variant::d,
                                   harness::Variant::baseline}) {
    const reid::eval::MetricReport r = harness::run_variant(cfg, v, (tmp.root / "out").string());
    CHECK(r.cmc.size() == 10);
    CHECK(r.map >= 0.0);
    CHECK(r.map <= 1.0);
    CHECK(r.pr_auc >= 0.0);
    CHECK(r.pr_auc <= 1.0);
  }
}

namespace {

// Fraction of foreground feature cells (true label != background) whose
// argmax parse is correct, over the gallery split. Overall pixel accuracy is
// dominated by the background class, so this is the discriminating statistic.
double foreground_accuracy(const fs::path& checkpoint, const synth::DatasetManifest& manifest) {
  const auto [mcfg, params] = reid::model::load_checkpoint(checkpoint);
  std::int64_t correct = 0, total = 0;
  const int fh = mcfg.feature_h(), fw = mcfg.feature_w();
  for (const auto& e : manifest.split("gallery")) {
    const synth::SampleRecord rec = synth::load_sample(manifest, e);
    Tensor batch({1, 3, mcfg.input_h, mcfg.input_w});
    std::memcpy(batch.data(), rec.image.data(),
                sizeof(double) * static_cast<std::size_t>(rec.image.numel()));
    const auto out = reid::model::forward(batch, mcfg, params)[0];
    const std::vector<int> labels =
        synth::downsample_labels(rec.part_labels, mcfg.input_h, mcfg.input_w, mcfg.downsample);
    for (int y = 0; y < fh; ++y)
      for (int x = 0; x < fw; ++x) {
        const int lab = labels[static_cast<std::size_t>(y) * fw + x];
        if (lab == synth::kBackground) continue;
        int best = 0;
        for (int r = 1; r < mcfg.n_regions; ++r)
          if (out.parsing.probs.at(r, y, x) > out.parsing.probs.at(best, y, x)) best = r;
        correct += (best + 1 == lab);
        ++total;
      }
  }
  return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace

TEST_CASE("without parsing supervision the parser stays near chance") {
  TempTree tmp("reid_lambda_test");
  // Desk resolution: coarser grids have no foreground majority cells at all.
  const fs::path data = make_tiny_dataset(tmp.root / "data", 21, 96, 32);
  harness::ExperimentConfig with = tiny_config(data);
  with.model.input_h = 96;
  with.model.input_w = 32;
  with.epochs = 5;
  with.learning_rate = 0.08;
  harness::ExperimentConfig without = with;
  without.lambda = 0.0;

  const harness::TrainResult rw = harness::train(with, (tmp.root / "with").string());
  const harness::TrainResult ro = harness::train(without, (tmp.root / "without").string());
  const synth::DatasetManifest manifest = synth::load_manifest(data);
  const double acc_with = foreground_accuracy(rw.checkpoint, manifest);
  const double acc_without = foreground_accuracy(ro.checkpoint, manifest);
  CHECK(acc_with > acc_without + 0.1);

  // Identity/triplet objectives still fall without the parsing task.
  const auto& first = ro.log.epochs.front();
  const auto& last = ro.log.epochs.back();
  CHECK(last.id_loss + last.triplet_loss < first.id_loss + first.triplet_loss);
}

TEST_CASE("sweep produces one row per value and table files") {
  TempTree tmp("reid_sweep_test");
  const fs::path data = make_tiny_dataset(tmp.root / "data");
  harness::ExperimentConfig cfg = tiny_config(data);
  cfg.epochs = 1;
  const auto cells = harness::sweep(cfg, "tau", {0.3, 0.6}, {cfg.seed},
                                    (tmp.root / "out").string());
  REQUIRE(cells.size() == 2);
  for (const auto& c : cells) CHECK_FALSE(c.failed);

  bool found_table = false;
  for (const auto& e : fs::recursive_directory_iterator(tmp.root / "out"))
    if (e.path().filename() == "table.tsv") found_table = true;
  CHECK(found_table);
}

TEST_CASE("cli: gen-data determinism, train, eval round trip, viz, exit codes") {
  TempTree tmp("reid_cli_test");
  const std::string d1 = (tmp.root / "d1").string();
  const std::string d2 = (tmp.root / "d2").string();

  auto run = [](std::vector<std::string> args) {
    std::vector<const char*> argv = {"reid"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return harness::cli(static_cast<int>(argv.size()), argv.data());
  };

  CHECK(run({"gen-data", "--out", d1, "--seed", "7", "--ids", "8", "--images-per-id", "6",
             "--height", "48", "--width", "16"}) == 0);
  CHECK(run({"gen-data", "--out", d2, "--seed", "7", "--ids", "8", "--images-per-id", "6",
             "--height", "48", "--width", "16"}) == 0);
  std::ifstream m1(fs::path(d1) / "manifest.txt"), m2(fs::path(d2) / "manifest.txt");
  const std::string s1((std::istreambuf_iterator<char>(m1)), std::istreambuf_iterator<char>());
  const std::string s2((std::istreambuf_iterator<char>(m2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);

  const std::string out = (tmp.root / "runs").string();
  CHECK(run({"train", "--data", d1, "--out", out, "--seed", "5", "--set", "height=48",
             "--set", "width=16", "--set", "channels=16", "--set", "reduced_channels=8",
             "--set", "epochs=1", "--set", "batch_p=2", "--set", "batch_k=2"}) == 0);

  // Locate the run directory and evaluate the exported descriptors.
  fs::path run_dir;
  for (const auto& e : fs::directory_iterator(out))
    if (e.is_directory() && e.path().filename().string().rfind("run-", 0) == 0) run_dir = e.path();
  REQUIRE(!run_dir.empty());
  const std::string report_dir = (tmp.root / "report").string();
  CHECK(run({"eval", "--gallery-desc", (run_dir / "gallery.desc").string(), "--probe-desc",
             (run_dir / "probe.desc").string(), "--report-dir", report_dir}) == 0);
  const reid::eval::MetricReport rep = reid::eval::read_report(report_dir);
  CHECK(rep.cmc.size() == 10);

  // Visualization: three rasters per input.
  const synth::DatasetManifest man = synth::load_manifest(d1);
  const std::string viz_dir = (tmp.root / "viz").string();
  CHECK(run({"viz", "--checkpoint", (run_dir / "ckpt_final.bin").string(), "--out", viz_dir,
             (fs::path(d1) / man.entries[0].image_path).string(),
             (fs::path(d1) / man.entries[1].image_path).string()}) == 0);
  int rasters = 0;
  for (const auto& e : fs::directory_iterator(viz_dir)) {
    (void)e;
    ++rasters;
  }
  CHECK(rasters == 6);

  // Usage errors exit 2; runtime errors exit 1.
  CHECK(run({"no-such-command"}) == 2);
  CHECK(run({"train"}) == 1);  // no dataset given -> runtime failure
  CHECK(run({"eval", "--checkpoint", "/nonexistent.bin", "--data", d1}) == 1);
}
