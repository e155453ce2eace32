#include <cstring>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "reid/harness.hpp"

namespace reid::harness {

namespace {

std::vector<double> parse_csv_doubles(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::vector<std::uint64_t> parse_csv_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  return out;
}

ExperimentConfig config_from(const std::string& config_file,
                             const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  if (!config_file.empty()) cfg = parse_config_file(config_file);
  for (const std::string& kv : overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

}  // namespace

int cli(int argc, const char* const* argv) {
  CLI::App app{"entropy-masked semantic alignment for person re-identification"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "render the synthetic benchmark");
  std::string gen_out = "data";
  synthdata::GenerateConfig gcfg;
  gen->add_option("--out", gen_out, "dataset root directory");
  gen->add_option("--seed", gcfg.seed, "generation seed");
  gen->add_option("--ids", gcfg.n_identities, "number of identities");
  gen->add_option("--images-per-id", gcfg.images_per_identity, "images per identity");
  gen->add_option("--height", gcfg.height, "image height");
  gen->add_option("--width", gcfg.width, "image width");

  // shared train-ish options
  std::string config_file, data_dir, out_root, variant_name;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key = value config file");
    cmd->add_option("--set", overrides, "override config entries (key=value)")->take_all();
    cmd->add_option("--data", data_dir, "dataset root");
    cmd->add_option("--out", out_root, "output root (default $REID_OUT_ROOT or ./runs)");
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](std::uint64_t s) { seed = s; seed_given = true; }, "experiment seed");
    cmd->add_option("--variant", variant_name, "full | g | w | d | baseline");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model and export descriptors");
  add_common(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or descriptor files");
  add_common(eval_cmd);
  std::string ckpt_path, gallery_desc, probe_desc, eval_out = "metrics";
  std::string distance_kind = "extended";
  eval_cmd->add_option("--checkpoint", ckpt_path, "trained checkpoint file");
  eval_cmd->add_option("--gallery-desc", gallery_desc, "gallery descriptor file");
  eval_cmd->add_option("--probe-desc", probe_desc, "probe descriptor file");
  eval_cmd->add_option("--report-dir", eval_out, "directory for metric files");
  eval_cmd->add_option("--distance", distance_kind, "extended | aligned");

  auto* ablate_cmd = app.add_subcommand("ablate", "sweep lambda or tau");
  add_common(ablate_cmd);
  std::string sweep_param = "tau", sweep_values, sweep_seeds;
  ablate_cmd->add_option("--param", sweep_param, "lambda | tau")->required();
  ablate_cmd->add_option("--values", sweep_values, "comma-separated values")->required();
  ablate_cmd->add_option("--seeds", sweep_seeds, "comma-separated seeds (default: config seed)");

  auto* viz_cmd = app.add_subcommand("viz", "export parsing/entropy/mask rasters");
  std::vector<std::string> viz_inputs;
  std::string viz_out = "viz", viz_ckpt;
  double viz_tau = 0.5;
  viz_cmd->add_option("--checkpoint", viz_ckpt, "trained checkpoint file")->required();
  viz_cmd->add_option("--out", viz_out, "output directory");
  viz_cmd->add_option("--tau", viz_tau, "mask threshold");
  viz_cmd->add_option("inputs", viz_inputs, "input images (PPM)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const synthdata::DatasetManifest m = synthdata::generate_dataset(gcfg, gen_out);
      std::cout << "wrote " << m.entries.size() << " samples under " << gen_out << "\n";
      return 0;
    }

    ExperimentConfig cfg = config_from(config_file, overrides);
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    if (seed_given) cfg.seed = seed;
    if (!variant_name.empty()) cfg.variant = variant_from_string(variant_name);

    if (train_cmd->parsed()) {
      const TrainResult r = train(cfg, out_root);
      const synthdata::DatasetManifest manifest = synthdata::load_manifest(cfg.data_dir);
      const eval::MetricReport report = evaluate_checkpoint(r.checkpoint, manifest, cfg.variant,
                                                            cfg.tau, cfg.epsilon, EvalOptions{});
      eval::write_report(r.run_dir / "metrics", report);
      std::cout << "run dir: " << r.run_dir.string() << "\n";
      std::cout << "rank-1 " << (report.cmc.empty() ? 0.0 : report.cmc[0]) << "  mAP "
                << report.map << "  PR-AUC " << report.pr_auc << "\n";
      return 0;
    }

    if (eval_cmd->parsed()) {
      eval::MetricReport report;
      if (!gallery_desc.empty() || !probe_desc.empty()) {
        if (gallery_desc.empty() || probe_desc.empty())
          throw std::invalid_argument("eval: need both --gallery-desc and --probe-desc");
        const auto gallery = align::read_descriptor_file(gallery_desc);
        const auto probes = align::read_descriptor_file(probe_desc);
        eval::EvalConfig ecfg;
        ecfg.distance.epsilon = cfg.epsilon;
        ecfg.distance.use_unconfident = cfg.variant != Variant::w;
        ecfg.use_extended = distance_kind != "aligned";
        report = eval::evaluate_retrieval(gallery, probes, ecfg);
      } else {
        if (ckpt_path.empty())
          throw std::invalid_argument("eval: need --checkpoint or descriptor files");
        const synthdata::DatasetManifest manifest = synthdata::load_manifest(cfg.data_dir);
        EvalOptions opts;
        opts.use_extended = distance_kind != "aligned";
        report = evaluate_checkpoint(ckpt_path, manifest, cfg.variant, cfg.tau, cfg.epsilon, opts);
      }
      eval::write_report(eval_out, report);
      std::cout << "rank-1 " << (report.cmc.empty() ? 0.0 : report.cmc[0]) << "  mAP "
                << report.map << "  PR-AUC " << report.pr_auc << "\n";
      return 0;
    }

    if (ablate_cmd->parsed()) {
      const std::vector<double> values = parse_csv_doubles(sweep_values);
      const std::vector<std::uint64_t> seeds = parse_csv_seeds(sweep_seeds);
      const std::vector<SweepCell> cells = sweep(cfg, sweep_param, values, seeds, out_root);
      for (const SweepCell& c : cells) {
        std::cout << sweep_param << "=" << c.value;
        if (c.failed)
          std::cout << "  FAILED: " << c.error << "\n";
        else
          std::cout << "  rank-1 " << (c.report.cmc.empty() ? 0.0 : c.report.cmc[0]) << "  mAP "
                    << c.report.map << "  PR-AUC " << c.report.pr_auc << "\n";
      }
      return 0;
    }

    if (viz_cmd->parsed()) {
      std::vector<std::filesystem::path> inputs(viz_inputs.begin(), viz_inputs.end());
      visualize(viz_ckpt, inputs, viz_out, viz_tau);
      std::cout << "wrote " << 3 * inputs.size() << " rasters under " << viz_out << "\n";
      return 0;
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace reid::harness
