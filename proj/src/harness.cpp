#include "reid/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "reid/ad.hpp"
#include "reid/losses.hpp"
#include "reid/rng.hpp"

namespace reid::harness {

const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::g: return "g";
    case Variant::w: return "w";
    case Variant::d: return "d";
    case Variant::baseline: return "baseline";
  }
  return "full";
}

Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "g") return Variant::g;
  if (s == "w") return Variant::w;
  if (s == "d") return Variant::d;
  if (s == "baseline") return Variant::baseline;
  throw std::invalid_argument("unknown variant: " + s);
}

void ExperimentConfig::validate() const {
  model.validate();
  if (batch_p < 2 || batch_k < 2)
    throw std::invalid_argument("config: batch needs >= 2 identities and >= 2 images each");
  if (learning_rate <= 0.0 || lr_decay_factor <= 0.0)
    throw std::invalid_argument("config: rates must be positive");
  if (epochs < 1 || lr_decay_epoch < 0 || warmup_epochs < 0 || cls_warmup_epochs < 0)
    throw std::invalid_argument("config: bad epoch counts");
  if (warmup_lr_scale <= 0.0 || warmup_cls_scale <= 0.0)
    throw std::invalid_argument("config: warm-up learning-rate scales must be > 0");
  if (lambda < 0.0 || margin < 0.0) throw std::invalid_argument("config: lambda/margin negative");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("config: tau must lie in (0,1)");
  if (epsilon <= 0.0) throw std::invalid_argument("config: epsilon must be positive");
}

// --------------------------------------------------------------------------
// Config file / overrides / hashing.

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  auto as_int = [&] { return std::stoi(value); };
  auto as_double = [&] { return std::stod(value); };
  if (key == "height") cfg.model.input_h = as_int();
  else if (key == "width") cfg.model.input_w = as_int();
  else if (key == "downsample") cfg.model.downsample = as_int();
  else if (key == "channels") cfg.model.channels = as_int();
  else if (key == "reduced_channels") cfg.model.reduced_channels = as_int();
  else if (key == "n_regions") cfg.model.n_regions = as_int();
  else if (key == "data") cfg.data_dir = value;
  else if (key == "learning_rate") cfg.learning_rate = as_double();
  else if (key == "lr_decay_factor") cfg.lr_decay_factor = as_double();
  else if (key == "lr_decay_epoch") cfg.lr_decay_epoch = as_int();
  else if (key == "epochs") cfg.epochs = as_int();
  else if (key == "warmup_epochs") cfg.warmup_epochs = as_int();
  else if (key == "cls_warmup_epochs") cfg.cls_warmup_epochs = as_int();
  else if (key == "warmup_lr_scale") cfg.warmup_lr_scale = as_double();
  else if (key == "warmup_cls_scale") cfg.warmup_cls_scale = as_double();
  else if (key == "batch_p") cfg.batch_p = as_int();
  else if (key == "batch_k") cfg.batch_k = as_int();
  else if (key == "lambda") cfg.lambda = as_double();
  else if (key == "tau") cfg.tau = as_double();
  else if (key == "margin") cfg.margin = as_double();
  else if (key == "epsilon") cfg.epsilon = as_double();
  else if (key == "seed") cfg.seed = std::stoull(value);
  else if (key == "variant") cfg.variant = variant_from_string(value);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path.string());
  ExperimentConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string key, eq, value;
    if (!(ls >> key)) continue;  // blank
    if (!(ls >> eq >> value) || eq != "=")
      throw std::runtime_error("config: expected 'key = value' at line " + std::to_string(lineno));
    apply_override(cfg, key, value);
  }
  return cfg;
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "height = " << cfg.model.input_h << "\n";
  os << "width = " << cfg.model.input_w << "\n";
  os << "downsample = " << cfg.model.downsample << "\n";
  os << "channels = " << cfg.model.channels << "\n";
  os << "reduced_channels = " << cfg.model.reduced_channels << "\n";
  os << "n_regions = " << cfg.model.n_regions << "\n";
  os << "data = " << cfg.data_dir << "\n";
  os << "learning_rate = " << cfg.learning_rate << "\n";
  os << "lr_decay_factor = " << cfg.lr_decay_factor << "\n";
  os << "lr_decay_epoch = " << cfg.lr_decay_epoch << "\n";
  os << "epochs = " << cfg.epochs << "\n";
  os << "warmup_epochs = " << cfg.warmup_epochs << "\n";
  os << "cls_warmup_epochs = " << cfg.cls_warmup_epochs << "\n";
  os << "warmup_lr_scale = " << cfg.warmup_lr_scale << "\n";
  os << "warmup_cls_scale = " << cfg.warmup_cls_scale << "\n";
  os << "batch_p = " << cfg.batch_p << "\n";
  os << "batch_k = " << cfg.batch_k << "\n";
  os << "lambda = " << cfg.lambda << "\n";
  os << "tau = " << cfg.tau << "\n";
  os << "margin = " << cfg.margin << "\n";
  os << "epsilon = " << cfg.epsilon << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "variant = " << to_string(cfg.variant) << "\n";
  return os.str();
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string s = serialize_config(cfg);
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::filesystem::path run_directory(const ExperimentConfig& cfg, const std::string& out_root) {
  std::string root = out_root;
  if (root.empty()) {
    if (const char* env = std::getenv("REID_OUT_ROOT")) root = env;
    if (root.empty()) root = "runs";
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "run-%016llx-s%llu",
                static_cast<unsigned long long>(config_hash(cfg)),
                static_cast<unsigned long long>(cfg.seed));
  return std::filesystem::path(root) / buf;
}

// --------------------------------------------------------------------------
// TrainLog.

void TrainLog::write(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("TrainLog: cannot write " + path.string());
  os.precision(17);
  os << "REIDLOG 1\n";
  os << "# epoch parsing id triplet total parse_acc sun_frac seconds\n";
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    const EpochStats& s = epochs[e];
    os << e << " " << s.parsing_loss << " " << s.id_loss << " " << s.triplet_loss << " "
       << s.total_loss << " " << s.parsing_accuracy << " " << s.unconfident_fraction << " "
       << s.wall_seconds << "\n";
  }
}

TrainLog TrainLog::read(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("TrainLog: cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "REIDLOG 1") throw std::runtime_error("TrainLog: bad magic");
  TrainLog log;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    int epoch = 0;
    EpochStats s;
    ls >> epoch >> s.parsing_loss >> s.id_loss >> s.triplet_loss >> s.total_loss >>
        s.parsing_accuracy >> s.unconfident_fraction >> s.wall_seconds;
    log.epochs.push_back(s);
  }
  return log;
}

bool TrainLog::same_trajectory(const TrainLog& a, const TrainLog& b) {
  if (a.epochs.size() != b.epochs.size()) return false;
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    const EpochStats &x = a.epochs[i], &y = b.epochs[i];
    if (x.parsing_loss != y.parsing_loss || x.id_loss != y.id_loss ||
        x.triplet_loss != y.triplet_loss || x.total_loss != y.total_loss ||
        x.parsing_accuracy != y.parsing_accuracy ||
        x.unconfident_fraction != y.unconfident_fraction)
      return false;
  }
  return true;
}

// --------------------------------------------------------------------------
// Loss graph.

LossGraph build_loss_graph(ad::Tape& tape, const Tensor& images3, const std::vector<int>& ids,
                           const std::vector<int>& labels_flat, const ExperimentConfig& cfg,
                           const model::ParamSet& params) {
  const model::ModelConfig& mcfg = cfg.model;
  const int B = images3.dim(0);
  const double hw = static_cast<double>(mcfg.feature_h()) * mcfg.feature_w();

  LossGraph g;
  g.params = model::bind_parameters(tape, params);
  g.images = tape.leaf(model::with_coord_channels(images3, mcfg));
  const model::TapeOutputs fwd = model::forward_tape(tape, g.images, mcfg, g.params);
  g.probs = fwd.parsing;
  g.parsing = tape.parsing_ce(fwd.parsing, labels_flat);

  const ad::Var F = fwd.reduced;
  const double eps = cfg.epsilon;

  if (cfg.variant == Variant::baseline) {
    const ad::Var gap = tape.unit_rows(tape.mean_spatial(F), eps);
    g.sun = tape.constant(Tensor::full({B}, hw));
    const ad::Var ft = tape.constant(Tensor({B, 0, mcfg.reduced_channels}));
    const ad::Var s = tape.constant(Tensor({B, 0}));
    const ad::Var dmat = tape.pairwise_extended(ft, s, gap, g.sun, eps, true);
    g.triplet = tape.batch_hard(dmat, ids, cfg.margin);
    g.id = tape.constant(Tensor::scalar(0.0));
    g.total = g.triplet;
    return g;
  }

  const ad::Var e = tape.entropy_norm(fwd.parsing);
  const ad::Var conf = tape.one_minus(e);
  const ad::Var ftil = tape.unit_rows(tape.drop_last(tape.region_pool(F, fwd.parsing, conf)), eps);
  const ad::Var svis = tape.drop_last(tape.region_mass(fwd.parsing));

  ad::Var fun, sun;
  if (cfg.variant == Variant::g) {
    fun = tape.unit_rows(tape.mean_spatial(F), eps);
    sun = tape.constant(Tensor::full({B}, hw));
  } else {
    const ad::Var mask =
        cfg.variant == Variant::d ? tape.median_threshold_keep(e) : tape.threshold_keep(e, cfg.tau);
    const ad::Var mass = tape.grid_sum(mask);
    fun = tape.unit_rows(tape.div_mass(tape.masked_pool(F, mask), mass, eps), eps);
    sun = tape.score_gate(mass, eps);
  }
  g.sun = sun;

  const bool use_un = cfg.variant != Variant::w;
  const ad::Var dmat = tape.pairwise_extended(ftil, svis, fun, sun, eps, use_un);
  g.triplet = tape.batch_hard(dmat, ids, cfg.margin);

  // Identity loss on the plain (confidence-unweighted) region features.
  const ad::Var fplain = tape.unit_rows(tape.drop_last(tape.region_pool(F, fwd.parsing)), eps);
  const ad::Var shat = tape.scale(tape.drop_last(tape.region_mass(fwd.parsing)), 1.0 / hw);
  const ad::Var logits = tape.rows_affine(fplain, g.params.at("cls.w"), g.params.at("cls.b"));
  ad::Var id = tape.weighted_ce_rows(logits, shat, ids);
  if (use_un) {
    const ad::Var fun_r = tape.reshape(fun, {B, 1, mcfg.reduced_channels});
    const ad::Var sun_hat = tape.scale(tape.reshape(sun, {B, 1}), 1.0 / hw);
    const ad::Var logits_un =
        tape.rows_affine(fun_r, g.params.at("clsun.w"), g.params.at("clsun.b"));
    id = tape.add(id, tape.weighted_ce_rows(logits_un, sun_hat, ids));
  }
  g.id = id;

  g.total = tape.add(tape.add(tape.scale(g.parsing, cfg.lambda), g.id), g.triplet);
  return g;
}

// --------------------------------------------------------------------------
// Training.

namespace {

struct TrainData {
  std::vector<synthdata::SampleRecord> samples;  // train split, preloaded
  std::vector<int> labels;                       // contiguous identity labels
  std::vector<std::vector<int>> by_identity;     // label -> sample indices
};

TrainData load_train_data(const synthdata::DatasetManifest& manifest) {
  TrainData data;
  std::map<int, int> relabel;
  for (const synthdata::ManifestEntry& e : manifest.split("train")) {
    if (!relabel.count(e.identity)) {
      const int next = static_cast<int>(relabel.size());
      relabel[e.identity] = next;
      data.by_identity.emplace_back();
    }
    const int label = relabel[e.identity];
    data.by_identity[static_cast<std::size_t>(label)].push_back(
        static_cast<int>(data.samples.size()));
    data.samples.push_back(synthdata::load_sample(manifest, e));
    data.labels.push_back(label);
  }
  return data;
}

}  // namespace

TrainResult train(const ExperimentConfig& cfg_in, const std::string& out_root) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  const synthdata::DatasetManifest manifest = synthdata::load_manifest(cfg.data_dir);
  if (manifest.height != cfg.model.input_h || manifest.width != cfg.model.input_w)
    throw std::runtime_error("train: dataset resolution does not match the model config");
  const TrainData data = load_train_data(manifest);
  const int n_ids = static_cast<int>(data.by_identity.size());
  if (n_ids < cfg.batch_p)
    throw std::runtime_error("train: fewer train identities than batch_p");
  for (const auto& v : data.by_identity)
    if (static_cast<int>(v.size()) < cfg.batch_k)
      throw std::runtime_error("train: an identity has fewer images than batch_k");

  model::ModelConfig mcfg = cfg.model;
  mcfg.num_identities = n_ids;
  mcfg.seed = cfg.seed;
  model::ParamSet params = model::init_parameters(mcfg);
  ExperimentConfig step_cfg = cfg;
  step_cfg.model = mcfg;

  const std::filesystem::path run_dir = run_directory(cfg, out_root);
  std::filesystem::create_directories(run_dir);
  {
    std::ofstream os(run_dir / "config.txt");
    os << serialize_config(cfg);
  }

  const int B = cfg.batch_size();
  const int steps_per_epoch = std::max(1, static_cast<int>(data.samples.size()) / B);
  const int H = mcfg.input_h, W = mcfg.input_w;
  const int fh = mcfg.feature_h(), fw = mcfg.feature_w();

  TrainResult result;
  result.run_dir = run_dir;
  result.num_identities = n_ids;
  std::filesystem::path last_ckpt;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool prologue = cfg.lambda > 0.0 && cfg.variant != Variant::baseline;
    const bool parse_phase = prologue && epoch < cfg.warmup_epochs;
    const bool cls_phase =
        prologue && !parse_phase && epoch < cfg.warmup_epochs + cfg.cls_warmup_epochs;
    const double lr = cfg.learning_rate *
                      (parse_phase ? cfg.warmup_lr_scale
                                   : (epoch >= cfg.lr_decay_epoch ? cfg.lr_decay_factor : 1.0));
    Rng erng(Rng::derive(cfg.seed, 0xE50C0000ULL + static_cast<std::uint64_t>(epoch)));

    std::vector<int> id_order(static_cast<std::size_t>(n_ids));
    for (int i = 0; i < n_ids; ++i) id_order[static_cast<std::size_t>(i)] = i;
    erng.shuffle(id_order);
    std::size_t id_cursor = 0;

    EpochStats stats;
    for (int step = 0; step < steps_per_epoch; ++step) {
      // Pick P identities (reshuffling the pool when it runs out), then K
      // images from each.
      std::vector<int> batch_samples;
      std::vector<int> batch_ids;
      for (int p = 0; p < cfg.batch_p; ++p) {
        if (id_cursor >= id_order.size()) {
          erng.shuffle(id_order);
          id_cursor = 0;
        }
        const int label = id_order[id_cursor++];
        std::vector<int> pool = data.by_identity[static_cast<std::size_t>(label)];
        erng.shuffle(pool);
        for (int k = 0; k < cfg.batch_k; ++k) {
          batch_samples.push_back(pool[static_cast<std::size_t>(k) % pool.size()]);
          batch_ids.push_back(label);
        }
      }

      Tensor images({B, 3, H, W});
      std::vector<int> labels_flat(static_cast<std::size_t>(B) * fh * fw);
      for (int slot = 0; slot < B; ++slot) {
        const synthdata::SampleRecord& base =
            data.samples[static_cast<std::size_t>(batch_samples[static_cast<std::size_t>(slot)])];
        const std::uint64_t aug_seed =
            Rng::derive(cfg.seed, 0xA0000000ULL + (static_cast<std::uint64_t>(epoch) << 24) +
                                      (static_cast<std::uint64_t>(step) << 8) +
                                      static_cast<std::uint64_t>(slot));
        const synthdata::SampleRecord aug = synthdata::augment(base, aug_seed);
        std::memcpy(images.data() + static_cast<std::int64_t>(slot) * 3 * H * W,
                    aug.image.data(), sizeof(double) * 3 * static_cast<std::size_t>(H) * W);
        const std::vector<int> ds =
            synthdata::downsample_labels(aug.part_labels, H, W, mcfg.downsample);
        std::copy(ds.begin(), ds.end(),
                  labels_flat.begin() + static_cast<std::ptrdiff_t>(slot) * fh * fw);
      }

      ad::Tape tape;
      const LossGraph graph = build_loss_graph(tape, images, batch_ids, labels_flat, step_cfg,
                                               params);
      const double total = tape.val(graph.total)[0];
      if (!std::isfinite(total))
        throw std::runtime_error("train: loss diverged (non-finite) at epoch " +
                                 std::to_string(epoch));
      if (parse_phase) {
        // Stage 1, two supervised channels. The parsing task shapes the
        // whole encoder including its own head; the identity task shapes the
        // trunk and the classifiers but is kept away from the parsing head,
        // whose output it would otherwise push wholesale into the background
        // (shrinking the visibility weights lowers the identity loss
        // unconditionally).
        tape.backward(graph.parsing);
        for (std::size_t i = 0; i < params.entries.size(); ++i) {
          if (params.entries[i].first.rfind("cls", 0) == 0) continue;
          Tensor& t = params.entries[i].second;
          const Tensor& grad = tape.grad(graph.params.vars[i].second);
          for (std::int64_t j = 0; j < t.numel(); ++j) t[j] -= lr * grad[j];
        }
        tape.backward(graph.id);
        const double lr_cls = cfg.learning_rate * cfg.warmup_cls_scale;
        for (std::size_t i = 0; i < params.entries.size(); ++i) {
          const std::string& name = params.entries[i].first;
          if (name.rfind("parse", 0) == 0) continue;
          const bool is_cls = name.rfind("cls", 0) == 0;
          const double step_lr = is_cls ? lr_cls : cfg.learning_rate;
          Tensor& t = params.entries[i].second;
          const Tensor& grad = tape.grad(graph.params.vars[i].second);
          for (std::int64_t j = 0; j < t.numel(); ++j) t[j] -= step_lr * grad[j];
        }
      } else if (cls_phase) {
        // Stage 2: encoder frozen, classifiers fit its now-stationary output.
        tape.backward(graph.id);
        const double lr_cls = cfg.learning_rate * cfg.warmup_cls_scale;
        for (std::size_t i = 0; i < params.entries.size(); ++i) {
          if (params.entries[i].first.rfind("cls", 0) != 0) continue;
          Tensor& t = params.entries[i].second;
          const Tensor& grad = tape.grad(graph.params.vars[i].second);
          for (std::int64_t j = 0; j < t.numel(); ++j) t[j] -= lr_cls * grad[j];
        }
      } else {
        tape.backward(graph.total);
        for (std::size_t i = 0; i < params.entries.size(); ++i) {
          Tensor& t = params.entries[i].second;
          const Tensor& grad = tape.grad(graph.params.vars[i].second);
          for (std::int64_t j = 0; j < t.numel(); ++j) t[j] -= lr * grad[j];
        }
      }

      stats.parsing_loss += tape.val(graph.parsing)[0];
      stats.id_loss += tape.val(graph.id)[0];
      stats.triplet_loss += tape.val(graph.triplet)[0];
      stats.total_loss += total;
      // Parsing accuracy: argmax over channels vs the downsampled labels.
      const Tensor& probs = tape.val(graph.probs);
      const std::int64_t fhw = static_cast<std::int64_t>(fh) * fw;
      std::int64_t correct = 0;
      for (int bi = 0; bi < B; ++bi)
        for (std::int64_t g = 0; g < fhw; ++g) {
          int best = 0;
          for (int r = 1; r < mcfg.n_regions; ++r)
            if (probs[(static_cast<std::int64_t>(bi) * mcfg.n_regions + r) * fhw + g] >
                probs[(static_cast<std::int64_t>(bi) * mcfg.n_regions + best) * fhw + g])
              best = r;
          if (best + 1 == labels_flat[static_cast<std::size_t>(bi * fhw + g)]) ++correct;
        }
      stats.parsing_accuracy += static_cast<double>(correct) / static_cast<double>(B * fhw);
      const Tensor& sun = tape.val(graph.sun);
      double frac = 0.0;
      for (int bi = 0; bi < B; ++bi) frac += sun[bi] / (static_cast<double>(fh) * fw);
      stats.unconfident_fraction += frac / B;
    }

    stats.parsing_loss /= steps_per_epoch;
    stats.id_loss /= steps_per_epoch;
    stats.triplet_loss /= steps_per_epoch;
    stats.total_loss /= steps_per_epoch;
    stats.parsing_accuracy /= steps_per_epoch;
    stats.unconfident_fraction /= steps_per_epoch;
    stats.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(stats);

    char name[32];
    std::snprintf(name, sizeof(name), "ckpt_epoch%03d.bin", epoch);
    last_ckpt = run_dir / name;
    model::save_checkpoint(last_ckpt, mcfg, params);
  }

  result.checkpoint = run_dir / "ckpt_final.bin";
  std::filesystem::copy_file(last_ckpt, result.checkpoint,
                             std::filesystem::copy_options::overwrite_existing);
  result.log.write(run_dir / "trainlog.txt");

  // Export gallery/probe descriptors from the final checkpoint.
  const auto [ck_cfg, ck_params] = model::load_checkpoint(result.checkpoint);
  for (const char* name : {"gallery", "probe"}) {
    const std::string split(name);
    const auto entries = manifest.split(split);
    if (entries.empty()) continue;
    const auto descriptors = compute_descriptors(ck_cfg, ck_params, manifest, entries,
                                                 cfg.variant, cfg.tau, cfg.epsilon);
    align::write_descriptor_file(run_dir / (split + ".desc"), descriptors);
  }
  return result;
}

// --------------------------------------------------------------------------
// Descriptors / evaluation.

namespace {

align::PersonDescriptor descriptor_for_variant(const model::ModelOutput& out, Variant variant,
                                               double tau, double eps) {
  const int c = out.reduced.channels();
  const int h = out.reduced.height(), w = out.reduced.width();
  const double hw = static_cast<double>(h) * w;
  const int N = out.parsing.n_regions;

  auto normalized_gap = [&] {
    std::vector<double> gap(static_cast<std::size_t>(c), 0.0);
    const std::int64_t hw64 = static_cast<std::int64_t>(h) * w;
    for (int k = 0; k < c; ++k) {
      double acc = 0.0;
      const double* plane = out.reduced.data.data() + static_cast<std::int64_t>(k) * hw64;
      for (std::int64_t g = 0; g < hw64; ++g) acc += plane[g];
      gap[static_cast<std::size_t>(k)] = acc / hw;
    }
    double n2 = 0.0;
    for (double v : gap) n2 += v * v;
    const double n = std::sqrt(n2);
    if (n >= eps)
      for (double& v : gap) v /= n;
    else
      for (double& v : gap) v = 0.0;
    return gap;
  };

  if (variant == Variant::baseline) {
    align::PersonDescriptor d;
    d.n_regions = N;
    d.feature_dim = c;
    d.region_features = Tensor({N - 1, c});
    d.visibility.assign(static_cast<std::size_t>(N - 1), 0.0);
    d.unconfident_feature = normalized_gap();
    d.unconfident_score = hw;
    return d;
  }

  if (variant == Variant::d) {
    // Fixed-threshold pipeline with the per-image median mask for the pooled
    // high-entropy feature.
    const segmap::EntropyMap e = segmap::entropy_map(out.parsing);
    const segmap::UnconfidentMask mask = segmap::dynamic_unconfident_mask(e);
    align::PersonDescriptor d = align::build_descriptor(out.reduced, out.parsing, tau, eps);
    const align::PooledFeature un = align::unconfident_feature(out.reduced, mask, eps);
    d.unconfident_feature = un.feature;
    double n2 = 0.0;
    for (double v : d.unconfident_feature) n2 += v * v;
    const double n = std::sqrt(n2);
    if (n >= eps)
      for (double& v : d.unconfident_feature) v /= n;
    else
      for (double& v : d.unconfident_feature) v = 0.0;
    d.unconfident_score = un.score;
    return d;
  }

  align::PersonDescriptor d = align::build_descriptor(out.reduced, out.parsing, tau, eps);
  if (variant == Variant::g) {
    d.unconfident_feature = normalized_gap();
    d.unconfident_score = hw;
  }
  return d;
}

}  // namespace

std::vector<align::PersonDescriptor> compute_descriptors(
    const model::ModelConfig& mcfg, const model::ParamSet& params,
    const synthdata::DatasetManifest& data, const std::vector<synthdata::ManifestEntry>& entries,
    Variant variant, double tau, double epsilon) {
  std::vector<align::PersonDescriptor> out(entries.size());
  constexpr int kBatch = 32;
  const int H = mcfg.input_h, W = mcfg.input_w;
  for (std::size_t start = 0; start < entries.size(); start += kBatch) {
    const int B = static_cast<int>(std::min<std::size_t>(kBatch, entries.size() - start));
    Tensor images({B, 3, H, W});
    for (int b = 0; b < B; ++b) {
      const synthdata::SampleRecord rec = synthdata::load_sample(data, entries[start + b]);
      if (rec.height() != H || rec.width() != W)
        throw std::runtime_error("compute_descriptors: sample resolution mismatch");
      std::memcpy(images.data() + static_cast<std::int64_t>(b) * 3 * H * W, rec.image.data(),
                  sizeof(double) * 3 * static_cast<std::size_t>(H) * W);
    }
    const std::vector<model::ModelOutput> outputs = model::forward(images, mcfg, params);
    for (int b = 0; b < B; ++b) {
      align::PersonDescriptor d =
          descriptor_for_variant(outputs[static_cast<std::size_t>(b)], variant, tau, epsilon);
      d.image_id = entries[start + b].image_path;
      d.identity = entries[start + b].identity;
      out[start + b] = std::move(d);
    }
  }
  return out;
}

eval::MetricReport evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                       const synthdata::DatasetManifest& data, Variant variant,
                                       double tau, double epsilon, const EvalOptions& opts) {
  const auto [mcfg, params] = model::load_checkpoint(checkpoint);
  const auto gallery_entries = data.split("gallery");
  const auto probe_entries = data.split("probe");
  const auto gallery =
      compute_descriptors(mcfg, params, data, gallery_entries, variant, tau, epsilon);
  const auto probes = compute_descriptors(mcfg, params, data, probe_entries, variant, tau, epsilon);
  eval::EvalConfig ecfg;
  ecfg.distance.epsilon = epsilon;
  ecfg.distance.use_unconfident = variant != Variant::w;
  ecfg.use_extended = opts.use_extended;
  ecfg.max_rank = opts.max_rank;
  return eval::evaluate_retrieval(gallery, probes, ecfg);
}

eval::MetricReport run_variant(const ExperimentConfig& cfg_in, Variant variant,
                               const std::string& out_root) {
  ExperimentConfig cfg = cfg_in;
  cfg.variant = variant;
  const TrainResult tr = train(cfg, out_root);
  const synthdata::DatasetManifest manifest = synthdata::load_manifest(cfg.data_dir);
  const eval::MetricReport report =
      evaluate_checkpoint(tr.checkpoint, manifest, variant, cfg.tau, cfg.epsilon, EvalOptions{});
  eval::write_report(tr.run_dir / "metrics", report);
  return report;
}

// --------------------------------------------------------------------------
// Sweeps.

std::vector<SweepCell> sweep(const ExperimentConfig& cfg_in, const std::string& parameter,
                             const std::vector<double>& values,
                             const std::vector<std::uint64_t>& seeds, const std::string& out_root) {
  if (values.empty()) throw std::invalid_argument("sweep: no values given");
  if (parameter != "lambda" && parameter != "tau")
    throw std::invalid_argument("sweep: parameter must be lambda or tau");
  const std::vector<std::uint64_t> seed_list = seeds.empty()
                                                   ? std::vector<std::uint64_t>{cfg_in.seed}
                                                   : seeds;
  std::vector<SweepCell> cells;
  for (double value : values) {
    SweepCell cell;
    cell.value = value;
    int done = 0;
    for (std::uint64_t seed : seed_list) {
      ExperimentConfig cfg = cfg_in;
      cfg.seed = seed;
      if (parameter == "lambda")
        cfg.lambda = value;
      else
        cfg.tau = value;
      try {
        const eval::MetricReport r = run_variant(cfg, cfg.variant, out_root);
        if (cell.report.cmc.empty()) cell.report.cmc.assign(r.cmc.size(), 0.0);
        for (std::size_t k = 0; k < r.cmc.size(); ++k) cell.report.cmc[k] += r.cmc[k];
        cell.report.map += r.map;
        cell.report.pr_auc += r.pr_auc;
        ++done;
      } catch (const std::exception& ex) {
        cell.failed = true;
        cell.error = ex.what();
      }
    }
    if (done > 0) {
      for (double& v : cell.report.cmc) v /= done;
      cell.report.map /= done;
      cell.report.pr_auc /= done;
    }
    cells.push_back(std::move(cell));
  }

  // Emit the sweep table and plot-ready two-column files.
  ExperimentConfig dir_cfg = cfg_in;
  const std::filesystem::path dir =
      run_directory(dir_cfg, out_root).parent_path() /
      ("sweep-" + parameter + "-" + std::to_string(config_hash(cfg_in) & 0xFFFFFF));
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "table.tsv");
    os.precision(10);
    os << "# " << parameter << "\trank1\tmap\tpr_auc\tstatus\n";
    for (const SweepCell& c : cells)
      os << c.value << "\t" << (c.report.cmc.empty() ? 0.0 : c.report.cmc[0]) << "\t"
         << c.report.map << "\t" << c.report.pr_auc << "\t" << (c.failed ? "failed" : "ok")
         << "\n";
  }
  for (const char* metric : {"rank1", "map", "pr_auc"}) {
    std::ofstream os(dir / (parameter + std::string("_") + metric + ".tsv"));
    os.precision(10);
    for (const SweepCell& c : cells) {
      double v = 0.0;
      if (std::string(metric) == "rank1") v = c.report.cmc.empty() ? 0.0 : c.report.cmc[0];
      if (std::string(metric) == "map") v = c.report.map;
      if (std::string(metric) == "pr_auc") v = c.report.pr_auc;
      os << c.value << "\t" << v << "\n";
    }
  }
  return cells;
}

}  // namespace reid::harness
