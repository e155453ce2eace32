#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "reid/align.hpp"
#include "reid/eval.hpp"
#include "reid/model.hpp"
#include "reid/synthdata.hpp"

namespace reid::harness {

/// Experimental arms: `full` is the complete pipeline; `g` swaps the pooled
/// high-entropy feature for a plain global-average feature scored h*w; `w`
/// drops the high-entropy term from both the distance and the identity loss;
/// `d` thresholds the mask at the per-image entropy median instead of tau.
/// `baseline` is the global-average-pooling triplet model used as the
/// reference arm.
enum class Variant { full, g, w, d, baseline };
const char* to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct ExperimentConfig {
  model::ModelConfig model;
  std::string data_dir;

  // plain SGD; the learning rate drops once by lr_decay_factor
  double learning_rate = 0.05;
  double lr_decay_factor = 0.1;
  int lr_decay_epoch = 20;
  int epochs = 30;
  // Initial epochs that descend only the parsing term. A randomly
  // initialized encoder cannot survive the visibility-weighted identity and
  // triplet gradients before the parser has found the parts: the region
  // masses collapse into the background and the run never recovers. The
  // reference setup avoids this with a pretrained backbone; the warm-up is
  // the desk-scale stand-in. Skipped when lambda == 0 (no parsing task) and
  // by the pooling baseline (no parsing term in its objective).
  int warmup_epochs = 5;
  double warmup_lr_scale = 6.0;  // parsing updates during the warm-up stage
  // Second prologue stage: the encoder is frozen and only the identity
  // classifiers train, so they fit stationary features. Their gradients carry
  // the visibility weights (a few percent each), hence the larger steps.
  int cls_warmup_epochs = 3;
  double warmup_cls_scale = 10.0;
  int batch_p = 4;  // identities per batch
  int batch_k = 4;  // images per identity

  double lambda = 0.1;  // parsing weight
  double tau = 0.5;     // entropy mask threshold
  double margin = 0.3;  // triplet margin
  double epsilon = 1e-8;

  std::uint64_t seed = 1;
  Variant variant = Variant::full;

  int batch_size() const { return batch_p * batch_k; }
  void validate() const;
};

/// key = value file with '#' comments; unknown keys are rejected.
ExperimentConfig parse_config_file(const std::filesystem::path& path);
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);
/// Canonical one-key-per-line form (also the hash input and run-dir echo).
std::string serialize_config(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);
/// out_root/run-<hash>-s<seed>; out_root falls back to $REID_OUT_ROOT, then
/// "runs".
std::filesystem::path run_directory(const ExperimentConfig& cfg, const std::string& out_root);

struct EpochStats {
  double parsing_loss = 0.0;
  double id_loss = 0.0;
  double triplet_loss = 0.0;
  double total_loss = 0.0;
  double parsing_accuracy = 0.0;
  double unconfident_fraction = 0.0;  // batch-mean gated S_un / (h*w)
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;

  void write(const std::filesystem::path& path) const;
  static TrainLog read(const std::filesystem::path& path);
  /// Field-wise equality ignoring wall-clock.
  static bool same_trajectory(const TrainLog& a, const TrainLog& b);
};

struct TrainResult {
  std::filesystem::path run_dir;
  std::filesystem::path checkpoint;  // final epoch
  TrainLog log;
  int num_identities = 0;  // classifier width used
};

/// One training step's differentiable graph plus the handles the trainer and
/// the gradient checks need.
struct LossGraph {
  ad::Var total, parsing, id, triplet;
  ad::Var probs;   // parsing probabilities [B,N,h,w]
  ad::Var sun;     // pooled-feature scores [B]
  ad::Var images;  // input leaf (with coordinate planes)
  model::TapeParams params;
};

/// Builds the full objective for one batch: images3 [B,3,H,W], per-sample
/// identity labels (contiguous, < model.num_identities) and feature-resolution
/// part labels (flat B*h*w, values 1..N).
LossGraph build_loss_graph(ad::Tape& tape, const Tensor& images3, const std::vector<int>& ids,
                           const std::vector<int>& labels_flat, const ExperimentConfig& cfg,
                           const model::ParamSet& params);

/// Full training loop: seeded PxK batches, augmentation, forward through the
/// tape, SGD step, per-epoch checkpoint + log, then gallery/probe descriptor
/// export from the final checkpoint. Aborts on non-finite loss.
TrainResult train(const ExperimentConfig& cfg, const std::string& out_root);

/// Descriptors for a set of samples under a variant's conventions.
std::vector<align::PersonDescriptor> compute_descriptors(
    const model::ModelConfig& mcfg, const model::ParamSet& params,
    const synthdata::DatasetManifest& data, const std::vector<synthdata::ManifestEntry>& entries,
    Variant variant, double tau, double epsilon);

struct EvalOptions {
  bool use_extended = true;  // false: unnormalized visibility-weighted distance
  int max_rank = 10;
};

/// Loads a checkpoint and evaluates the manifest's gallery/probe splits.
eval::MetricReport evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                       const synthdata::DatasetManifest& data, Variant variant,
                                       double tau, double epsilon, const EvalOptions& opts);

/// Train + evaluate one arm under otherwise identical config.
eval::MetricReport run_variant(const ExperimentConfig& cfg, Variant variant,
                               const std::string& out_root);

struct SweepCell {
  double value = 0.0;
  bool failed = false;
  std::string error;
  eval::MetricReport report;  // seed-averaged
};

/// Trains one model per parameter value (parameter is "lambda" or "tau"),
/// averaging metrics over `seeds`. Failures are recorded per cell and the
/// sweep continues. Writes table.tsv plus one two-column file per metric
/// under sweep_dir.
std::vector<SweepCell> sweep(const ExperimentConfig& cfg, const std::string& parameter,
                             const std::vector<double>& values,
                             const std::vector<std::uint64_t>& seeds, const std::string& out_root);

/// For each input image writes three rasters into out_dir: the color-coded
/// argmax parsing map, the normalized-entropy heatmap, and the thresholded
/// mask (all upsampled to input resolution).
void visualize(const std::filesystem::path& checkpoint,
               const std::vector<std::filesystem::path>& images,
               const std::filesystem::path& out_dir, double tau);

/// Subcommands: gen-data, train, eval, ablate, viz. Returns 0 on success,
/// 2 on usage errors, 1 on runtime failures.
int cli(int argc, const char* const* argv);

}  // namespace reid::harness
