#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "reid/align.hpp"
#include "reid/tensor.hpp"

namespace reid::eval {

/// Probe x gallery distances with identity labels. `missing` marks pairs
/// whose distance is undefined (no comparable regions); they rank after every
/// finite distance. `excluded` marks self-matches (identical image) that are
/// dropped from ranking and from the precision/recall pool.
struct ScoreMatrix {
  Tensor distances;  // [n_probe, n_gallery]
  std::vector<int> probe_ids;
  std::vector<int> gallery_ids;
  std::vector<unsigned char> missing;   // n_probe * n_gallery
  std::vector<unsigned char> excluded;  // n_probe * n_gallery

  int n_probe() const { return static_cast<int>(probe_ids.size()); }
  int n_gallery() const { return static_cast<int>(gallery_ids.size()); }
  void validate() const;
};

struct MetricReport {
  std::vector<double> cmc;  // rank 1..max_rank accuracies
  double map = 0.0;
  double pr_auc = 0.0;
};

/// Single-query CMC: rank-k value is the fraction of probes whose k nearest
/// gallery items (ascending distance, missing pairs last, ties broken by
/// gallery index) contain a correct identity. Throws if a probe has no
/// gallery match.
std::vector<double> cmc(const ScoreMatrix& scores, int max_rank);

/// Mean over probes of average precision of the ranked gallery list.
double mean_ap(const ScoreMatrix& scores);

/// Pools every probe-gallery pair as a binary sample scored by negative
/// distance, sweeps thresholds over the distinct scores and integrates the
/// precision-recall curve trapezoidally from an initial (recall 0,
/// precision 1) anchor. Missing pairs form a final threshold group below all
/// finite scores. Throws on all-positive or all-negative pools.
double pr_auc(const ScoreMatrix& scores);

struct EvalConfig {
  align::DistanceConfig distance;
  bool use_extended = true;  // false: visibility-weighted sum without score normalization
  int max_rank = 10;
};

ScoreMatrix score_matrix(const std::vector<align::PersonDescriptor>& gallery,
                         const std::vector<align::PersonDescriptor>& probes,
                         const EvalConfig& cfg);

MetricReport evaluate_retrieval(const std::vector<align::PersonDescriptor>& gallery,
                                const std::vector<align::PersonDescriptor>& probes,
                                const EvalConfig& cfg);

/// Writes metrics.txt (human readable), metrics.kv (key = value) and cmc.tsv
/// (rank, accuracy) under `dir`.
void write_report(const std::filesystem::path& dir, const MetricReport& report);

/// Parses a metrics.kv file back into a report (cmc from cmc.tsv alongside).
MetricReport read_report(const std::filesystem::path& dir);

}  // namespace reid::eval
