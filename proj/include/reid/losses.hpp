#pragma once

#include <vector>

#include "reid/segmap.hpp"
#include "reid/tensor.hpp"

namespace reid::losses {

/// Per-region affine + softmax identity classifiers: one row per foreground
/// region, then the row applied to the pooled high-entropy feature.
struct RegionClassifiers {
  Tensor w;  // [rows, num_identities, feature_dim]
  Tensor b;  // [rows, num_identities]

  int rows() const { return w.dim(0); }
  int num_identities() const { return w.dim(1); }
  int feature_dim() const { return w.dim(2); }
};

struct LossWeights {
  double lambda = 0.1;  // parsing task weight
  double margin = 0.3;  // triplet margin

  void validate() const;
};

/// Cross entropy of one classifier row against `label` for a single feature.
double classifier_ce(const RegionClassifiers& cls, int row, const double* feature, int label);

/// Visibility-weighted identity loss over a batch.
///   feats [B, R, c]: plain per-region features, unit rows (R foreground rows)
///   shat  [B, R]:    visibility scores normalized by h*w
///   fun   [B, c]:    pooled high-entropy features, unit rows
///   sun_hat [B]:     its score normalized by h*w
/// Classifier row r serves region r; the final classifier row serves fun.
/// Returns the batch mean; with include_unconfident=false this is the plain
/// region-only identity loss.
double extended_id_loss(const Tensor& feats, const Tensor& shat, const Tensor& fun,
                        const std::vector<double>& sun_hat, const RegionClassifiers& cls,
                        const std::vector<int>& labels, bool include_unconfident = true);

/// Mean over anchors of max(0, hardest_positive - hardest_negative + margin)
/// on a precomputed symmetric distance matrix. Requires every identity to
/// appear at least twice and at least two identities.
double batch_hard_triplet(const Tensor& dist, const std::vector<int>& identities, double margin);

/// Mean per-pixel cross entropy between the probability map and ground-truth
/// region indices (values 1..N, flat row-major h*w).
double parsing_loss(const segmap::SemanticProbMap& p, const std::vector<int>& part_labels);

/// lambda * parsing + id + triplet.
double total_loss(double parsing, double id_ext, double triplet, const LossWeights& weights);

}  // namespace reid::losses
