#pragma once

#include "reid/tensor.hpp"

namespace reid::segmap {

/// Per-pixel probabilities over N semantic regions (channel-planar [N, h, w]).
/// Regions are indexed 1..N with the background as region N; channel plane
/// i holds region i+1.
struct SemanticProbMap {
  Tensor probs;  // [N, h, w]
  int n_regions = 0;

  int height() const { return probs.dim(1); }
  int width() const { return probs.dim(2); }
  int background_index() const { return n_regions; }

  /// Throws if probabilities leave [0,1] or a pixel's entries do not sum to 1
  /// within tol.
  void validate(double tol = 1e-6) const;
};

/// Entropy of the region distribution at each pixel, raw (nats) and
/// normalized by e_max = ln(N) so the uniform distribution maps to 1.
struct EntropyMap {
  Tensor raw;         // [h, w]
  Tensor normalized;  // [h, w]
  double e_max = 0.0;
};

/// Normalized entropy kept where it reaches the threshold, zero elsewhere.
/// Entries are either 0 or lie in [tau, 1].
struct UnconfidentMask {
  Tensor values;  // [h, w]
  double tau = 0.0;
};

/// Complement of the normalized entropy; 1 at fully confident pixels.
struct ConfidenceMap {
  Tensor values;  // [h, w]
};

EntropyMap entropy_map(const SemanticProbMap& p);

/// Fixed-threshold mask: keeps normalized entropy where it is >= tau
/// (inclusive). tau must lie in (0, 1).
UnconfidentMask unconfident_mask(const EntropyMap& e, double tau);

ConfidenceMap confidence_map(const EntropyMap& e);

/// Median with the midpoint convention for even counts.
double median_of(const Tensor& grid);

/// Per-image threshold at the median of the normalized entropies (midpoint of
/// the two central order statistics for even pixel counts). Entries >= the
/// median keep their value, so the kept set covers at least half the pixels.
UnconfidentMask dynamic_unconfident_mask(const EntropyMap& e);

}  // namespace reid::segmap
