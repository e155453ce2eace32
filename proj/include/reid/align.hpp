#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "reid/segmap.hpp"
#include "reid/tensor.hpp"

namespace reid::align {

/// Spatial feature grid, channel-planar [channels, h, w]. `backbone` features
/// feed the parsing head; `reduced` features feed descriptors.
struct FeatureMap {
  enum class Kind { backbone, reduced };
  Tensor data;  // [channels, h, w]
  Kind kind = Kind::reduced;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

/// Per-person matching state: one confidence-weighted feature and one
/// visibility score per foreground region, plus the pooled high-entropy
/// feature with its score. Stored features have unit Euclidean norm or are
/// zero (zero only when the matching score is zero).
struct PersonDescriptor {
  int n_regions = 0;            // N including background
  int feature_dim = 0;          // c_new
  Tensor region_features;       // [N-1, c_new]
  std::vector<double> visibility;  // N-1 entries, pixel-mass units
  std::vector<double> unconfident_feature;  // c_new
  double unconfident_score = 0.0;

  std::string image_id;  // used by descriptor files and self-match exclusion
  int identity = -1;
};

struct DistanceConfig {
  double epsilon = 1e-8;      // denominator guard
  bool use_unconfident = true;  // include the pooled high-entropy term
};

/// Raised by extended_distance when no region has nonzero score mass in both
/// descriptors, so the normalized distance is undefined.
struct NoComparableRegions : std::runtime_error {
  NoComparableRegions() : std::runtime_error("no comparable regions between descriptors") {}
};

/// Probability-weighted sums of pixel features per region: row i holds
/// sum_g P(R_i|g) * g_f, optionally weighted per pixel by `weight` (the
/// confidence map, for the enhanced features). Raw sums; callers normalize.
Tensor region_features(const FeatureMap& f, const segmap::SemanticProbMap& p,
                       const segmap::ConfidenceMap* weight = nullptr);

/// S_i = sum_g P(R_i|g); sums to h*w over all N regions.
std::vector<double> visibility_scores(const segmap::SemanticProbMap& p);

/// Mask-weighted mean of pixel features plus the mask mass. When the mass
/// falls below eps the feature is the zero vector and the score is 0.
struct PooledFeature {
  std::vector<double> feature;
  double score = 0.0;
};
PooledFeature unconfident_feature(const FeatureMap& f, const segmap::UnconfidentMask& m,
                                  double eps = 1e-8);

/// Composes the full pipeline for one image: entropy, masks,
/// confidence-weighted region features (background dropped), visibility
/// scores, and the pooled high-entropy feature; unit-normalizes every nonzero
/// stored feature.
PersonDescriptor build_descriptor(const FeatureMap& f, const segmap::SemanticProbMap& p,
                                  double tau, double eps = 1e-8);

/// Visibility-weighted sum of per-region feature distances; zero when no
/// region is shared.
double aligned_distance(const PersonDescriptor& p, const PersonDescriptor& q,
                        const DistanceConfig& cfg);

/// Score-normalized distance over the shared regions plus (optionally) the
/// high-entropy pseudo-region. Throws NoComparableRegions when the score
/// denominator is below epsilon.
double extended_distance(const PersonDescriptor& p, const PersonDescriptor& q,
                         const DistanceConfig& cfg);

struct PairwiseResult {
  Tensor distances;                     // [B, B], symmetric, zero diagonal
  std::vector<unsigned char> missing;   // B*B flags for undefined pairs
  bool has_missing = false;
};
PairwiseResult pairwise_extended_distances(const std::vector<PersonDescriptor>& batch,
                                           const DistanceConfig& cfg);

// Descriptor container file. Layout documented in docs/formats.md and pinned
// by a round-trip test; all multi-byte fields little-endian, features and
// scores IEEE-754 binary32.
void write_descriptor_file(const std::filesystem::path& path,
                           const std::vector<PersonDescriptor>& descriptors);
std::vector<PersonDescriptor> read_descriptor_file(const std::filesystem::path& path);

}  // namespace reid::align
