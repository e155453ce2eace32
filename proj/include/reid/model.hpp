#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "reid/ad.hpp"
#include "reid/align.hpp"
#include "reid/segmap.hpp"
#include "reid/tensor.hpp"

namespace reid::model {

/// Compact convolutional encoder: log2(downsample) blocks of 3x3 stride-2
/// convolution + tanh, followed by two parallel 1x1 heads (parsing logits ->
/// per-pixel softmax over regions; channel reduction for descriptors). Two
/// normalized coordinate planes are appended to the RGB input so the parsing
/// head can use absolute position, and the last three reduced channels are
/// block-averaged RGB so descriptors keep a direct color path. Weights are
/// drawn from a seeded N(0, 1/sqrt(fan_in)) except the parsing head, which
/// starts at zero (uniform region probabilities); biases start at zero. The
/// choices of nonlinearity and initialization are fixed and relied on by the
/// regression tests.
struct ModelConfig {
  int input_h = 96;
  int input_w = 32;
  int downsample = 8;  // power of two; one stride-2 block per factor of 2
  int channels = 64;           // backbone output channels
  int reduced_channels = 32;   // descriptor feature dimension
  int n_regions = 8;           // region count including background (last index)
  int num_identities = 2;      // identity classifier width
  std::uint64_t seed = 1;

  int feature_h() const { return input_h / downsample; }
  int feature_w() const { return input_w / downsample; }
  int n_blocks() const;
  std::vector<int> block_channels() const;
  void validate() const;
};

/// Named parameter arrays in a stable order (checkpoint order).
struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> entries;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  std::int64_t total_size() const;
};

/// Seeded initialization; identical seeds give identical parameters.
/// Includes the per-region identity classifiers (foreground rows followed by
/// the row used for the pooled high-entropy feature).
ParamSet init_parameters(const ModelConfig& cfg);

/// Analytic parameter count for the architecture above.
std::int64_t parameter_count(const ModelConfig& cfg);

struct ModelOutput {
  align::FeatureMap backbone;         // [channels, h, w]
  segmap::SemanticProbMap parsing;    // [n_regions, h, w]
  align::FeatureMap reduced;          // [reduced_channels, h, w]
};

/// Appends the two coordinate planes to a [B,3,H,W] image batch.
Tensor with_coord_channels(const Tensor& images, const ModelConfig& cfg);

/// Plain (no-tape) forward for a batch of [B,3,H,W] images in [0,1].
std::vector<ModelOutput> forward(const Tensor& images, const ModelConfig& cfg,
                                 const ParamSet& params);

/// Tape handles for every parameter, in ParamSet order.
struct TapeParams {
  std::vector<std::pair<std::string, ad::Var>> vars;
  ad::Var at(const std::string& name) const;
};
TapeParams bind_parameters(ad::Tape& tape, const ParamSet& params);

struct TapeOutputs {
  ad::Var backbone;  // [B, channels, h, w]
  ad::Var parsing;   // [B, n_regions, h, w] (softmax probabilities)
  ad::Var reduced;   // [B, reduced_channels, h, w]
};

/// Differentiable forward; `images` must already carry coordinate planes
/// ([B, 5, H, W], see with_coord_channels). Produces values identical to the
/// plain forward.
TapeOutputs forward_tape(ad::Tape& tape, ad::Var images, const ModelConfig& cfg,
                         const TapeParams& params);

// Checkpoint container: text header with the config, then the named
// parameter arrays quantized to IEEE-754 binary32 little-endian. Loading
// yields exactly the stored 32-bit values, so load -> save round-trips to
// identical bytes. Layout in docs/formats.md.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ParamSet& params);
std::pair<ModelConfig, ParamSet> load_checkpoint(const std::filesystem::path& path);

}  // namespace reid::model
