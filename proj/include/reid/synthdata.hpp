#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "reid/rng.hpp"
#include "reid/tensor.hpp"

namespace reid::synthdata {

// Region indexing: 1..8 with background = 8.
inline constexpr int kNumRegions = 8;
inline constexpr int kBackground = 8;
inline constexpr int kNumParts = 7;  // foreground parts
inline constexpr const char* kPartNames[kNumRegions] = {
    "head", "torso", "upper-arm", "lower-arm", "upper-leg", "lower-leg", "foot", "background"};

enum class ViewTag { full, half, occluded };
const char* to_string(ViewTag v);
ViewTag view_from_string(const std::string& s);

/// Appearance of one identity: per-part base color and noise amplitude.
/// Identities act like distinct clothing; generation enforces a minimum
/// pairwise distance between appearance vectors.
struct IdentitySpec {
  int id = 0;
  std::array<std::array<double, 3>, kNumParts> base_color{};
  std::array<double, kNumParts> noise_amp{};

  std::vector<double> appearance_vector() const;  // 21 values
};

struct SampleRecord {
  Tensor image;                // [3, H, W] in [0,1]
  std::vector<int> part_labels;  // H*W values in [1, kNumRegions]
  int identity = 0;
  ViewTag view = ViewTag::full;

  int height() const { return image.dim(1); }
  int width() const { return image.dim(2); }
};

/// Scale/translation jitter plus the per-sample background and occluder
/// draws; filled from a seeded Rng by render_sample's caller or the generator.
struct VariationParams {
  double scale = 0.9;
  double shift_u = 0.0;   // fraction of width
  double shift_v = 0.0;   // fraction of height
  double bg_color[3] = {0.5, 0.5, 0.5};
  double bg_noise = 0.08;
  std::uint64_t pixel_seed = 0;  // texture noise stream
  // occluded views:
  int occlude_part = 5;          // region index 1..7 fully covered
  double occluder_color[3] = {0.2, 0.2, 0.2};
  int occluder_grow_px = 2;
};

VariationParams draw_variation(Rng& rng, ViewTag view);

/// Rasterizes the 7-part body over a textured background. Labels reflect the
/// rendered geometry exactly; pixels under the occluder are background.
SampleRecord render_sample(const IdentitySpec& identity, const VariationParams& params,
                           ViewTag view, int height, int width);

/// Canonical-coordinate containment test used by the rasterizer: returns the
/// region index at (u, v) or kBackground. Exposed so tests can re-derive
/// labels independently of the renderer's pixel loop.
int part_at(double u, double v);

/// Horizontal mirror of image and labels.
SampleRecord flip_horizontal(const SampleRecord& s);

/// Fills [y0, y0+eh) x [x0, x0+ew) with noise and relabels it background.
SampleRecord erase_rect(const SampleRecord& s, int y0, int x0, int eh, int ew,
                        std::uint64_t fill_seed);

/// Training augmentation: flip with probability 1/2, then random erasing
/// (probability 1/2, area 5-20% of the image). Labels follow the flip and
/// erased pixels become background.
SampleRecord augment(const SampleRecord& s, std::uint64_t seed);

/// Majority label per downsample x downsample block; ties go to the smallest
/// region index.
std::vector<int> downsample_labels(const std::vector<int>& labels, int height, int width,
                                   int downsample);

struct ManifestEntry {
  std::string split;  // train | gallery | probe
  int identity = 0;
  int index = 0;
  ViewTag view = ViewTag::full;
  std::string image_path;  // relative to the dataset root
  std::string label_path;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  int n_identities = 0;
  int images_per_identity = 0;
  int height = 0;
  int width = 0;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split(const std::string& name) const;
  void validate() const;  // split hygiene invariants
};

struct GenerateConfig {
  std::uint64_t seed = 7;
  int n_identities = 50;
  int images_per_identity = 20;
  int height = 96;
  int width = 32;
};

/// Deterministically renders the whole benchmark to `out_root`
/// (images/<split>/..., labels/<split>/..., manifest.txt). The first half of
/// the identities trains; the second half is evaluated with full views in
/// the gallery and half/occluded views as probes.
DatasetManifest generate_dataset(const GenerateConfig& cfg, const std::filesystem::path& out_root);

DatasetManifest load_manifest(const std::filesystem::path& root);

/// Reads one sample (8-bit rasters on disk -> [0,1] doubles).
SampleRecord load_sample(const DatasetManifest& m, const ManifestEntry& e);

// Raster IO: binary PPM (P6) for images, PGM (P5) for label maps.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const std::vector<int>& labels, int height,
               int width);
std::vector<int> read_pgm(const std::filesystem::path& path, int& height, int& width);

}  // namespace reid::synthdata
