#include <cmath>
#include <cstring>
#include <stdexcept>

#include "reid/harness.hpp"

namespace reid::harness {

namespace {

// Fixed palette, one color per region (background last, dark gray).
constexpr double kPalette[synthdata::kNumRegions][3] = {
    {0.90, 0.10, 0.10}, {0.10, 0.45, 0.90}, {0.95, 0.75, 0.10}, {0.10, 0.80, 0.30},
    {0.75, 0.15, 0.80}, {0.10, 0.85, 0.85}, {0.95, 0.45, 0.10}, {0.25, 0.25, 0.25}};

// Blue -> red heat ramp for [0,1] values.
void heat(double v, double rgb[3]) {
  v = std::clamp(v, 0.0, 1.0);
  rgb[0] = v;
  rgb[1] = 0.15 + 0.2 * (1.0 - std::abs(2.0 * v - 1.0));
  rgb[2] = 1.0 - v;
}

Tensor upsample_nearest(const Tensor& small, int factor) {
  const int C = small.dim(0), h = small.dim(1), w = small.dim(2);
  Tensor big({C, h * factor, w * factor});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < h * factor; ++y)
      for (int x = 0; x < w * factor; ++x) big.at(c, y, x) = small.at(c, y / factor, x / factor);
  return big;
}

}  // namespace

void visualize(const std::filesystem::path& checkpoint,
               const std::vector<std::filesystem::path>& images,
               const std::filesystem::path& out_dir, double tau) {
  const auto [mcfg, params] = model::load_checkpoint(checkpoint);
  std::filesystem::create_directories(out_dir);
  const int h = mcfg.feature_h(), w = mcfg.feature_w();

  for (const std::filesystem::path& path : images) {
    const Tensor image = synthdata::read_ppm(path);
    if (image.dim(1) != mcfg.input_h || image.dim(2) != mcfg.input_w)
      throw std::runtime_error("visualize: input resolution does not match checkpoint: " +
                               path.string());
    Tensor batch({1, 3, mcfg.input_h, mcfg.input_w});
    std::memcpy(batch.data(), image.data(),
                sizeof(double) * static_cast<std::size_t>(image.numel()));
    const model::ModelOutput out = model::forward(batch, mcfg, params)[0];
    const segmap::EntropyMap e = segmap::entropy_map(out.parsing);
    const segmap::UnconfidentMask mask = segmap::unconfident_mask(e, tau);

    Tensor parse({3, h, w}), entropy({3, h, w}), masked({3, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int best = 0;
        for (int r = 1; r < mcfg.n_regions; ++r)
          if (out.parsing.probs.at(r, y, x) > out.parsing.probs.at(best, y, x)) best = r;
        for (int c = 0; c < 3; ++c) parse.at(c, y, x) = kPalette[best][c];
        double rgb[3];
        heat(e.normalized.at(y, x), rgb);
        for (int c = 0; c < 3; ++c) entropy.at(c, y, x) = rgb[c];
        const double mv = mask.values.at(y, x);
        for (int c = 0; c < 3; ++c) masked.at(c, y, x) = mv;
      }

    const std::string stem = path.stem().string();
    synthdata::write_ppm(out_dir / (stem + "_parse.ppm"),
                         upsample_nearest(parse, mcfg.downsample));
    synthdata::write_ppm(out_dir / (stem + "_entropy.ppm"),
                         upsample_nearest(entropy, mcfg.downsample));
    synthdata::write_ppm(out_dir / (stem + "_mask.ppm"),
                         upsample_nearest(masked, mcfg.downsample));
  }
}

}  // namespace reid::harness
