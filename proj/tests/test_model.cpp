#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "reid/ad.hpp"
#include "reid/model.hpp"
#include "reid/rng.hpp"

using reid::Rng;
using reid::Tensor;
namespace model = reid::model;

namespace {

model::ModelConfig toy_config() {
  model::ModelConfig cfg;
  cfg.input_h = 32;
  cfg.input_w = 16;
  cfg.downsample = 8;
  cfg.channels = 8;
  cfg.reduced_channels = 4;
  cfg.n_regions = 4;
  cfg.num_identities = 4;
  cfg.seed = 3;
  return cfg;
}

Tensor random_images(Rng& rng, int B, const model::ModelConfig& cfg) {
  Tensor t({B, 3, cfg.input_h, cfg.input_w});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("config arithmetic and validation") {
  model::ModelConfig cfg = toy_config();
  CHECK(cfg.feature_h() == 4);
  CHECK(cfg.feature_w() == 2);
  CHECK(cfg.n_blocks() == 3);
  cfg.input_h = 33;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = toy_config();
  cfg.downsample = 6;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("seeded init is reproducible and seed-sensitive") {
  const model::ModelConfig cfg = toy_config();
  const model::ParamSet a = model::init_parameters(cfg);
  const model::ParamSet b = model::init_parameters(cfg);
  REQUIRE(a.entries.size() == b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].first == b.entries[i].first);
    for (std::int64_t j = 0; j < a.entries[i].second.numel(); ++j)
      REQUIRE(a.entries[i].second[j] == b.entries[i].second[j]);
  }
  model::ModelConfig other = cfg;
  other.seed = 4;
  const model::ParamSet c = model::init_parameters(other);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.entries.size() && !any_diff; ++i)
    for (std::int64_t j = 0; j < a.entries[i].second.numel(); ++j)
      if (a.entries[i].second[j] != c.entries[i].second[j]) {
        any_diff = true;
        break;
      }
  CHECK(any_diff);
}

TEST_CASE("parameter count matches the hand-derived architecture count") {
  const model::ModelConfig cfg = toy_config();
  // Blocks (input 3 rgb + 2 coord channels): 4, 4, 8 output channels.
  const std::int64_t blocks = (4 * 5 * 9 + 4) + (4 * 4 * 9 + 4) + (8 * 4 * 9 + 8);
  const std::int64_t heads = (4 * 8 + 4) + (1 * 8 + 1);  // parse + reduce (3 color channels appended)
  const std::int64_t cls = (3 * 4 * 4 + 3 * 4) + (1 * 4 * 4 + 4);  // region + pooled rows
  const std::int64_t expect = blocks + heads + cls;
  CHECK(model::parameter_count(cfg) == expect);
  const model::ParamSet ps = model::init_parameters(cfg);
  CHECK(ps.total_size() == expect);
}

TEST_CASE("forward: shapes, probability rows, determinism, batch independence") {
  const model::ModelConfig cfg = toy_config();
  const model::ParamSet ps = model::init_parameters(cfg);
  Rng rng(9);
  Tensor images = random_images(rng, 3, cfg);
  // Make image 2 a copy of image 0.
  std::memcpy(images.data() + 2 * images.numel() / 3, images.data(),
              sizeof(double) * static_cast<std::size_t>(images.numel() / 3));

  const auto out = model::forward(images, cfg, ps);
  REQUIRE(out.size() == 3);
  CHECK(out[0].backbone.channels() == cfg.channels);
  CHECK(out[0].parsing.n_regions == cfg.n_regions);
  CHECK(out[0].reduced.channels() == cfg.reduced_channels);
  CHECK(out[0].parsing.height() == cfg.feature_h());
  CHECK(out[0].parsing.width() == cfg.feature_w());
  CHECK_NOTHROW(out[0].parsing.validate());
  for (std::int64_t i = 0; i < out[0].backbone.data.numel(); ++i)
    REQUIRE(std::isfinite(out[0].backbone.data[i]));

  // Identical inputs in a batch give identical outputs.
  for (std::int64_t i = 0; i < out[0].parsing.probs.numel(); ++i)
    REQUIRE(out[0].parsing.probs[i] == out[2].parsing.probs[i]);
  for (std::int64_t i = 0; i < out[0].reduced.data.numel(); ++i)
    REQUIRE(out[0].reduced.data[i] == out[2].reduced.data[i]);

  // Re-running the forward bit-stable; golden record kept under the build dir.
  const auto out2 = model::forward(images, cfg, ps);
  for (std::int64_t i = 0; i < out[1].reduced.data.numel(); ++i)
    REQUIRE(out[1].reduced.data[i] == out2[1].reduced.data[i]);

  double checksum = 0.0;
  for (const auto& o : out)
    for (std::int64_t i = 0; i < o.reduced.data.numel(); ++i) checksum += o.reduced.data[i];
  const std::filesystem::path golden = "model_forward_golden.txt";
  if (std::filesystem::exists(golden)) {
    std::ifstream is(golden);
    double recorded = 0.0;
    is >> recorded;
    CHECK(checksum == recorded);
  } else {
    std::ofstream os(golden);
    os.precision(17);
    os << checksum << "\n";
  }
}

TEST_CASE("tape forward equals plain forward") {
  const model::ModelConfig cfg = toy_config();
  const model::ParamSet ps = model::init_parameters(cfg);
  Rng rng(10);
  const Tensor images = random_images(rng, 2, cfg);
  const auto plain = model::forward(images, cfg, ps);

  reid::ad::Tape tape;
  const model::TapeParams tp = model::bind_parameters(tape, ps);
  const reid::ad::Var in = tape.leaf(model::with_coord_channels(images, cfg));
  const model::TapeOutputs out = model::forward_tape(tape, in, cfg, tp);
  const Tensor& P = tape.val(out.parsing);
  const Tensor& F = tape.val(out.reduced);
  const std::int64_t hw = static_cast<std::int64_t>(cfg.feature_h()) * cfg.feature_w();
  for (int b = 0; b < 2; ++b) {
    for (std::int64_t i = 0; i < cfg.n_regions * hw; ++i)
      REQUIRE(P[b * cfg.n_regions * hw + i] == plain[static_cast<std::size_t>(b)].parsing.probs[i]);
    for (std::int64_t i = 0; i < cfg.reduced_channels * hw; ++i)
      REQUIRE(F[b * cfg.reduced_channels * hw + i] ==
              plain[static_cast<std::size_t>(b)].reduced.data[i]);
  }
}

TEST_CASE("checkpoint round trip: bytes stable, forward reproduced exactly") {
  const model::ModelConfig cfg = toy_config();
  const model::ParamSet ps = model::init_parameters(cfg);
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "reid_ckpt_test";
  fs::create_directories(dir);
  model::save_checkpoint(dir / "a.bin", cfg, ps);
  const auto [cfg2, ps2] = model::load_checkpoint(dir / "a.bin");
  CHECK(cfg2.input_h == cfg.input_h);
  CHECK(cfg2.num_identities == cfg.num_identities);
  CHECK(cfg2.seed == cfg.seed);
  model::save_checkpoint(dir / "b.bin", cfg2, ps2);

  std::ifstream f1(dir / "a.bin", std::ios::binary), f2(dir / "b.bin", std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  // Loading twice and running forward gives identical outputs.
  const auto [cfg3, ps3] = model::load_checkpoint(dir / "a.bin");
  Rng rng(11);
  const Tensor images = random_images(rng, 2, cfg);
  const auto o2 = model::forward(images, cfg2, ps2);
  const auto o3 = model::forward(images, cfg3, ps3);
  for (std::size_t b = 0; b < o2.size(); ++b)
    for (std::int64_t i = 0; i < o2[b].reduced.data.numel(); ++i)
      REQUIRE(o2[b].reduced.data[i] == o3[b].reduced.data[i]);
  fs::remove_all(dir);
}
