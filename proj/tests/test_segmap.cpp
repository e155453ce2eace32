#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "reid/rng.hpp"
#include "reid/segmap.hpp"

using reid::Rng;
using reid::Tensor;
namespace segmap = reid::segmap;

namespace {

// [N, h, w] map from per-pixel rows (row-major pixels).
segmap::SemanticProbMap map_from_rows(int h, int w, int N,
                                      const std::vector<std::vector<double>>& rows) {
  segmap::SemanticProbMap p;
  p.n_regions = N;
  p.probs = Tensor({N, h, w});
  for (int g = 0; g < h * w; ++g)
    for (int i = 0; i < N; ++i) p.probs[i * h * w + g] = rows[static_cast<std::size_t>(g)][static_cast<std::size_t>(i)];
  return p;
}

std::vector<double> random_pixel(Rng& rng, int N) {
  std::vector<double> row(static_cast<std::size_t>(N));
  double sum = 0.0;
  for (double& v : row) {
    v = -std::log(1.0 - rng.uniform());  // exponential -> Dirichlet(1)
    sum += v;
  }
  for (double& v : row) v /= sum;
  return row;
}

}  // namespace

TEST_CASE("entropy of one-hot, uniform and two-way pixels") {
  const int N = 8;
  std::vector<double> onehot(N, 0.0);
  onehot[0] = 1.0;
  std::vector<double> uniform(N, 1.0 / N);
  std::vector<double> twoway(N, 0.0);
  twoway[0] = twoway[1] = 0.5;
  const auto p = map_from_rows(1, 3, N, {onehot, uniform, twoway});
  const segmap::EntropyMap e = segmap::entropy_map(p);
  CHECK(e.e_max == doctest::Approx(std::log(8.0)));
  CHECK(e.raw[0] == doctest::Approx(0.0));
  CHECK(e.normalized[0] == doctest::Approx(0.0));
  CHECK(e.raw[1] == doctest::Approx(std::log(8.0)));
  CHECK(e.normalized[1] == doctest::Approx(1.0));
  CHECK(e.normalized[2] == doctest::Approx(1.0 / 3.0));  // ln2/ln8
}

TEST_CASE("entropy rejects rows that do not sum to one") {
  const int N = 4;
  std::vector<double> bad = {0.5, 0.2, 0.2, 0.2};
  const auto p = map_from_rows(1, 1, N, {bad});
  CHECK_THROWS_AS(segmap::entropy_map(p), std::invalid_argument);
}

TEST_CASE("fixed-threshold mask keeps >= tau inclusively") {
  segmap::EntropyMap e;
  e.e_max = std::log(8.0);
  e.normalized = Tensor({1, 3}, {0.6, 0.4, 0.5});
  e.raw = Tensor({1, 3});
  const segmap::UnconfidentMask m = segmap::unconfident_mask(e, 0.5);
  CHECK(m.values[0] == doctest::Approx(0.6));
  CHECK(m.values[1] == doctest::Approx(0.0));
  CHECK(m.values[2] == doctest::Approx(0.5));  // boundary is inclusive
  CHECK_THROWS_AS(segmap::unconfident_mask(e, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(segmap::unconfident_mask(e, 1.0), std::invalid_argument);
}

TEST_CASE("confidence map is the complement") {
  segmap::EntropyMap e;
  e.e_max = std::log(4.0);
  e.normalized = Tensor({1, 3}, {0.0, 1.0, 1.0 / 3.0});
  e.raw = Tensor({1, 3});
  const segmap::ConfidenceMap c = segmap::confidence_map(e);
  CHECK(c.values[0] == doctest::Approx(1.0));
  CHECK(c.values[1] == doctest::Approx(0.0));
  CHECK(c.values[2] == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("dynamic mask thresholds at the per-image median") {
  segmap::EntropyMap e;
  e.e_max = 1.0;
  e.raw = Tensor({1, 2});

  // Median of {0.1, 0.9} is 0.5 (midpoint); only 0.9 passes.
  e.normalized = Tensor({1, 2}, {0.1, 0.9});
  auto m = segmap::dynamic_unconfident_mask(e);
  CHECK(m.values[0] == doctest::Approx(0.0));
  CHECK(m.values[1] == doctest::Approx(0.9));

  // All pixels tied at the median pass.
  segmap::EntropyMap e2;
  e2.e_max = 1.0;
  e2.raw = Tensor({2, 2});
  e2.normalized = Tensor({2, 2}, {0.5, 0.5, 0.5, 0.5});
  m = segmap::dynamic_unconfident_mask(e2);
  for (int i = 0; i < 4; ++i) CHECK(m.values[i] == doctest::Approx(0.5));

  // Median of {0.2,0.4,0.6,0.8} is 0.5; upper half kept.
  segmap::EntropyMap e3;
  e3.e_max = 1.0;
  e3.raw = Tensor({2, 2});
  e3.normalized = Tensor({2, 2}, {0.2, 0.4, 0.6, 0.8});
  m = segmap::dynamic_unconfident_mask(e3);
  CHECK(m.values[0] == doctest::Approx(0.0));
  CHECK(m.values[1] == doctest::Approx(0.0));
  CHECK(m.values[2] == doctest::Approx(0.6));
  CHECK(m.values[3] == doctest::Approx(0.8));
}

TEST_CASE("dynamic mask keeps at least half the pixels") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = rng.uniform_int(1, 6), w = rng.uniform_int(2, 6);
    segmap::EntropyMap e;
    e.e_max = 1.0;
    e.raw = Tensor({h, w});
    e.normalized = Tensor({h, w});
    for (std::int64_t i = 0; i < e.normalized.numel(); ++i) e.normalized[i] = rng.uniform(0.01, 1.0);
    const auto m = segmap::dynamic_unconfident_mask(e);
    int kept = 0;
    for (std::int64_t i = 0; i < m.values.numel(); ++i) kept += m.values[i] > 0.0;
    CHECK(kept * 2 >= h * w);
  }
}

TEST_CASE("random pixels: bounds, complementarity, permutation invariance, monotone tau") {
  Rng rng(12345);
  const int N = 8;
  const int n_pixels = 10000;
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<std::size_t>(n_pixels));
  for (int i = 0; i < n_pixels; ++i) rows.push_back(random_pixel(rng, N));
  const auto p = map_from_rows(100, 100, N, rows);
  const segmap::EntropyMap e = segmap::entropy_map(p);
  const segmap::ConfidenceMap c = segmap::confidence_map(e);
  for (int g = 0; g < n_pixels; ++g) {
    REQUIRE(e.raw[g] >= -1e-9);
    REQUIRE(e.raw[g] <= std::log(static_cast<double>(N)) + 1e-9);
    REQUIRE(e.normalized[g] >= -1e-9);
    REQUIRE(e.normalized[g] <= 1.0 + 1e-9);
    REQUIRE(std::abs(c.values[g] + e.normalized[g] - 1.0) <= 1e-12);
  }

  // Permuting a pixel's region probabilities leaves its entropy unchanged.
  for (int trial = 0; trial < 200; ++trial) {
    const int g = rng.uniform_int(0, n_pixels - 1);
    std::vector<double> row = rows[static_cast<std::size_t>(g)];
    rng.shuffle(row);
    const auto p2 = map_from_rows(1, 1, N, {row});
    const auto e2 = segmap::entropy_map(p2);
    REQUIRE(e2.raw[0] == doctest::Approx(e.raw[g]).epsilon(1e-12));
  }

  // Raising tau never adds nonzero entries.
  const auto m_low = segmap::unconfident_mask(e, 0.3);
  const auto m_high = segmap::unconfident_mask(e, 0.7);
  for (int g = 0; g < n_pixels; ++g)
    if (m_high.values[g] != 0.0) REQUIRE(m_low.values[g] != 0.0);
}
