#include <doctest.h>

#include <cmath>
#include <vector>

#include "reid/losses.hpp"
#include "reid/rng.hpp"

using reid::Rng;
using reid::Tensor;
namespace losses = reid::losses;
namespace segmap = reid::segmap;

namespace {

losses::RegionClassifiers random_classifiers(Rng& rng, int rows, int K, int c) {
  losses::RegionClassifiers cls;
  cls.w = Tensor({rows, K, c});
  cls.b = Tensor({rows, K});
  for (std::int64_t i = 0; i < cls.w.numel(); ++i) cls.w[i] = rng.normal();
  for (std::int64_t i = 0; i < cls.b.numel(); ++i) cls.b[i] = 0.1 * rng.normal();
  return cls;
}

}  // namespace

TEST_CASE("identity loss: annihilation, uniform classifier, hand-weighted sum") {
  Rng rng(1);
  const int B = 2, R = 2, c = 3, K = 5;
  const losses::RegionClassifiers cls = random_classifiers(rng, R + 1, K, c);
  Tensor feats({B, R, c});
  for (std::int64_t i = 0; i < feats.numel(); ++i) feats[i] = rng.normal();
  Tensor fun({B, c});
  for (std::int64_t i = 0; i < fun.numel(); ++i) fun[i] = rng.normal();
  const std::vector<int> labels = {1, 3};

  // All weights zero -> zero loss.
  Tensor zero_shat({B, R});
  CHECK(losses::extended_id_loss(feats, zero_shat, fun, {0.0, 0.0}, cls, labels) == 0.0);

  // A zero-weight classifier (all logits equal) prices every label at ln K.
  losses::RegionClassifiers flat = cls;
  flat.w.fill(0.0);
  flat.b.fill(0.0);
  Tensor one_shat({B, R});
  one_shat.at(0, 0) = 1.0;  // only one region of one sample active
  CHECK(losses::extended_id_loss(feats, one_shat, fun, {0.0, 0.0}, flat, labels) ==
        doctest::Approx(std::log(static_cast<double>(K)) / B).epsilon(1e-12));

  // Hand-evaluated weighted sum against classifier_ce.
  Tensor shat({B, R});
  shat.at(0, 0) = 0.25;
  shat.at(0, 1) = 0.5;
  shat.at(1, 0) = 0.125;
  shat.at(1, 1) = 0.0;
  const std::vector<double> sun_hat = {0.125, 0.25};
  double expect = 0.0;
  for (int b = 0; b < B; ++b) {
    for (int r = 0; r < R; ++r)
      expect += shat.at(b, r) *
                losses::classifier_ce(cls, r, feats.data() + (b * R + r) * c, labels[b]);
  }
  expect /= B;
  double expect_un = 0.0;
  for (int b = 0; b < B; ++b)
    expect_un += sun_hat[b] * losses::classifier_ce(cls, R, fun.data() + b * c, labels[b]);
  expect_un /= B;
  CHECK(losses::extended_id_loss(feats, shat, fun, sun_hat, cls, labels) ==
        doctest::Approx(expect + expect_un).epsilon(1e-12));
  CHECK(losses::extended_id_loss(feats, shat, fun, sun_hat, cls, labels, false) ==
        doctest::Approx(expect).epsilon(1e-12));

  CHECK_THROWS_AS(losses::extended_id_loss(feats, shat, fun, sun_hat, cls, {1, K}),
                  std::invalid_argument);
}

TEST_CASE("identity loss falls as the correct-class logit rises") {
  Rng rng(2);
  const int B = 1, R = 1, c = 2, K = 3;
  losses::RegionClassifiers cls = random_classifiers(rng, R + 1, K, c);
  Tensor feats({B, R, c}, {0.6, 0.8});
  Tensor fun({B, c});
  Tensor shat({B, R});
  shat.at(0, 0) = 1.0;
  const std::vector<int> labels = {2};
  double prev = losses::extended_id_loss(feats, shat, fun, {0.0}, cls, labels);
  for (int step = 0; step < 5; ++step) {
    cls.b.at(0, 2) += 0.5;  // raise the correct class
    const double cur = losses::extended_id_loss(feats, shat, fun, {0.0}, cls, labels);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("batch-hard triplet: hand cases and order invariance") {
  // Anchor picks its farthest positive and nearest negative.
  Tensor d({4, 4});
  const std::vector<int> ids = {0, 0, 1, 1};
  auto set_sym = [&](int i, int j, double v) {
    d.at(i, j) = v;
    d.at(j, i) = v;
  };
  set_sym(0, 1, 0.2);
  set_sym(0, 2, 0.9);
  set_sym(0, 3, 1.1);
  set_sym(1, 2, 1.0);
  set_sym(1, 3, 1.2);
  set_sym(2, 3, 0.8);
  // Per anchor: hp - hn + 0.3 -> 0: max(0, .2-.9+.3)=0, 1: 0, 2: max(0,.8-.9+.3)=.2, 3: max(0,.8-1.1+.3)=0
  CHECK(losses::batch_hard_triplet(d, ids, 0.3) == doctest::Approx(0.05).epsilon(1e-12));

  set_sym(0, 1, 0.8);
  set_sym(0, 2, 0.4);
  set_sym(0, 3, 0.4);
  set_sym(1, 2, 0.4);
  set_sym(1, 3, 0.4);
  set_sym(2, 3, 0.8);
  // Every anchor: 0.8 - 0.4 + 0.3 = 0.7.
  CHECK(losses::batch_hard_triplet(d, ids, 0.3) == doctest::Approx(0.7).epsilon(1e-12));

  // All equal distances -> loss = margin for every anchor.
  Tensor eq({4, 4});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) eq.at(i, j) = i == j ? 0.0 : 0.5;
  CHECK(losses::batch_hard_triplet(eq, ids, 0.3) == doctest::Approx(0.3).epsilon(1e-12));

  // Reordering samples leaves the loss unchanged.
  Rng rng(3);
  Tensor rd({6, 6});
  const std::vector<int> rids = {0, 0, 1, 1, 2, 2};
  for (int i = 0; i < 6; ++i)
    for (int j = i + 1; j < 6; ++j) {
      const double v = rng.uniform(0.1, 2.0);
      rd.at(i, j) = v;
      rd.at(j, i) = v;
    }
  const double base = losses::batch_hard_triplet(rd, rids, 0.3);
  const std::vector<int> perm = {3, 1, 5, 0, 4, 2};
  Tensor pd({6, 6});
  std::vector<int> pids(6);
  for (int i = 0; i < 6; ++i) {
    pids[static_cast<std::size_t>(i)] = rids[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    for (int j = 0; j < 6; ++j)
      pd.at(i, j) = rd.at(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  CHECK(losses::batch_hard_triplet(pd, pids, 0.3) == doctest::Approx(base).epsilon(1e-12));

  CHECK_THROWS_AS(losses::batch_hard_triplet(eq, {0, 0, 0, 0}, 0.3), std::invalid_argument);
}

TEST_CASE("parsing loss: exact match, uniform map, hand case") {
  const int N = 8, h = 1, w = 2;
  segmap::SemanticProbMap p;
  p.n_regions = N;
  p.probs = Tensor({N, h, w});
  // Pixel 0 one-hot region 3, pixel 1 one-hot region 8.
  p.probs[(3 - 1) * 2 + 0] = 1.0;
  p.probs[(8 - 1) * 2 + 1] = 1.0;
  CHECK(losses::parsing_loss(p, {3, 8}) == doctest::Approx(0.0).epsilon(1e-12));

  segmap::SemanticProbMap u;
  u.n_regions = N;
  u.probs = Tensor::full({N, h, w}, 1.0 / N);
  CHECK(losses::parsing_loss(u, {1, 5}) == doctest::Approx(std::log(8.0)).epsilon(1e-12));

  segmap::SemanticProbMap mix;
  mix.n_regions = 2;
  mix.probs = Tensor({2, 1, 2}, {0.25, 0.6, 0.75, 0.4});
  // labels: pixel0 -> region 2 (p=0.75), pixel1 -> region 1 (p=0.6)
  CHECK(losses::parsing_loss(mix, {2, 1}) ==
        doctest::Approx(-(std::log(0.75) + std::log(0.6)) / 2.0).epsilon(1e-12));
  CHECK_THROWS_AS(losses::parsing_loss(mix, {0, 1}), std::invalid_argument);
}

TEST_CASE("total loss arithmetic") {
  losses::LossWeights w;
  w.lambda = 0.0;
  CHECK(losses::total_loss(5.0, 1.0, 2.0, w) == doctest::Approx(3.0));
  w.lambda = 0.1;
  CHECK(losses::total_loss(2.0, 1.0, 0.5, w) == doctest::Approx(1.7));
  CHECK(losses::total_loss(0.0, 0.0, 0.0, w) == doctest::Approx(0.0));
  w.lambda = -1.0;
  CHECK_THROWS_AS(losses::total_loss(1.0, 1.0, 1.0, w), std::invalid_argument);
}
