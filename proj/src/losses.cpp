#include "reid/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace reid::losses {

void LossWeights::validate() const {
  if (lambda < 0.0 || margin < 0.0)
    throw std::invalid_argument("LossWeights: lambda and margin must be nonnegative");
}

namespace {

double row_ce(const double* wrow, const double* brow, const double* feature, int K, int c,
              int label) {
  // logsumexp(logits) - logits[label]
  double m = -1e300;
  double logits_label = 0.0;
  std::vector<double> logits(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    double acc = brow[k];
    for (int j = 0; j < c; ++j) acc += feature[j] * wrow[k * c + j];
    logits[static_cast<std::size_t>(k)] = acc;
    m = std::max(m, acc);
    if (k == label) logits_label = acc;
  }
  double sum = 0.0;
  for (int k = 0; k < K; ++k) sum += std::exp(logits[static_cast<std::size_t>(k)] - m);
  return m + std::log(sum) - logits_label;
}

}  // namespace

double classifier_ce(const RegionClassifiers& cls, int row, const double* feature, int label) {
  const int K = cls.num_identities(), c = cls.feature_dim();
  if (row < 0 || row >= cls.rows()) throw std::invalid_argument("classifier_ce: row out of range");
  if (label < 0 || label >= K) throw std::invalid_argument("classifier_ce: label out of range");
  return row_ce(cls.w.data() + (static_cast<std::int64_t>(row) * K) * c,
                cls.b.data() + static_cast<std::int64_t>(row) * K, feature, K, c, label);
}

double extended_id_loss(const Tensor& feats, const Tensor& shat, const Tensor& fun,
                        const std::vector<double>& sun_hat, const RegionClassifiers& cls,
                        const std::vector<int>& labels, bool include_unconfident) {
  if (feats.rank() != 3) throw std::invalid_argument("extended_id_loss: feats must be [B,R,c]");
  const int B = feats.dim(0), R = feats.dim(1), c = feats.dim(2);
  const int K = cls.num_identities();
  if (cls.feature_dim() != c || cls.rows() < R + 1)
    throw std::invalid_argument("extended_id_loss: classifier shape mismatch");
  if (shat.dim(0) != B || shat.dim(1) != R || static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("extended_id_loss: score/label shape mismatch");
  for (int label : labels)
    if (label < 0 || label >= K) throw std::invalid_argument("extended_id_loss: label out of range");

  double fg = 0.0;
  for (int bi = 0; bi < B; ++bi)
    for (int r = 0; r < R; ++r)
      fg += shat.at(bi, r) * classifier_ce(cls, r, feats.data() + (static_cast<std::int64_t>(bi) * R + r) * c,
                                           labels[static_cast<std::size_t>(bi)]);
  fg /= B;
  if (!include_unconfident) return fg;

  double un = 0.0;
  for (int bi = 0; bi < B; ++bi)
    un += sun_hat[static_cast<std::size_t>(bi)] *
          classifier_ce(cls, R, fun.data() + static_cast<std::int64_t>(bi) * c,
                        labels[static_cast<std::size_t>(bi)]);
  un /= B;
  return fg + un;
}

double batch_hard_triplet(const Tensor& dist, const std::vector<int>& identities, double margin) {
  if (dist.rank() != 2 || dist.dim(0) != dist.dim(1))
    throw std::invalid_argument("batch_hard_triplet: dist must be square");
  const int B = dist.dim(0);
  if (static_cast<int>(identities.size()) != B)
    throw std::invalid_argument("batch_hard_triplet: identity count mismatch");
  for (int a = 0; a < B; ++a) {
    int same = 0, diff = 0;
    for (int j = 0; j < B; ++j) {
      if (j == a) continue;
      (identities[static_cast<std::size_t>(j)] == identities[static_cast<std::size_t>(a)] ? same
                                                                                          : diff)++;
    }
    if (same == 0 || diff == 0)
      throw std::invalid_argument(
          "batch_hard_triplet: each identity needs >= 2 samples and >= 2 ids");
  }
  double loss = 0.0;
  for (int a = 0; a < B; ++a) {
    double hp = -1e300, hn = 1e300;
    for (int j = 0; j < B; ++j) {
      if (j == a) continue;
      if (identities[static_cast<std::size_t>(j)] == identities[static_cast<std::size_t>(a)])
        hp = std::max(hp, dist.at(a, j));
      else
        hn = std::min(hn, dist.at(a, j));
    }
    loss += std::max(0.0, hp - hn + margin);
  }
  return loss / B;
}

double parsing_loss(const segmap::SemanticProbMap& p, const std::vector<int>& part_labels) {
  const int N = p.n_regions;
  const std::int64_t hw = static_cast<std::int64_t>(p.height()) * p.width();
  if (static_cast<std::int64_t>(part_labels.size()) != hw)
    throw std::invalid_argument("parsing_loss: label count mismatch");
  double loss = 0.0;
  for (std::int64_t g = 0; g < hw; ++g) {
    const int lab = part_labels[static_cast<std::size_t>(g)];
    if (lab < 1 || lab > N) throw std::invalid_argument("parsing_loss: label outside [1, N]");
    const double prob = p.probs[(static_cast<std::int64_t>(lab - 1)) * hw + g];
    loss -= std::log(std::max(prob, 1e-300));
  }
  return loss / static_cast<double>(hw);
}

double total_loss(double parsing, double id_ext, double triplet, const LossWeights& weights) {
  weights.validate();
  if (!std::isfinite(parsing) || !std::isfinite(id_ext) || !std::isfinite(triplet))
    throw std::invalid_argument("total_loss: component losses must be finite");
  return weights.lambda * parsing + id_ext + triplet;
}

}  // namespace reid::losses
