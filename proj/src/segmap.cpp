#include "reid/segmap.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace reid::segmap {

void SemanticProbMap::validate(double tol) const {
  if (n_regions < 2) throw std::invalid_argument("SemanticProbMap: need at least 2 regions");
  if (probs.rank() != 3 || probs.dim(0) != n_regions)
    throw std::invalid_argument("SemanticProbMap: probs must be [N, h, w]");
  const int h = height(), w = width();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double sum = 0.0;
      for (int i = 0; i < n_regions; ++i) {
        const double p = probs.at(i, y, x);
        if (p < -tol || p > 1.0 + tol)
          throw std::invalid_argument("SemanticProbMap: probability outside [0,1]");
        sum += p;
      }
      if (std::abs(sum - 1.0) > tol)
        throw std::invalid_argument("SemanticProbMap: pixel probabilities do not sum to 1");
    }
  }
}

EntropyMap entropy_map(const SemanticProbMap& p) {
  p.validate();
  const int N = p.n_regions;
  const int h = p.height(), w = p.width();
  EntropyMap e;
  e.e_max = std::log(static_cast<double>(N));
  e.raw = Tensor({h, w});
  e.normalized = Tensor({h, w});
  const int hw = h * w;
#pragma omp parallel for schedule(static)
  for (int g = 0; g < hw; ++g) {
    double acc = 0.0;
    for (int i = 0; i < N; ++i) {
      const double pi = p.probs[static_cast<std::int64_t>(i) * hw + g];
      if (pi > 0.0) acc -= pi * std::log(pi);  // 0*log(0) := 0
    }
    e.raw[g] = acc;
    e.normalized[g] = acc / e.e_max;
  }
  return e;
}

UnconfidentMask unconfident_mask(const EntropyMap& e, double tau) {
  if (!(tau > 0.0 && tau < 1.0))
    throw std::invalid_argument("unconfident_mask: tau must lie in (0,1)");
  UnconfidentMask m;
  m.tau = tau;
  m.values = Tensor(e.normalized.shape());
  for (std::int64_t g = 0; g < e.normalized.numel(); ++g) {
    const double v = e.normalized[g];
    m.values[g] = (v >= tau) ? v : 0.0;
  }
  return m;
}

ConfidenceMap confidence_map(const EntropyMap& e) {
  ConfidenceMap c;
  c.values = Tensor(e.normalized.shape());
  for (std::int64_t g = 0; g < e.normalized.numel(); ++g) c.values[g] = 1.0 - e.normalized[g];
  return c;
}

double median_of(const Tensor& grid) {
  std::vector<double> v(grid.data(), grid.data() + grid.numel());
  const std::size_t n = v.size();
  const std::size_t mid = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double med = v[mid];
  if (n % 2 == 0) {
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (lower + med);
  }
  return med;
}

UnconfidentMask dynamic_unconfident_mask(const EntropyMap& e) {
  if (e.normalized.numel() < 2)
    throw std::invalid_argument("dynamic_unconfident_mask: needs at least 2 pixels");
  const double med = median_of(e.normalized);
  UnconfidentMask m;
  m.tau = med;
  m.values = Tensor(e.normalized.shape());
  for (std::int64_t g = 0; g < e.normalized.numel(); ++g) {
    const double v = e.normalized[g];
    m.values[g] = (v >= med) ? v : 0.0;
  }
  return m;
}

}  // namespace reid::segmap
