#include "reid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace reid::eval {

void ScoreMatrix::validate() const {
  const std::size_t np = probe_ids.size(), ng = gallery_ids.size();
  if (distances.rank() != 2 || distances.dim(0) != static_cast<int>(np) ||
      distances.dim(1) != static_cast<int>(ng))
    throw std::invalid_argument("ScoreMatrix: distance shape does not match id arrays");
  if (missing.size() != np * ng || excluded.size() != np * ng)
    throw std::invalid_argument("ScoreMatrix: marker arrays sized wrong");
  for (std::size_t i = 0; i < np * ng; ++i)
    if (!missing[i] && !excluded[i] && !std::isfinite(distances[static_cast<std::int64_t>(i)]))
      throw std::invalid_argument("ScoreMatrix: non-finite distance not marked missing");
}

namespace {

// Gallery order for one probe: ascending distance, missing pairs after all
// finite ones, ties by gallery index. Excluded pairs are dropped.
std::vector<int> ranked_gallery(const ScoreMatrix& s, int probe) {
  const int ng = s.n_gallery();
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(ng));
  const std::size_t row = static_cast<std::size_t>(probe) * ng;
  for (int j = 0; j < ng; ++j)
    if (!s.excluded[row + j]) order.push_back(j);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const bool ma = s.missing[row + a], mb = s.missing[row + b];
    if (ma != mb) return mb;  // finite first
    if (ma && mb) return a < b;
    const double da = s.distances.at(probe, a), db = s.distances.at(probe, b);
    if (da != db) return da < db;
    return a < b;
  });
  return order;
}

int count_matches(const ScoreMatrix& s, int probe) {
  const int ng = s.n_gallery();
  const std::size_t row = static_cast<std::size_t>(probe) * ng;
  int n = 0;
  for (int j = 0; j < ng; ++j)
    if (!s.excluded[row + j] && s.gallery_ids[static_cast<std::size_t>(j)] ==
                                    s.probe_ids[static_cast<std::size_t>(probe)])
      ++n;
  return n;
}

}  // namespace

namespace {

void require_matches(const ScoreMatrix& s, const char* caller) {
  for (int p = 0; p < s.n_probe(); ++p)
    if (count_matches(s, p) == 0)
      throw std::invalid_argument(std::string(caller) + ": probe has no gallery match");
}

}  // namespace

std::vector<double> cmc(const ScoreMatrix& s, int max_rank) {
  s.validate();
  if (max_rank < 1) throw std::invalid_argument("cmc: max_rank must be >= 1");
  const int np = s.n_probe();
  if (np == 0) throw std::invalid_argument("cmc: no probes");
  require_matches(s, "cmc");
  std::vector<int> first_hit(static_cast<std::size_t>(np), -1);
#pragma omp parallel for schedule(static)
  for (int p = 0; p < np; ++p) {
    const std::vector<int> order = ranked_gallery(s, p);
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (s.gallery_ids[static_cast<std::size_t>(order[k])] ==
          s.probe_ids[static_cast<std::size_t>(p)]) {
        first_hit[static_cast<std::size_t>(p)] = static_cast<int>(k);
        break;
      }
    }
  }
  std::vector<double> curve(static_cast<std::size_t>(max_rank), 0.0);
  for (int p = 0; p < np; ++p) {
    const int h = first_hit[static_cast<std::size_t>(p)];
    if (h >= 0)
      for (int k = h; k < max_rank; ++k) curve[static_cast<std::size_t>(k)] += 1.0;
  }
  for (double& v : curve) v /= np;
  return curve;
}

double mean_ap(const ScoreMatrix& s) {
  s.validate();
  const int np = s.n_probe();
  if (np == 0) throw std::invalid_argument("mean_ap: no probes");
  require_matches(s, "mean_ap");
  std::vector<double> ap(static_cast<std::size_t>(np), 0.0);
#pragma omp parallel for schedule(static)
  for (int p = 0; p < np; ++p) {
    const int relevant = count_matches(s, p);
    const std::vector<int> order = ranked_gallery(s, p);
    double acc = 0.0;
    int hits = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (s.gallery_ids[static_cast<std::size_t>(order[k])] ==
          s.probe_ids[static_cast<std::size_t>(p)]) {
        ++hits;
        acc += static_cast<double>(hits) / static_cast<double>(k + 1);
      }
    }
    ap[static_cast<std::size_t>(p)] = acc / relevant;
  }
  double total = 0.0;
  for (double v : ap) total += v;
  return total / np;
}

double pr_auc(const ScoreMatrix& s) {
  s.validate();
  // Pool pairs: score = -distance (higher is better), missing pairs grouped
  // below every finite score.
  struct Pair {
    double score;
    bool missing;
    bool positive;
  };
  std::vector<Pair> pool;
  const int np = s.n_probe(), ng = s.n_gallery();
  pool.reserve(static_cast<std::size_t>(np) * ng);
  std::size_t n_pos = 0;
  for (int p = 0; p < np; ++p) {
    const std::size_t row = static_cast<std::size_t>(p) * ng;
    for (int j = 0; j < ng; ++j) {
      if (s.excluded[row + j]) continue;
      const bool positive = s.gallery_ids[static_cast<std::size_t>(j)] ==
                            s.probe_ids[static_cast<std::size_t>(p)];
      const bool miss = s.missing[row + j] != 0;
      pool.push_back({miss ? 0.0 : -s.distances.at(p, j), miss, positive});
      n_pos += positive;
    }
  }
  if (n_pos == 0 || n_pos == pool.size())
    throw std::invalid_argument("pr_auc: degenerate all-positive or all-negative pool");

  std::sort(pool.begin(), pool.end(), [](const Pair& a, const Pair& b) {
    if (a.missing != b.missing) return b.missing;
    return a.score > b.score;
  });

  // Sweep distinct scores, one PR point per threshold group; trapezoidal area
  // starting from the (recall 0, precision 1) anchor.
  double auc = 0.0;
  double prev_recall = 0.0, prev_precision = 1.0;
  std::size_t tp = 0, taken = 0;
  std::size_t i = 0;
  while (i < pool.size()) {
    std::size_t j = i;
    while (j < pool.size() && pool[j].missing == pool[i].missing &&
           (pool[i].missing || pool[j].score == pool[i].score))
      ++j;
    for (std::size_t k = i; k < j; ++k) {
      tp += pool[k].positive;
      ++taken;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(taken);
    auc += (recall - prev_recall) * 0.5 * (precision + prev_precision);
    prev_recall = recall;
    prev_precision = precision;
    i = j;
  }
  return auc;
}

ScoreMatrix score_matrix(const std::vector<align::PersonDescriptor>& gallery,
                         const std::vector<align::PersonDescriptor>& probes,
                         const EvalConfig& cfg) {
  if (gallery.empty() || probes.empty())
    throw std::invalid_argument("score_matrix: empty gallery or probe set");
  const int np = static_cast<int>(probes.size());
  const int ng = static_cast<int>(gallery.size());
  ScoreMatrix s;
  s.distances = Tensor({np, ng});
  s.missing.assign(static_cast<std::size_t>(np) * ng, 0);
  s.excluded.assign(static_cast<std::size_t>(np) * ng, 0);
  s.probe_ids.resize(static_cast<std::size_t>(np));
  s.gallery_ids.resize(static_cast<std::size_t>(ng));
  for (int j = 0; j < ng; ++j)
    s.gallery_ids[static_cast<std::size_t>(j)] = gallery[static_cast<std::size_t>(j)].identity;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < np; ++p) {
    const auto& pd = probes[static_cast<std::size_t>(p)];
    s.probe_ids[static_cast<std::size_t>(p)] = pd.identity;
    const std::size_t row = static_cast<std::size_t>(p) * ng;
    for (int j = 0; j < ng; ++j) {
      const auto& gd = gallery[static_cast<std::size_t>(j)];
      if (!pd.image_id.empty() && pd.image_id == gd.image_id) {
        s.excluded[row + j] = 1;
        continue;
      }
      if (cfg.use_extended) {
        try {
          s.distances.at(p, j) = align::extended_distance(pd, gd, cfg.distance);
        } catch (const align::NoComparableRegions&) {
          s.missing[row + j] = 1;
        }
      } else {
        s.distances.at(p, j) = align::aligned_distance(pd, gd, cfg.distance);
      }
    }
  }
  return s;
}

MetricReport evaluate_retrieval(const std::vector<align::PersonDescriptor>& gallery,
                                const std::vector<align::PersonDescriptor>& probes,
                                const EvalConfig& cfg) {
  const ScoreMatrix s = score_matrix(gallery, probes, cfg);
  MetricReport r;
  r.cmc = cmc(s, cfg.max_rank);
  r.map = mean_ap(s);
  r.pr_auc = pr_auc(s);
  return r;
}

void write_report(const std::filesystem::path& dir, const MetricReport& report) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "metrics.txt");
    os << "retrieval metrics\n";
    for (std::size_t k = 0; k < report.cmc.size(); ++k)
      os << "  rank-" << (k + 1) << "  " << report.cmc[k] << "\n";
    os << "  mAP     " << report.map << "\n";
    os << "  PR-AUC  " << report.pr_auc << "\n";
  }
  {
    std::ofstream os(dir / "metrics.kv");
    os.precision(17);
    for (std::size_t k = 0; k < report.cmc.size(); ++k)
      os << "rank" << (k + 1) << " = " << report.cmc[k] << "\n";
    os << "map = " << report.map << "\n";
    os << "pr_auc = " << report.pr_auc << "\n";
  }
  {
    std::ofstream os(dir / "cmc.tsv");
    os.precision(17);
    for (std::size_t k = 0; k < report.cmc.size(); ++k)
      os << (k + 1) << "\t" << report.cmc[k] << "\n";
  }
}

MetricReport read_report(const std::filesystem::path& dir) {
  MetricReport r;
  std::ifstream kv(dir / "metrics.kv");
  if (!kv) throw std::runtime_error("read_report: missing metrics.kv in " + dir.string());
  std::string key, eq;
  double value = 0.0;
  std::vector<std::pair<std::string, double>> entries;
  while (kv >> key >> eq >> value) entries.emplace_back(key, value);
  for (const auto& [k, v] : entries) {
    if (k == "map")
      r.map = v;
    else if (k == "pr_auc")
      r.pr_auc = v;
    else if (k.rfind("rank", 0) == 0)
      r.cmc.push_back(v);
  }
  return r;
}

}  // namespace reid::eval
