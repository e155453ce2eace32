#include "reid/align.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "reid/kernels.hpp"
#include "reid/wire.hpp"

namespace reid::align {

namespace {

void require_same_grid(int h1, int w1, int h2, int w2, const char* what) {
  if (h1 != h2 || w1 != w2)
    throw std::invalid_argument(std::string("align: spatial shape mismatch in ") + what);
}

double norm2(const double* v, int c) {
  double s = 0.0;
  for (int k = 0; k < c; ++k) s += v[k] * v[k];
  return std::sqrt(s);
}

// Unit-normalize in place; rows with norm below eps become zero vectors.
void normalize_or_zero(double* v, int c, double eps) {
  const double n = norm2(v, c);
  if (n < eps) {
    for (int k = 0; k < c; ++k) v[k] = 0.0;
  } else {
    for (int k = 0; k < c; ++k) v[k] /= n;
  }
}

double euclid(const double* a, const double* b, int c) {
  double s = 0.0;
  for (int k = 0; k < c; ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return std::sqrt(s);
}

void check_compatible(const PersonDescriptor& p, const PersonDescriptor& q) {
  if (p.n_regions != q.n_regions || p.feature_dim != q.feature_dim)
    throw std::invalid_argument("align: descriptor region count / feature dim mismatch");
}

}  // namespace

Tensor region_features(const FeatureMap& f, const segmap::SemanticProbMap& p,
                       const segmap::ConfidenceMap* weight) {
  if (f.kind != FeatureMap::Kind::reduced)
    throw std::invalid_argument("region_features: expects the reduced feature map");
  require_same_grid(f.height(), f.width(), p.height(), p.width(), "region_features");
  if (weight)
    require_same_grid(f.height(), f.width(), weight->values.dim(0), weight->values.dim(1),
                      "region_features weight");
  const int c = f.channels(), N = p.n_regions, h = f.height(), w = f.width();
  Tensor out({N, c});
  kernels::region_pool_forward(f.data.data(), p.probs.data(),
                               weight ? weight->values.data() : nullptr, out.data(),
                               1, c, N, h, w);
  return out;
}

std::vector<double> visibility_scores(const segmap::SemanticProbMap& p) {
  const int N = p.n_regions;
  const std::int64_t hw = static_cast<std::int64_t>(p.height()) * p.width();
  std::vector<double> s(static_cast<std::size_t>(N), 0.0);
  for (int i = 0; i < N; ++i) {
    double acc = 0.0;
    const double* plane = p.probs.data() + i * hw;
    for (std::int64_t g = 0; g < hw; ++g) acc += plane[g];
    s[static_cast<std::size_t>(i)] = acc;
  }
  return s;
}

PooledFeature unconfident_feature(const FeatureMap& f, const segmap::UnconfidentMask& m,
                                  double eps) {
  require_same_grid(f.height(), f.width(), m.values.dim(0), m.values.dim(1),
                    "unconfident_feature");
  const int c = f.channels();
  const std::int64_t hw = static_cast<std::int64_t>(f.height()) * f.width();
  PooledFeature out;
  out.feature.assign(static_cast<std::size_t>(c), 0.0);
  double mass = 0.0;
  for (std::int64_t g = 0; g < hw; ++g) mass += m.values[g];
  if (mass < eps) return out;  // zero feature, zero score
  out.score = mass;
  for (int k = 0; k < c; ++k) {
    double acc = 0.0;
    const double* plane = f.data.data() + k * hw;
    for (std::int64_t g = 0; g < hw; ++g) acc += m.values[g] * plane[g];
    out.feature[static_cast<std::size_t>(k)] = acc / mass;
  }
  return out;
}

PersonDescriptor build_descriptor(const FeatureMap& f, const segmap::SemanticProbMap& p,
                                  double tau, double eps) {
  require_same_grid(f.height(), f.width(), p.height(), p.width(), "build_descriptor");
  const int N = p.n_regions;
  const int c = f.channels();
  const double hw = static_cast<double>(f.height()) * f.width();

  const segmap::EntropyMap e = segmap::entropy_map(p);
  const segmap::ConfidenceMap conf = segmap::confidence_map(e);
  const segmap::UnconfidentMask mask = segmap::unconfident_mask(e, tau);

  const Tensor pooled = region_features(f, p, &conf);  // [N, c] raw sums
  const std::vector<double> vis = visibility_scores(p);

  double vis_total = 0.0;
  for (double v : vis) vis_total += v;
  if (std::abs(vis_total - hw) > 1e-4)
    throw std::invalid_argument("build_descriptor: visibility scores do not sum to h*w");

  PersonDescriptor d;
  d.n_regions = N;
  d.feature_dim = c;
  d.region_features = Tensor({N - 1, c});
  d.visibility.assign(static_cast<std::size_t>(N - 1), 0.0);
  for (int i = 0; i < N - 1; ++i) {  // background region N dropped
    for (int k = 0; k < c; ++k) d.region_features.at(i, k) = pooled.at(i, k);
    normalize_or_zero(d.region_features.data() + static_cast<std::int64_t>(i) * c, c, eps);
    d.visibility[static_cast<std::size_t>(i)] = vis[static_cast<std::size_t>(i)];
  }

  PooledFeature un = unconfident_feature(f, mask, eps);
  normalize_or_zero(un.feature.data(), c, eps);
  d.unconfident_feature = std::move(un.feature);
  d.unconfident_score = un.score;
  return d;
}

double aligned_distance(const PersonDescriptor& p, const PersonDescriptor& q,
                        const DistanceConfig&) {
  check_compatible(p, q);
  const int R = p.n_regions - 1;
  const int c = p.feature_dim;
  double acc = 0.0;
  for (int r = 0; r < R; ++r) {
    const double ss = p.visibility[static_cast<std::size_t>(r)] *
                      q.visibility[static_cast<std::size_t>(r)];
    if (ss == 0.0) continue;
    acc += ss * euclid(p.region_features.data() + static_cast<std::int64_t>(r) * c,
                       q.region_features.data() + static_cast<std::int64_t>(r) * c, c);
  }
  return acc;
}

double extended_distance(const PersonDescriptor& p, const PersonDescriptor& q,
                         const DistanceConfig& cfg) {
  check_compatible(p, q);
  const int R = p.n_regions - 1;
  const int c = p.feature_dim;
  double num = 0.0, den = 0.0;
  for (int r = 0; r < R; ++r) {
    const double ss = p.visibility[static_cast<std::size_t>(r)] *
                      q.visibility[static_cast<std::size_t>(r)];
    if (ss == 0.0) continue;
    num += ss * euclid(p.region_features.data() + static_cast<std::int64_t>(r) * c,
                       q.region_features.data() + static_cast<std::int64_t>(r) * c, c);
    den += ss;
  }
  if (cfg.use_unconfident) {
    const double ss = p.unconfident_score * q.unconfident_score;
    if (ss != 0.0) {
      num += ss * euclid(p.unconfident_feature.data(), q.unconfident_feature.data(), c);
      den += ss;
    }
  }
  if (den < cfg.epsilon) throw NoComparableRegions();
  return num / den;
}

PairwiseResult pairwise_extended_distances(const std::vector<PersonDescriptor>& batch,
                                           const DistanceConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("pairwise_extended_distances: empty batch");
  const int B = static_cast<int>(batch.size());
  const int R = batch[0].n_regions - 1;
  const int c = batch[0].feature_dim;
  for (const auto& d : batch) check_compatible(batch[0], d);

  // Pack into contiguous arrays for the kernel.
  Tensor Ft({B, R, c}), S({B, R}), fun({B, c});
  std::vector<double> Sun(static_cast<std::size_t>(B), 0.0);
  for (int b = 0; b < B; ++b) {
    const PersonDescriptor& d = batch[static_cast<std::size_t>(b)];
    std::memcpy(Ft.data() + static_cast<std::int64_t>(b) * R * c, d.region_features.data(),
                sizeof(double) * static_cast<std::size_t>(R) * c);
    for (int r = 0; r < R; ++r) S.at(b, r) = d.visibility[static_cast<std::size_t>(r)];
    std::memcpy(fun.data() + static_cast<std::int64_t>(b) * c, d.unconfident_feature.data(),
                sizeof(double) * static_cast<std::size_t>(c));
    Sun[static_cast<std::size_t>(b)] = d.unconfident_score;
  }

  PairwiseResult res;
  res.distances = Tensor({B, B});
  res.missing.assign(static_cast<std::size_t>(B) * B, 0);
  kernels::pairwise_extended_forward(Ft.data(), S.data(), fun.data(), Sun.data(),
                                     res.distances.data(), res.missing.data(), B, R, c,
                                     cfg.epsilon, cfg.use_unconfident);
  for (unsigned char m : res.missing)
    if (m) {
      res.has_missing = true;
      break;
    }
  return res;
}

// ---------------------------------------------------------------------------
// Descriptor container file (see docs/formats.md).

using wire::get_f32;
using wire::get_u32;
using wire::put_f32;
using wire::put_u32;

void write_descriptor_file(const std::filesystem::path& path,
                           const std::vector<PersonDescriptor>& descriptors) {
  if (descriptors.empty())
    throw std::invalid_argument("write_descriptor_file: nothing to write");
  const int N = descriptors[0].n_regions;
  const int c = descriptors[0].feature_dim;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_descriptor_file: cannot open " + path.string());
  os << "REIDDESC 1 " << N << " " << c << " " << descriptors.size() << "\n";
  for (const auto& d : descriptors) {
    if (d.n_regions != N || d.feature_dim != c)
      throw std::invalid_argument("write_descriptor_file: heterogeneous descriptors");
    put_u32(os, static_cast<std::uint32_t>(d.image_id.size()));
    os.write(d.image_id.data(), static_cast<std::streamsize>(d.image_id.size()));
    put_u32(os, static_cast<std::uint32_t>(d.identity));
    for (std::int64_t i = 0; i < d.region_features.numel(); ++i)
      put_f32(os, d.region_features[i]);
    for (int k = 0; k < c; ++k) put_f32(os, d.unconfident_feature[static_cast<std::size_t>(k)]);
    for (int r = 0; r < N - 1; ++r) put_f32(os, d.visibility[static_cast<std::size_t>(r)]);
    put_f32(os, d.unconfident_score);
  }
  if (!os) throw std::runtime_error("write_descriptor_file: write failed");
}

std::vector<PersonDescriptor> read_descriptor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_descriptor_file: cannot open " + path.string());
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::string magic;
  int version = 0, N = 0, c = 0;
  std::size_t count = 0;
  hs >> magic >> version >> N >> c >> count;
  if (magic != "REIDDESC" || version != 1 || N < 2 || c < 1)
    throw std::runtime_error("read_descriptor_file: bad header in " + path.string());
  std::vector<PersonDescriptor> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    PersonDescriptor d;
    d.n_regions = N;
    d.feature_dim = c;
    const std::uint32_t len = get_u32(is);
    d.image_id.resize(len);
    is.read(d.image_id.data(), len);
    d.identity = static_cast<std::int32_t>(get_u32(is));
    d.region_features = Tensor({N - 1, c});
    for (std::int64_t i = 0; i < d.region_features.numel(); ++i)
      d.region_features[i] = get_f32(is);
    d.unconfident_feature.assign(static_cast<std::size_t>(c), 0.0);
    for (int k = 0; k < c; ++k) d.unconfident_feature[static_cast<std::size_t>(k)] = get_f32(is);
    d.visibility.assign(static_cast<std::size_t>(N - 1), 0.0);
    for (int r = 0; r < N - 1; ++r) d.visibility[static_cast<std::size_t>(r)] = get_f32(is);
    d.unconfident_score = get_f32(is);
    if (!is) throw std::runtime_error("read_descriptor_file: truncated file " + path.string());
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace reid::align
