#include "reid/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace reid::synthdata {

const char* to_string(ViewTag v) {
  switch (v) {
    case ViewTag::full: return "full";
    case ViewTag::half: return "half";
    case ViewTag::occluded: return "occluded";
  }
  return "full";
}

ViewTag view_from_string(const std::string& s) {
  if (s == "full") return ViewTag::full;
  if (s == "half") return ViewTag::half;
  if (s == "occluded") return ViewTag::occluded;
  throw std::invalid_argument("unknown view tag: " + s);
}

std::vector<double> IdentitySpec::appearance_vector() const {
  std::vector<double> v;
  v.reserve(kNumParts * 3);
  for (const auto& c : base_color) v.insert(v.end(), c.begin(), c.end());
  return v;
}

// --------------------------------------------------------------------------
// Canonical body geometry. u is horizontal, v vertical (top down), both in
// [0,1]. Parts are pairwise disjoint; limbs are mirrored box pairs sharing
// one region label.

namespace {

struct Box {
  double u0, u1, v0, v1;
  bool contains(double u, double v) const { return u >= u0 && u < u1 && v >= v0 && v < v1; }
};

struct PartShape {
  int region;  // 1..7
  std::vector<Box> boxes;
  bool ellipse = false;  // head
  double cu = 0, cv = 0, ru = 1, rv = 1;
};

// Parts are deliberately chunky so they survive majority voting when labels
// are pooled to the feature grid (each piece spans at least one downsample
// block at the default 96x32 resolution).
const std::vector<PartShape>& part_shapes() {
  static const std::vector<PartShape> shapes = [] {
    std::vector<PartShape> s;
    PartShape head;
    head.region = 1;
    head.ellipse = true;
    head.cu = 0.5;
    head.cv = 0.09;
    head.ru = 0.16;
    head.rv = 0.075;
    s.push_back(head);
    s.push_back({2, {{0.335, 0.665, 0.18, 0.46}}});                               // torso
    s.push_back({3, {{0.02, 0.30, 0.18, 0.33}, {0.70, 0.98, 0.18, 0.33}}});       // upper-arm
    s.push_back({4, {{0.02, 0.30, 0.35, 0.475}, {0.70, 0.98, 0.35, 0.475}}});     // lower-arm
    s.push_back({5, {{0.18, 0.48, 0.49, 0.665}, {0.52, 0.82, 0.49, 0.665}}});     // upper-leg
    s.push_back({6, {{0.20, 0.46, 0.685, 0.845}, {0.54, 0.80, 0.685, 0.845}}});   // lower-leg
    s.push_back({7, {{0.14, 0.48, 0.865, 0.985}, {0.52, 0.86, 0.865, 0.985}}});   // foot
    return s;
  }();
  return shapes;
}

// Image <-> canonical mapping: x = (u - cu)*sx*W + W/2, y = (v - cv)*sy*H + H/2.
struct Frame {
  double sx, sy, cu, cv;

  void to_canonical(double x, double y, int H, int W, double& u, double& v) const {
    u = (x - 0.5 * W) / (sx * W) + cu;
    v = (y - 0.5 * H) / (sy * H) + cv;
  }
  void to_image(double u, double v, int H, int W, double& x, double& y) const {
    x = (u - cu) * sx * W + 0.5 * W;
    y = (v - cv) * sy * H + 0.5 * H;
  }
};

Frame frame_for(const VariationParams& p, ViewTag view) {
  Frame f{};
  if (view == ViewTag::half) {
    // Zoom onto the upper body; everything below mid-thigh leaves the frame.
    f.sx = 1.2;
    f.sy = 1.72;
    f.cu = 0.5 + p.shift_u * 0.3;
    f.cv = 0.28 + p.shift_v * 0.5;
  } else {
    f.sx = p.scale;
    f.sy = p.scale;
    f.cu = 0.5 + p.shift_u;
    f.cv = 0.5 + p.shift_v;
  }
  return f;
}

}  // namespace

int part_at(double u, double v) {
  for (const PartShape& s : part_shapes()) {
    if (s.ellipse) {
      const double du = (u - s.cu) / s.ru;
      const double dv = (v - s.cv) / s.rv;
      if (du * du + dv * dv <= 1.0) return s.region;
    } else {
      for (const Box& b : s.boxes)
        if (b.contains(u, v)) return s.region;
    }
  }
  return kBackground;
}

VariationParams draw_variation(Rng& rng, ViewTag view) {
  VariationParams p;
  p.scale = rng.uniform(0.82, 0.95);
  p.shift_u = rng.uniform(-0.03, 0.03);
  p.shift_v = rng.uniform(-0.02, 0.02);
  // Mid-gray backgrounds with mild per-image tint: strong enough clutter to
  // punish whole-image pooling, weak enough that early pooled features stay
  // stable per identity.
  for (double& c : p.bg_color) c = rng.uniform(0.35, 0.65);
  p.bg_noise = rng.uniform(0.04, 0.12);
  p.pixel_seed = rng.raw();
  if (view == ViewTag::occluded) {
    // Cover one lower/side part completely.
    static const int candidates[4] = {4, 5, 6, 7};  // lower-arm..foot
    p.occlude_part = candidates[rng.uniform_int(0, 3)];
    for (double& c : p.occluder_color) c = rng.uniform(0.05, 0.95);
    p.occluder_grow_px = rng.uniform_int(1, 5);
  }
  return p;
}

SampleRecord render_sample(const IdentitySpec& identity, const VariationParams& params,
                           ViewTag view, int height, int width) {
  const int H = height, W = width;
  const Frame fr = frame_for(params, view);
  SampleRecord rec;
  rec.identity = identity.id;
  rec.view = view;
  rec.image = Tensor({3, H, W});
  rec.part_labels.assign(static_cast<std::size_t>(H) * W, kBackground);

  // Occluder rectangle in image coordinates: the bounding box of the target
  // part's rendered pixels, grown by a few pixels.
  int oy0 = 0, oy1 = -1, ox0 = 0, ox1 = -1;
  if (view == ViewTag::occluded) {
    double umin = 1e9, umax = -1e9, vmin = 1e9, vmax = -1e9;
    for (const PartShape& s : part_shapes()) {
      if (s.region != params.occlude_part) continue;
      if (s.ellipse) {
        umin = s.cu - s.ru;
        umax = s.cu + s.ru;
        vmin = s.cv - s.rv;
        vmax = s.cv + s.rv;
      } else {
        for (const Box& b : s.boxes) {
          umin = std::min(umin, b.u0);
          umax = std::max(umax, b.u1);
          vmin = std::min(vmin, b.v0);
          vmax = std::max(vmax, b.v1);
        }
      }
    }
    double x0, y0, x1, y1;
    fr.to_image(umin, vmin, H, W, x0, y0);
    fr.to_image(umax, vmax, H, W, x1, y1);
    const int grow = params.occluder_grow_px;
    ox0 = std::max(0, static_cast<int>(std::floor(x0)) - grow);
    oy0 = std::max(0, static_cast<int>(std::floor(y0)) - grow);
    ox1 = std::min(W - 1, static_cast<int>(std::ceil(x1)) + grow);
    oy1 = std::min(H - 1, static_cast<int>(std::ceil(y1)) + grow);
  }

  Rng noise(params.pixel_seed);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const bool occluded = y >= oy0 && y <= oy1 && x >= ox0 && x <= ox1 && oy1 >= oy0;
      double u, v;
      fr.to_canonical(x + 0.5, y + 0.5, H, W, u, v);
      const int region = occluded ? kBackground : part_at(u, v);
      rec.part_labels[static_cast<std::size_t>(y) * W + x] = region;
      double rgb[3];
      if (occluded) {
        for (int ch = 0; ch < 3; ++ch)
          rgb[ch] = params.occluder_color[ch] + 0.05 * noise.uniform(-1.0, 1.0);
      } else if (region == kBackground) {
        for (int ch = 0; ch < 3; ++ch)
          rgb[ch] = params.bg_color[ch] + params.bg_noise * noise.uniform(-1.0, 1.0);
      } else {
        const int part = region - 1;
        for (int ch = 0; ch < 3; ++ch)
          rgb[ch] = identity.base_color[static_cast<std::size_t>(part)][static_cast<std::size_t>(ch)] +
                    identity.noise_amp[static_cast<std::size_t>(part)] * noise.uniform(-1.0, 1.0);
      }
      for (int ch = 0; ch < 3; ++ch)
        rec.image.at(ch, y, x) = std::clamp(rgb[ch], 0.0, 1.0);
    }
  }
  return rec;
}

SampleRecord flip_horizontal(const SampleRecord& s) {
  const int H = s.height(), W = s.width();
  SampleRecord out = s;
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.image.at(ch, y, x) = s.image.at(ch, y, W - 1 - x);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      out.part_labels[static_cast<std::size_t>(y) * W + x] =
          s.part_labels[static_cast<std::size_t>(y) * W + (W - 1 - x)];
  return out;
}

SampleRecord erase_rect(const SampleRecord& s, int y0, int x0, int eh, int ew,
                        std::uint64_t fill_seed) {
  SampleRecord out = s;
  const int H = s.height(), W = s.width();
  Rng fill(fill_seed);
  for (int y = y0; y < std::min(H, y0 + eh); ++y)
    for (int x = x0; x < std::min(W, x0 + ew); ++x) {
      for (int ch = 0; ch < 3; ++ch) out.image.at(ch, y, x) = fill.uniform();
      out.part_labels[static_cast<std::size_t>(y) * W + x] = kBackground;
    }
  return out;
}

SampleRecord augment(const SampleRecord& s, std::uint64_t seed) {
  Rng rng(seed);
  SampleRecord out = s;
  if (rng.uniform() < 0.5) out = flip_horizontal(out);
  if (rng.uniform() < 0.5) {
    const int H = s.height(), W = s.width();
    const double area = rng.uniform(0.05, 0.20) * H * W;
    const double aspect = rng.uniform(0.5, 2.0);
    int eh = std::max(1, std::min(H, static_cast<int>(std::round(std::sqrt(area * aspect)))));
    int ew = std::max(1, std::min(W, static_cast<int>(std::round(std::sqrt(area / aspect)))));
    const int y0 = rng.uniform_int(0, H - eh);
    const int x0 = rng.uniform_int(0, W - ew);
    out = erase_rect(out, y0, x0, eh, ew, rng.raw());
  }
  return out;
}

std::vector<int> downsample_labels(const std::vector<int>& labels, int height, int width,
                                   int downsample) {
  if (height % downsample != 0 || width % downsample != 0)
    throw std::invalid_argument("downsample_labels: size not divisible by downsample");
  const int h = height / downsample, w = width / downsample;
  std::vector<int> out(static_cast<std::size_t>(h) * w, kBackground);
  for (int cy = 0; cy < h; ++cy)
    for (int cx = 0; cx < w; ++cx) {
      int counts[kNumRegions + 1] = {0};
      for (int dy = 0; dy < downsample; ++dy)
        for (int dx = 0; dx < downsample; ++dx) {
          const int y = cy * downsample + dy, x = cx * downsample + dx;
          counts[labels[static_cast<std::size_t>(y) * width + x]]++;
        }
      int best = 1;
      for (int r = 2; r <= kNumRegions; ++r)
        if (counts[r] > counts[best]) best = r;  // ties keep the smaller index
      out[static_cast<std::size_t>(cy) * w + cx] = best;
    }
  return out;
}

// --------------------------------------------------------------------------
// Dataset generation.

namespace {

// Every part color is separated from the same part of every other identity,
// so each body part on its own identifies the person. The colors are the
// clothing analog: the identity signal the matcher is supposed to use.
std::vector<IdentitySpec> draw_identities(Rng& rng, int n) {
  constexpr double kMinPartColorDist = 0.18;
  std::vector<IdentitySpec> ids;
  ids.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    IdentitySpec spec;
    spec.id = i;
    for (int part = 0; part < kNumParts; ++part) {
      auto& color = spec.base_color[static_cast<std::size_t>(part)];
      int attempts = 0;
      for (;;) {
        if (++attempts > 200000)
          throw std::runtime_error("draw_identities: could not satisfy color separation");
        for (int ch = 0; ch < 3; ++ch) color[static_cast<std::size_t>(ch)] = rng.uniform(0.05, 0.95);
        bool ok = true;
        for (const IdentitySpec& other : ids) {
          const auto& oc = other.base_color[static_cast<std::size_t>(part)];
          double d2 = 0.0;
          for (int ch = 0; ch < 3; ++ch)
            d2 += (color[static_cast<std::size_t>(ch)] - oc[static_cast<std::size_t>(ch)]) *
                  (color[static_cast<std::size_t>(ch)] - oc[static_cast<std::size_t>(ch)]);
          if (std::sqrt(d2) < kMinPartColorDist) {
            ok = false;
            break;
          }
        }
        if (ok) break;
      }
      spec.noise_amp[static_cast<std::size_t>(part)] = rng.uniform(0.02, 0.06);
    }
    ids.push_back(spec);
  }
  return ids;
}

// Training identities render full views only (matching protocols that train
// on holistic data and evaluate on partial sets); evaluation identities get
// full gallery views plus half/occluded probes.
ViewTag view_for_index(int k, int images_per_identity, bool train_identity) {
  if (train_identity) return ViewTag::full;
  const int n_full = (images_per_identity + 1) / 2;
  if (k < n_full) return ViewTag::full;
  return ((k - n_full) % 2 == 0) ? ViewTag::half : ViewTag::occluded;
}

std::string sample_stem(int id, int k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d_%02d", id, k);
  return buf;
}

}  // namespace

DatasetManifest generate_dataset(const GenerateConfig& cfg, const std::filesystem::path& out_root) {
  if (cfg.n_identities < 4 || cfg.images_per_identity < 4)
    throw std::invalid_argument("generate_dataset: need >= 4 identities and >= 4 images each");
  namespace fs = std::filesystem;
  DatasetManifest m;
  m.root = out_root;
  m.seed = cfg.seed;
  m.n_identities = cfg.n_identities;
  m.images_per_identity = cfg.images_per_identity;
  m.height = cfg.height;
  m.width = cfg.width;

  Rng id_rng(Rng::derive(cfg.seed, 0xA11CE));
  const std::vector<IdentitySpec> identities = draw_identities(id_rng, cfg.n_identities);
  const int n_train_ids = cfg.n_identities / 2;

  for (const char* split : {"train", "gallery", "probe"}) {
    fs::create_directories(out_root / "images" / split);
    fs::create_directories(out_root / "labels" / split);
  }

  for (int id = 0; id < cfg.n_identities; ++id) {
    for (int k = 0; k < cfg.images_per_identity; ++k) {
      const ViewTag view = view_for_index(k, cfg.images_per_identity, id < n_train_ids);
      ManifestEntry e;
      e.identity = id;
      e.index = k;
      e.view = view;
      if (id < n_train_ids)
        e.split = "train";
      else
        e.split = (view == ViewTag::full) ? "gallery" : "probe";
      const std::string stem = sample_stem(id, k);
      e.image_path = "images/" + e.split + "/" + stem + ".ppm";
      e.label_path = "labels/" + e.split + "/" + stem + ".pgm";
      m.entries.push_back(std::move(e));
    }
  }

  const int total = static_cast<int>(m.entries.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < total; ++i) {
    const ManifestEntry& e = m.entries[static_cast<std::size_t>(i)];
    Rng rng(Rng::derive(cfg.seed, static_cast<std::uint64_t>(e.identity) * 1000003u +
                                      static_cast<std::uint64_t>(e.index)));
    const VariationParams params = draw_variation(rng, e.view);
    const SampleRecord rec = render_sample(identities[static_cast<std::size_t>(e.identity)],
                                           params, e.view, cfg.height, cfg.width);
    write_ppm(out_root / e.image_path, rec.image);
    write_pgm(out_root / e.label_path, rec.part_labels, cfg.height, cfg.width);
  }

  std::ofstream os(out_root / "manifest.txt");
  if (!os) throw std::runtime_error("generate_dataset: cannot write manifest under " +
                                    out_root.string());
  os << "REIDDATA 1\n";
  os << "seed = " << cfg.seed << "\n";
  os << "n_identities = " << cfg.n_identities << "\n";
  os << "images_per_identity = " << cfg.images_per_identity << "\n";
  os << "height = " << cfg.height << "\n";
  os << "width = " << cfg.width << "\n";
  os << "n_regions = " << kNumRegions << "\n";
  os << "count = " << m.entries.size() << "\n";
  os << "# split identity index view image label\n";
  for (const ManifestEntry& e : m.entries)
    os << e.split << " " << e.identity << " " << e.index << " " << to_string(e.view) << " "
       << e.image_path << " " << e.label_path << "\n";
  m.validate();
  return m;
}

std::vector<ManifestEntry> DatasetManifest::split(const std::string& name) const {
  std::vector<ManifestEntry> out;
  for (const ManifestEntry& e : entries)
    if (e.split == name) out.push_back(e);
  return out;
}

void DatasetManifest::validate() const {
  std::set<int> train_ids, gallery_ids, probe_ids;
  std::set<std::string> gallery_images, probe_images;
  for (const ManifestEntry& e : entries) {
    if (e.split == "train") train_ids.insert(e.identity);
    if (e.split == "gallery") {
      gallery_ids.insert(e.identity);
      gallery_images.insert(e.image_path);
    }
    if (e.split == "probe") {
      probe_ids.insert(e.identity);
      probe_images.insert(e.image_path);
    }
  }
  if (gallery_ids != probe_ids)
    throw std::runtime_error("manifest: gallery and probe identity sets must coincide");
  for (const std::string& img : probe_images)
    if (gallery_images.count(img))
      throw std::runtime_error("manifest: probe image also appears in the gallery");
  for (int id : train_ids)
    if (gallery_ids.count(id))
      throw std::runtime_error("manifest: train identity leaks into evaluation");
}

DatasetManifest load_manifest(const std::filesystem::path& root) {
  std::ifstream is(root / "manifest.txt");
  if (!is) throw std::runtime_error("load_manifest: cannot open " + (root / "manifest.txt").string());
  DatasetManifest m;
  m.root = root;
  std::string line;
  std::getline(is, line);
  if (line != "REIDDATA 1") throw std::runtime_error("load_manifest: bad magic");
  std::size_t count = 0;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string first;
    ls >> first;
    if (first == "seed" || first == "n_identities" || first == "images_per_identity" ||
        first == "height" || first == "width" || first == "n_regions" || first == "count") {
      std::string eq;
      ls >> eq;
      if (first == "seed") ls >> m.seed;
      else if (first == "n_identities") ls >> m.n_identities;
      else if (first == "images_per_identity") ls >> m.images_per_identity;
      else if (first == "height") ls >> m.height;
      else if (first == "width") ls >> m.width;
      else if (first == "count") ls >> count;
      continue;
    }
    ManifestEntry e;
    e.split = first;
    std::string view;
    ls >> e.identity >> e.index >> view >> e.image_path >> e.label_path;
    e.view = view_from_string(view);
    m.entries.push_back(std::move(e));
  }
  if (count != m.entries.size()) throw std::runtime_error("load_manifest: entry count mismatch");
  return m;
}

SampleRecord load_sample(const DatasetManifest& m, const ManifestEntry& e) {
  SampleRecord rec;
  rec.image = read_ppm(m.root / e.image_path);
  int h = 0, w = 0;
  rec.part_labels = read_pgm(m.root / e.label_path, h, w);
  if (h != rec.image.dim(1) || w != rec.image.dim(2))
    throw std::runtime_error("load_sample: image/label size mismatch for " + e.image_path);
  rec.identity = e.identity;
  rec.view = e.view;
  return rec;
}

// --------------------------------------------------------------------------
// PPM / PGM rasters.

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("write_ppm: image must be [3,H,W]");
  const int H = image.dim(1), W = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path.string());
  os << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(W) * 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x)
      for (int ch = 0; ch < 3; ++ch)
        row[static_cast<std::size_t>(x) * 3 + ch] = static_cast<unsigned char>(
            std::lround(std::clamp(image.at(ch, y, x), 0.0, 1.0) * 255.0));
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

namespace {

void read_raster_header(std::istream& is, const char* magic, int& w, int& h, int& maxval) {
  std::string m;
  is >> m;
  if (m != magic) throw std::runtime_error("raster: unexpected magic");
  is >> w >> h >> maxval;
  is.get();  // single whitespace before binary data
  if (maxval != 255) throw std::runtime_error("raster: only 8-bit rasters supported");
}

}  // namespace

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_ppm: cannot open " + path.string());
  int w = 0, h = 0, maxval = 0;
  read_raster_header(is, "P6", w, h, maxval);
  Tensor image({3, h, w});
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        image.at(ch, y, x) = row[static_cast<std::size_t>(x) * 3 + ch] / 255.0;
  }
  if (!is) throw std::runtime_error("read_ppm: truncated file " + path.string());
  return image;
}

void write_pgm(const std::filesystem::path& path, const std::vector<int>& labels, int height,
               int width) {
  if (static_cast<int>(labels.size()) != height * width)
    throw std::invalid_argument("write_pgm: label count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path.string());
  os << "P5\n" << width << " " << height << "\n255\n";
  std::vector<unsigned char> data(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) data[i] = static_cast<unsigned char>(labels[i]);
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

std::vector<int> read_pgm(const std::filesystem::path& path, int& height, int& width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pgm: cannot open " + path.string());
  int maxval = 0;
  read_raster_header(is, "P5", width, height, maxval);
  std::vector<unsigned char> data(static_cast<std::size_t>(width) * height);
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!is) throw std::runtime_error("read_pgm: truncated file " + path.string());
  std::vector<int> labels(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) labels[i] = data[i];
  return labels;
}

}  // namespace reid::synthdata
