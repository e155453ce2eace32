#include "reid/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "reid/kernels.hpp"
#include "reid/rng.hpp"
#include "reid/wire.hpp"

namespace reid::model {

int ModelConfig::n_blocks() const {
  int n = 0, d = downsample;
  while (d > 1) {
    if (d % 2 != 0) throw std::invalid_argument("ModelConfig: downsample must be a power of two");
    d /= 2;
    ++n;
  }
  return n;
}

std::vector<int> ModelConfig::block_channels() const {
  const int nb = n_blocks();
  std::vector<int> ch(static_cast<std::size_t>(nb));
  for (int i = 0; i < nb; ++i) ch[static_cast<std::size_t>(i)] = std::max(4, channels >> (nb - 1 - i));
  return ch;
}

void ModelConfig::validate() const {
  if (input_h <= 0 || input_w <= 0 || input_h % downsample != 0 || input_w % downsample != 0)
    throw std::invalid_argument("ModelConfig: input size must be divisible by downsample");
  if (channels < 2 || n_regions < 2 || num_identities < 2)
    throw std::invalid_argument("ModelConfig: channels/regions/identities must be >= 2");
  if (reduced_channels < 4)
    throw std::invalid_argument("ModelConfig: reduced_channels must be >= 4 (three carry color)");
  if (n_blocks() < 1) throw std::invalid_argument("ModelConfig: downsample must be >= 2");
}

namespace {

constexpr int kCoordChannels = 2;
constexpr int kInputChannels = 3 + kCoordChannels;
// Gain on the block-averaged RGB channels appended to the reduced features.
// Descriptor rows are unit-normalized, so without the gain the learned
// channels drown out the color direction that carries the identity signal.
constexpr double kColorGain = 8.0;

struct LayerSpec {
  std::string name;
  std::vector<int> wshape;  // [Cout, Cin, kh, kw] or classifier shapes
  std::vector<int> bshape;
};

std::vector<LayerSpec> layer_specs(const ModelConfig& cfg) {
  std::vector<LayerSpec> specs;
  const std::vector<int> ch = cfg.block_channels();
  int cin = kInputChannels;
  for (std::size_t i = 0; i < ch.size(); ++i) {
    specs.push_back({"block" + std::to_string(i), {ch[i], cin, 3, 3}, {ch[i]}});
    cin = ch[i];
  }
  specs.push_back({"parse", {cfg.n_regions, cfg.channels, 1, 1}, {cfg.n_regions}});
  // Three of the reduced channels are block-averaged RGB appended after the
  // 1x1 projection, so the descriptor features always carry raw color.
  specs.push_back({"reduce",
                   {cfg.reduced_channels - 3, cfg.channels, 1, 1},
                   {cfg.reduced_channels - 3}});
  // Identity classifiers: one row per foreground region plus a separate row
  // for the pooled high-entropy feature.
  specs.push_back({"cls",
                   {cfg.n_regions - 1, cfg.num_identities, cfg.reduced_channels},
                   {cfg.n_regions - 1, cfg.num_identities}});
  specs.push_back({"clsun",
                   {1, cfg.num_identities, cfg.reduced_channels},
                   {1, cfg.num_identities}});
  return specs;
}

int fan_in_of(const LayerSpec& spec) {
  int f = 1;
  for (std::size_t i = 1; i < spec.wshape.size(); ++i) f *= spec.wshape[i];
  return f;
}

}  // namespace

Tensor& ParamSet::at(const std::string& name) {
  for (auto& [n, t] : entries)
    if (n == name) return t;
  throw std::invalid_argument("ParamSet: unknown parameter " + name);
}

const Tensor& ParamSet::at(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return t;
  throw std::invalid_argument("ParamSet: unknown parameter " + name);
}

std::int64_t ParamSet::total_size() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : entries) n += t.numel();
  return n;
}

ParamSet init_parameters(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  ParamSet ps;
  for (const LayerSpec& spec : layer_specs(cfg)) {
    Tensor w(spec.wshape);
    // The parsing head starts at zero so the region distribution opens
    // uniform: every region keeps mass h*w/N until the supervision shapes
    // it, which the identity losses need to get off the ground.
    if (spec.name != "parse") {
      const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in_of(spec)));
      for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = scale * rng.normal();
    }
    ps.entries.emplace_back(spec.name + ".w", std::move(w));
    ps.entries.emplace_back(spec.name + ".b", Tensor(spec.bshape));
  }
  return ps;
}

std::int64_t parameter_count(const ModelConfig& cfg) {
  std::int64_t n = 0;
  for (const LayerSpec& spec : layer_specs(cfg))
    n += Tensor::numel_of(spec.wshape) + Tensor::numel_of(spec.bshape);
  return n;
}

Tensor with_coord_channels(const Tensor& images, const ModelConfig& cfg) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg.input_h ||
      images.dim(3) != cfg.input_w)
    throw std::invalid_argument("with_coord_channels: expected [B,3,H,W] images");
  const int B = images.dim(0), H = cfg.input_h, W = cfg.input_w;
  Tensor out({B, kInputChannels, H, W});
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  for (int b = 0; b < B; ++b) {
    std::memcpy(out.data() + static_cast<std::int64_t>(b) * kInputChannels * hw,
                images.data() + static_cast<std::int64_t>(b) * 3 * hw,
                sizeof(double) * static_cast<std::size_t>(3 * hw));
    double* ycoord = out.data() + (static_cast<std::int64_t>(b) * kInputChannels + 3) * hw;
    double* xcoord = out.data() + (static_cast<std::int64_t>(b) * kInputChannels + 4) * hw;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        ycoord[y * W + x] = H > 1 ? 2.0 * y / (H - 1) - 1.0 : 0.0;
        xcoord[y * W + x] = W > 1 ? 2.0 * x / (W - 1) - 1.0 : 0.0;
      }
  }
  return out;
}

std::vector<ModelOutput> forward(const Tensor& images, const ModelConfig& cfg,
                                 const ParamSet& params) {
  cfg.validate();
  const int B = images.dim(0);
  Tensor x = with_coord_channels(images, cfg);
  int H = cfg.input_h, W = cfg.input_w;
  const std::vector<int> ch = cfg.block_channels();
  int cin = kInputChannels;
  for (std::size_t i = 0; i < ch.size(); ++i) {
    const Tensor& w = params.at("block" + std::to_string(i) + ".w");
    const Tensor& b = params.at("block" + std::to_string(i) + ".b");
    const int Ho = (H + 2 - 3) / 2 + 1;
    const int Wo = (W + 2 - 3) / 2 + 1;
    Tensor y({B, ch[i], Ho, Wo});
    kernels::conv2d_forward(x.data(), w.data(), b.data(), y.data(), B, cin, H, W, ch[i], 3, 3, 2,
                            1);
    kernels::tanh_forward(y.data(), y.data(), y.numel());
    x = std::move(y);
    H = Ho;
    W = Wo;
    cin = ch[i];
  }
  const int h = cfg.feature_h(), w = cfg.feature_w();
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;

  Tensor logits({B, cfg.n_regions, h, w});
  kernels::conv2d_forward(x.data(), params.at("parse.w").data(), params.at("parse.b").data(),
                          logits.data(), B, cfg.channels, h, w, cfg.n_regions, 1, 1, 1, 0);
  Tensor probs({B, cfg.n_regions, h, w});
  kernels::softmax_channels(logits.data(), probs.data(), B, cfg.n_regions, hw);

  Tensor reduced({B, cfg.reduced_channels, h, w});
  const int cr = cfg.reduced_channels - 3;
  {
    Tensor projected({B, cr, h, w});
    kernels::conv2d_forward(x.data(), params.at("reduce.w").data(), params.at("reduce.b").data(),
                            projected.data(), B, cfg.channels, h, w, cr, 1, 1, 1, 0);
    const int f = cfg.downsample;
    const double inv = 1.0 / (static_cast<double>(f) * f);
    for (int b = 0; b < B; ++b) {
      std::memcpy(reduced.data() + static_cast<std::int64_t>(b) * cfg.reduced_channels * hw,
                  projected.data() + static_cast<std::int64_t>(b) * cr * hw,
                  sizeof(double) * static_cast<std::size_t>(cr) * hw);
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xo = 0; xo < w; ++xo) {
            double acc = 0.0;
            for (int dy = 0; dy < f; ++dy)
              for (int dx = 0; dx < f; ++dx)
                acc += images.at(b, ch, y * f + dy, xo * f + dx);
            reduced[((static_cast<std::int64_t>(b) * cfg.reduced_channels + cr + ch) * h + y) * w +
                    xo] = kColorGain * acc * inv;
          }
    }
  }

  std::vector<ModelOutput> out;
  out.reserve(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    ModelOutput o;
    o.backbone.kind = align::FeatureMap::Kind::backbone;
    o.backbone.data = Tensor({cfg.channels, h, w});
    std::memcpy(o.backbone.data.data(), x.data() + static_cast<std::int64_t>(b) * cfg.channels * hw,
                sizeof(double) * static_cast<std::size_t>(cfg.channels) * hw);
    o.parsing.n_regions = cfg.n_regions;
    o.parsing.probs = Tensor({cfg.n_regions, h, w});
    std::memcpy(o.parsing.probs.data(),
                probs.data() + static_cast<std::int64_t>(b) * cfg.n_regions * hw,
                sizeof(double) * static_cast<std::size_t>(cfg.n_regions) * hw);
    o.reduced.kind = align::FeatureMap::Kind::reduced;
    o.reduced.data = Tensor({cfg.reduced_channels, h, w});
    std::memcpy(o.reduced.data.data(),
                reduced.data() + static_cast<std::int64_t>(b) * cfg.reduced_channels * hw,
                sizeof(double) * static_cast<std::size_t>(cfg.reduced_channels) * hw);
    out.push_back(std::move(o));
  }
  return out;
}

ad::Var TapeParams::at(const std::string& name) const {
  for (const auto& [n, v] : vars)
    if (n == name) return v;
  throw std::invalid_argument("TapeParams: unknown parameter " + name);
}

TapeParams bind_parameters(ad::Tape& tape, const ParamSet& params) {
  TapeParams tp;
  for (const auto& [name, t] : params.entries) tp.vars.emplace_back(name, tape.leaf(t));
  return tp;
}

TapeOutputs forward_tape(ad::Tape& tape, ad::Var images, const ModelConfig& cfg,
                         const TapeParams& params) {
  const Tensor& vi = tape.val(images);
  if (vi.rank() != 4 || vi.dim(1) != kInputChannels)
    throw std::invalid_argument("forward_tape: images must be [B,5,H,W] with coord planes");
  ad::Var x = images;
  const std::vector<int> ch = cfg.block_channels();
  for (std::size_t i = 0; i < ch.size(); ++i) {
    x = tape.conv2d(x, params.at("block" + std::to_string(i) + ".w"),
                    params.at("block" + std::to_string(i) + ".b"), 2, 1);
    x = tape.tanh(x);
  }
  TapeOutputs out;
  out.backbone = x;
  out.parsing = tape.softmax_channels(tape.conv2d(x, params.at("parse.w"), params.at("parse.b"), 1, 0));
  const ad::Var projected = tape.conv2d(x, params.at("reduce.w"), params.at("reduce.b"), 1, 0);
  const ad::Var rgb =
      tape.scale(tape.avgpool(tape.slice_channels(images, 0, 3), cfg.downsample), kColorGain);
  out.reduced = tape.concat_channels(projected, rgb);
  return out;
}

// --------------------------------------------------------------------------
// Checkpoint container (docs/formats.md).

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ParamSet& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  os << "REIDCKPT 1\n";
  os << "input_h = " << cfg.input_h << "\n";
  os << "input_w = " << cfg.input_w << "\n";
  os << "downsample = " << cfg.downsample << "\n";
  os << "channels = " << cfg.channels << "\n";
  os << "reduced_channels = " << cfg.reduced_channels << "\n";
  os << "n_regions = " << cfg.n_regions << "\n";
  os << "num_identities = " << cfg.num_identities << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "params = " << params.entries.size() << "\n";
  for (const auto& [name, t] : params.entries) {
    os << name;
    for (int i = 0; i < t.rank(); ++i) os << " " << t.dim(i);
    os << "\n";
    for (std::int64_t i = 0; i < t.numel(); ++i) wire::put_f32(os, t[i]);
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed");
}

std::pair<ModelConfig, ParamSet> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "REIDCKPT 1") throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
  ModelConfig cfg;
  std::size_t n_params = 0;
  for (;;) {
    if (!std::getline(is, line)) throw std::runtime_error("load_checkpoint: truncated header");
    std::istringstream ls(line);
    std::string key, eq;
    ls >> key >> eq;
    if (key == "input_h") ls >> cfg.input_h;
    else if (key == "input_w") ls >> cfg.input_w;
    else if (key == "downsample") ls >> cfg.downsample;
    else if (key == "channels") ls >> cfg.channels;
    else if (key == "reduced_channels") ls >> cfg.reduced_channels;
    else if (key == "n_regions") ls >> cfg.n_regions;
    else if (key == "num_identities") ls >> cfg.num_identities;
    else if (key == "seed") ls >> cfg.seed;
    else if (key == "params") {
      ls >> n_params;
      break;
    } else {
      throw std::runtime_error("load_checkpoint: unknown header key " + key);
    }
  }
  ParamSet ps;
  for (std::size_t n = 0; n < n_params; ++n) {
    if (!std::getline(is, line)) throw std::runtime_error("load_checkpoint: truncated params");
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    std::vector<int> shape;
    int d = 0;
    while (ls >> d) shape.push_back(d);
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = wire::get_f32(is);
    if (!is) throw std::runtime_error("load_checkpoint: truncated data");
    ps.entries.emplace_back(name, std::move(t));
  }
  return {cfg, ps};
}

}  // namespace reid::model
