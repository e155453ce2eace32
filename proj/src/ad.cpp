#include "reid/ad.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "reid/kernels.hpp"
#include "reid/segmap.hpp"

namespace reid::ad {

namespace {

double euclid(const double* a, const double* b, int c) {
  double s = 0.0;
  for (int k = 0; k < c; ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return std::sqrt(s);
}

void check_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) throw std::invalid_argument(std::string(op) + ": unexpected tensor rank");
}

}  // namespace

Var Tape::push(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> back) {
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value) { return push(std::move(value), {}, nullptr); }

Var Tape::constant(Tensor value) { return push(std::move(value), {}, nullptr); }

void Tape::backward(Var root) {
  if (!root.valid() || val(root).numel() != 1)
    throw std::invalid_argument("Tape::backward: root must be a scalar node");
  for (Node& n : nodes_) {
    n.grad = Tensor(n.value.shape());
  }
  nodes_[static_cast<std::size_t>(root.id)].grad[0] = 1.0;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.back) n.back(*this, i);
  }
}

// --- elementwise / shape -----------------------------------------------

Var Tape::add(Var a, Var b) {
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  if (!va.same_shape(vb)) throw std::invalid_argument("add: shape mismatch");
  Tensor out(va.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] + vb[i];
  return push(std::move(out), {a.id, b.id}, [a, b](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& ga = t.gradref(a.id);
    Tensor& gb = t.gradref(b.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

Var Tape::scale(Var x, double a) {
  const Tensor& vx = val(x);
  Tensor out(vx.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a * vx[i];
  return push(std::move(out), {x.id}, [x, a](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& gx = t.gradref(x.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += a * g[i];
  });
}

Var Tape::one_minus(Var x) {
  const Tensor& vx = val(x);
  Tensor out(vx.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 - vx[i];
  return push(std::move(out), {x.id}, [x](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& gx = t.gradref(x.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] -= g[i];
  });
}

Var Tape::tanh(Var x) {
  const Tensor& vx = val(x);
  Tensor out(vx.shape());
  kernels::tanh_forward(vx.data(), out.data(), out.numel());
  return push(std::move(out), {x.id}, [x](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    const Tensor& y = t.nodes_[static_cast<std::size_t>(self)].value;
    Tensor& gx = t.gradref(x.id);
    const std::int64_t n = g.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var Tape::sum_all(Var x) {
  const Tensor& vx = val(x);
  double acc = 0.0;
  for (std::int64_t i = 0; i < vx.numel(); ++i) acc += vx[i];
  return push(Tensor::scalar(acc), {x.id}, [x](Tape& t, int self) {
    const double gv = t.gradref(self)[0];
    if (gv == 0.0) return;
    Tensor& gx = t.gradref(x.id);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += gv;
  });
}

Var Tape::entry(Var x, std::int64_t i) {
  const Tensor& vx = val(x);
  if (i < 0 || i >= vx.numel()) throw std::invalid_argument("entry: index out of range");
  return push(Tensor::scalar(vx[i]), {x.id}, [x, i](Tape& t, int self) {
    t.gradref(x.id)[i] += t.gradref(self)[0];
  });
}

Var Tape::reshape(Var x, std::vector<int> shape) {
  const Tensor& vx = val(x);
  if (Tensor::numel_of(shape) != vx.numel()) throw std::invalid_argument("reshape: numel mismatch");
  Tensor out(std::move(shape));
  std::memcpy(out.data(), vx.data(), sizeof(double) * static_cast<std::size_t>(vx.numel()));
  return push(std::move(out), {x.id}, [x](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& gx = t.gradref(x.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

// --- network layers ------------------------------------------------------

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
  const Tensor& vx = val(x);
  const Tensor& vw = val(w);
  const Tensor& vb = val(b);
  check_rank(vx, 4, "conv2d");
  check_rank(vw, 4, "conv2d");
  const int B = vx.dim(0), Cin = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const int Cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
  if (vw.dim(1) != Cin || vb.numel() != Cout)
    throw std::invalid_argument("conv2d: weight/bias shape mismatch");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor out({B, Cout, Ho, Wo});
  kernels::conv2d_forward(vx.data(), vw.data(), vb.data(), out.data(), B, Cin, H, W, Cout, kh,
                          kw, stride, pad);
  return push(std::move(out), {x.id, w.id, b.id},
              [x, w, b, B, Cin, H, W, Cout, kh, kw, stride, pad](Tape& t, int self) {
                const Tensor& g = t.gradref(self);
                kernels::conv2d_backward(t.val(x).data(), t.val(w).data(), g.data(),
                                         t.gradref(x.id).data(), t.gradref(w.id).data(),
                                         t.gradref(b.id).data(), B, Cin, H, W, Cout, kh, kw,
                                         stride, pad);
              });
}

Var Tape::avgpool(Var x, int factor) {
  const Tensor& vx = val(x);
  check_rank(vx, 4, "avgpool");
  const int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  if (H % factor != 0 || W % factor != 0)
    throw std::invalid_argument("avgpool: size not divisible by factor");
  const int h = H / factor, w = W / factor;
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  Tensor out({B, C, h, w});
  for (int b = 0; b < B; ++b)
    for (int ch = 0; ch < C; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xo = 0; xo < w; ++xo) {
          double acc = 0.0;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx)
              acc += vx.at(b, ch, y * factor + dy, xo * factor + dx);
          out.at(b, ch, y, xo) = acc * inv;
        }
  return push(std::move(out), {x.id}, [x, B, C, h, w, factor, inv](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& gx = t.gradref(x.id);
    for (int b = 0; b < B; ++b)
      for (int ch = 0; ch < C; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xo = 0; xo < w; ++xo) {
            const double gv = g.at(b, ch, y, xo) * inv;
            if (gv == 0.0) continue;
            for (int dy = 0; dy < factor; ++dy)
              for (int dx = 0; dx < factor; ++dx)
                gx.at(b, ch, y * factor + dy, xo * factor + dx) += gv;
          }
  });
}

Var Tape::concat_channels(Var a, Var b) {
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  check_rank(va, 4, "concat_channels");
  check_rank(vb, 4, "concat_channels");
  const int B = va.dim(0), c1 = va.dim(1), c2 = vb.dim(1), h = va.dim(2), w = va.dim(3);
  if (vb.dim(0) != B || vb.dim(2) != h || vb.dim(3) != w)
    throw std::invalid_argument("concat_channels: shape mismatch");
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  Tensor out({B, c1 + c2, h, w});
  for (int bi = 0; bi < B; ++bi) {
    std::memcpy(out.data() + static_cast<std::int64_t>(bi) * (c1 + c2) * hw,
                va.data() + static_cast<std::int64_t>(bi) * c1 * hw,
                sizeof(double) * static_cast<std::size_t>(c1 * hw));
    std::memcpy(out.data() + (static_cast<std::int64_t>(bi) * (c1 + c2) + c1) * hw,
                vb.data() + static_cast<std::int64_t>(bi) * c2 * hw,
                sizeof(double) * static_cast<std::size_t>(c2 * hw));
  }
  return push(std::move(out), {a.id, b.id}, [a, b, B, c1, c2, hw](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& ga = t.gradref(a.id);
    Tensor& gb = t.gradref(b.id);
    for (int bi = 0; bi < B; ++bi) {
      for (std::int64_t i = 0; i < c1 * hw; ++i)
        ga[static_cast<std::int64_t>(bi) * c1 * hw + i] +=
            g[static_cast<std::int64_t>(bi) * (c1 + c2) * hw + i];
      for (std::int64_t i = 0; i < c2 * hw; ++i)
        gb[static_cast<std::int64_t>(bi) * c2 * hw + i] +=
            g[(static_cast<std::int64_t>(bi) * (c1 + c2) + c1) * hw + i];
    }
  });
}

Var Tape::slice_channels(Var x, int c0, int c1) {
  const Tensor& vx = val(x);
  check_rank(vx, 4, "slice_channels");
  const int B = vx.dim(0), C = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1) throw std::invalid_argument("slice_channels: bad range");
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const int cs = c1 - c0;
  Tensor out({B, cs, h, w});
  for (int bi = 0; bi < B; ++bi)
    std::memcpy(out.data() + static_cast<std::int64_t>(bi) * cs * hw,
                vx.data() + (static_cast<std::int64_t>(bi) * C + c0) * hw,
                sizeof(double) * static_cast<std::size_t>(cs * hw));
  return push(std::move(out), {x.id}, [x, B, C, c0, cs, hw](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& gx = t.gradref(x.id);
    for (int bi = 0; bi < B; ++bi)
      for (std::int64_t i = 0; i < cs * hw; ++i)
        gx[(static_cast<std::int64_t>(bi) * C + c0) * hw + i] +=
            g[static_cast<std::int64_t>(bi) * cs * hw + i];
  });
}

Var Tape::softmax_channels(Var x) {
  const Tensor& vx = val(x);
  check_rank(vx, 4, "softmax_channels");
  const int B = vx.dim(0), N = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  Tensor out(vx.shape());
  kernels::softmax_channels(vx.data(), out.data(), B, N, hw);
  return push(std::move(out), {x.id}, [x, B, N, hw](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    const Tensor& p = t.nodes_[static_cast<std::size_t>(self)].value;
    Tensor& gx = t.gradref(x.id);
#pragma omp parallel for schedule(static)
    for (std::int64_t bg = 0; bg < static_cast<std::int64_t>(B) * hw; ++bg) {
      const std::int64_t bi = bg / hw, pix = bg % hw;
      const double* pp = p.data() + bi * N * hw;
      const double* gp = g.data() + bi * N * hw;
      double dot = 0.0;
      for (int i = 0; i < N; ++i) dot += pp[i * hw + pix] * gp[i * hw + pix];
      double* gxp = gx.data() + bi * N * hw;
      for (int i = 0; i < N; ++i)
        gxp[i * hw + pix] += pp[i * hw + pix] * (gp[i * hw + pix] - dot);
    }
  });
}

Var Tape::rows_affine(Var x, Var w, Var b) {
  const Tensor& vx = val(x);
  const Tensor& vw = val(w);
  const Tensor& vb = val(b);
  check_rank(vx, 3, "rows_affine");
  check_rank(vw, 3, "rows_affine");
  const int B = vx.dim(0), R = vx.dim(1), c = vx.dim(2);
  const int K = vw.dim(1);
  if (vw.dim(0) != R || vw.dim(2) != c || vb.dim(0) != R || vb.dim(1) != K)
    throw std::invalid_argument("rows_affine: classifier shape mismatch");
  Tensor out({B, R, K});
  for (int bi = 0; bi < B; ++bi)
    for (int r = 0; r < R; ++r)
      for (int k = 0; k < K; ++k) {
        double acc = vb.at(r, k);
        for (int j = 0; j < c; ++j) acc += vx.at(bi, r, j) * vw.at(r, k, j);
        out.at(bi, r, k) = acc;
      }
  return push(std::move(out), {x.id, w.id, b.id}, [x, w, b, B, R, c, K](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    const Tensor& vx = t.val(x);
    const Tensor& vw = t.val(w);
    Tensor& gx = t.gradref(x.id);
    Tensor& gw = t.gradref(w.id);
    Tensor& gb = t.gradref(b.id);
    for (int bi = 0; bi < B; ++bi)
      for (int r = 0; r < R; ++r)
        for (int k = 0; k < K; ++k) {
          const double gv = g.at(bi, r, k);
          if (gv == 0.0) continue;
          gb.at(r, k) += gv;
          for (int j = 0; j < c; ++j) {
            gx.at(bi, r, j) += gv * vw.at(r, k, j);
            gw.at(r, k, j) += gv * vx.at(bi, r, j);
          }
        }
  });
}

// --- entropy masking -----------------------------------------------------

Var Tape::entropy_norm(Var p) {
  const Tensor& vp = val(p);
  check_rank(vp, 4, "entropy_norm");
  const int B = vp.dim(0), N = vp.dim(1), h = vp.dim(2), w = vp.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const double emax = std::log(static_cast<double>(N));
  Tensor out({B, h, w});
#pragma omp parallel for schedule(static)
  for (std::int64_t bg = 0; bg < static_cast<std::int64_t>(B) * hw; ++bg) {
    const std::int64_t bi = bg / hw, g = bg % hw;
    const double* pp = vp.data() + bi * N * hw;
    double acc = 0.0;
    for (int i = 0; i < N; ++i) {
      const double pi = pp[i * hw + g];
      if (pi > 0.0) acc -= pi * std::log(pi);
    }
    out[bg] = acc / emax;
  }
  return push(std::move(out), {p.id}, [p, B, N, hw, emax](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    const Tensor& vp = t.val(p);
    Tensor& gp = t.gradref(p.id);
#pragma omp parallel for schedule(static)
    for (std::int64_t bg = 0; bg < static_cast<std::int64_t>(B) * hw; ++bg) {
      const std::int64_t bi = bg / hw, pix = bg % hw;
      const double gv = g[bg];
      if (gv == 0.0) continue;
      const double* pp = vp.data() + bi * N * hw;
      double* gpp = gp.data() + bi * N * hw;
      for (int i = 0; i < N; ++i) {
        const double pi = pp[i * hw + pix];
        if (pi > 1e-300) gpp[i * hw + pix] += gv * (-(std::log(pi) + 1.0) / emax);
      }
    }
  });
}

Var Tape::threshold_keep(Var e, double tau) {
  const Tensor& ve = val(e);
  Tensor out(ve.shape());
  std::vector<unsigned char> keep(static_cast<std::size_t>(ve.numel()), 0);
  for (std::int64_t i = 0; i < ve.numel(); ++i) {
    if (ve[i] >= tau) {
      out[i] = ve[i];
      keep[static_cast<std::size_t>(i)] = 1;
    }
  }
  return push(std::move(out), {e.id}, [e, keep = std::move(keep)](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& ge = t.gradref(e.id);
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (keep[static_cast<std::size_t>(i)]) ge[i] += g[i];
  });
}

Var Tape::median_threshold_keep(Var e) {
  const Tensor& ve = val(e);
  check_rank(ve, 3, "median_threshold_keep");
  const int B = ve.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(ve.dim(1)) * ve.dim(2);
  Tensor out(ve.shape());
  std::vector<unsigned char> keep(static_cast<std::size_t>(ve.numel()), 0);
  for (int bi = 0; bi < B; ++bi) {
    Tensor img({static_cast<int>(hw)});
    std::memcpy(img.data(), ve.data() + bi * hw, sizeof(double) * static_cast<std::size_t>(hw));
    const double med = segmap::median_of(img);
    for (std::int64_t g = 0; g < hw; ++g) {
      const std::int64_t i = bi * hw + g;
      if (ve[i] >= med) {
        out[i] = ve[i];
        keep[static_cast<std::size_t>(i)] = 1;
      }
    }
  }
  return push(std::move(out), {e.id}, [e, keep = std::move(keep)](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& ge = t.gradref(e.id);
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (keep[static_cast<std::size_t>(i)]) ge[i] += g[i];
  });
}

// --- pooling / descriptors ------------------------------------------------

namespace {

struct PoolDims {
  int B, c, N, h, w;
};

PoolDims pool_dims(const Tensor& f, const Tensor& p) {
  if (f.rank() != 4 || p.rank() != 4 || f.dim(0) != p.dim(0) || f.dim(2) != p.dim(2) ||
      f.dim(3) != p.dim(3))
    throw std::invalid_argument("region_pool: F and P shapes incompatible");
  return {f.dim(0), f.dim(1), p.dim(1), f.dim(2), f.dim(3)};
}

}  // namespace

Var Tape::region_pool(Var f, Var p) {
  const PoolDims d = pool_dims(val(f), val(p));
  Tensor out({d.B, d.N, d.c});
  kernels::region_pool_forward(val(f).data(), val(p).data(), nullptr, out.data(), d.B, d.c, d.N,
                               d.h, d.w);
  return push(std::move(out), {f.id, p.id}, [f, p, d](Tape& t, int self) {
    kernels::region_pool_backward(t.val(f).data(), t.val(p).data(), nullptr,
                                  t.gradref(self).data(), t.gradref(f.id).data(),
                                  t.gradref(p.id).data(), nullptr, d.B, d.c, d.N, d.h, d.w);
  });
}

Var Tape::region_pool(Var f, Var p, Var weight) {
  const PoolDims d = pool_dims(val(f), val(p));
  const Tensor& vw = val(weight);
  if (vw.rank() != 3 || vw.dim(0) != d.B || vw.dim(1) != d.h || vw.dim(2) != d.w)
    throw std::invalid_argument("region_pool: weight shape incompatible");
  Tensor out({d.B, d.N, d.c});
  kernels::region_pool_forward(val(f).data(), val(p).data(), vw.data(), out.data(), d.B, d.c,
                               d.N, d.h, d.w);
  return push(std::move(out), {f.id, p.id, weight.id}, [f, p, weight, d](Tape& t, int self) {
    kernels::region_pool_backward(t.val(f).data(), t.val(p).data(), t.val(weight).data(),
                                  t.gradref(self).data(), t.gradref(f.id).data(),
                                  t.gradref(p.id).data(), t.gradref(weight.id).data(), d.B, d.c,
                                  d.N, d.h, d.w);
  });
}

Var Tape::region_mass(Var p) {
  const Tensor& vp = val(p);
  check_rank(vp, 4, "region_mass");
  const int B = vp.dim(0), N = vp.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(vp.dim(2)) * vp.dim(3);
  Tensor out({B, N});
  for (int bi = 0; bi < B; ++bi)
    for (int i = 0; i < N; ++i) {
      const double* plane = vp.data() + (static_cast<std::int64_t>(bi) * N + i) * hw;
      double acc = 0.0;
      for (std::int64_t g = 0; g < hw; ++g) acc += plane[g];
      out.at(bi, i) = acc;
    }
  return push(std::move(out), {p.id}, [p, B, N, hw](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& gp = t.gradref(p.id);
    for (int bi = 0; bi < B; ++bi)
      for (int i = 0; i < N; ++i) {
        const double gv = g.at(bi, i);
        if (gv == 0.0) continue;
        double* plane = gp.data() + (static_cast<std::int64_t>(bi) * N + i) * hw;
        for (std::int64_t pix = 0; pix < hw; ++pix) plane[pix] += gv;
      }
  });
}

Var Tape::grid_sum(Var m) {
  const Tensor& vm = val(m);
  check_rank(vm, 3, "grid_sum");
  const int B = vm.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(vm.dim(1)) * vm.dim(2);
  Tensor out({B});
  for (int bi = 0; bi < B; ++bi) {
    double acc = 0.0;
    for (std::int64_t g = 0; g < hw; ++g) acc += vm[bi * hw + g];
    out[bi] = acc;
  }
  return push(std::move(out), {m.id}, [m, B, hw](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& gm = t.gradref(m.id);
    for (int bi = 0; bi < B; ++bi) {
      const double gv = g[bi];
      if (gv == 0.0) continue;
      for (std::int64_t pix = 0; pix < hw; ++pix) gm[bi * hw + pix] += gv;
    }
  });
}

Var Tape::masked_pool(Var f, Var m) {
  const Tensor& vf = val(f);
  const Tensor& vm = val(m);
  check_rank(vf, 4, "masked_pool");
  check_rank(vm, 3, "masked_pool");
  const int B = vf.dim(0), c = vf.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(vf.dim(2)) * vf.dim(3);
  if (vm.dim(0) != B || static_cast<std::int64_t>(vm.dim(1)) * vm.dim(2) != hw)
    throw std::invalid_argument("masked_pool: shape mismatch");
  Tensor out({B, c});
  for (int bi = 0; bi < B; ++bi)
    for (int k = 0; k < c; ++k) {
      const double* plane = vf.data() + (static_cast<std::int64_t>(bi) * c + k) * hw;
      const double* mask = vm.data() + bi * hw;
      double acc = 0.0;
      for (std::int64_t g = 0; g < hw; ++g) acc += mask[g] * plane[g];
      out.at(bi, k) = acc;
    }
  return push(std::move(out), {f.id, m.id}, [f, m, B, c, hw](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    const Tensor& vf = t.val(f);
    const Tensor& vm = t.val(m);
    Tensor& gf = t.gradref(f.id);
    Tensor& gm = t.gradref(m.id);
    for (int bi = 0; bi < B; ++bi) {
      for (int k = 0; k < c; ++k) {
        const double gv = g.at(bi, k);
        if (gv == 0.0) continue;
        double* gplane = gf.data() + (static_cast<std::int64_t>(bi) * c + k) * hw;
        const double* mask = vm.data() + bi * hw;
        for (std::int64_t pix = 0; pix < hw; ++pix) gplane[pix] += gv * mask[pix];
      }
      double* gmask = gm.data() + bi * hw;
      for (std::int64_t pix = 0; pix < hw; ++pix) {
        double acc = 0.0;
        for (int k = 0; k < c; ++k)
          acc += g.at(bi, k) * vf[(static_cast<std::int64_t>(bi) * c + k) * hw + pix];
        gmask[pix] += acc;
      }
    }
  });
}

Var Tape::div_mass(Var x, Var s, double eps) {
  const Tensor& vx = val(x);
  const Tensor& vs = val(s);
  check_rank(vx, 2, "div_mass");
  const int B = vx.dim(0), c = vx.dim(1);
  if (vs.numel() != B) throw std::invalid_argument("div_mass: mass vector mismatch");
  Tensor out({B, c});
  for (int bi = 0; bi < B; ++bi) {
    const double mass = vs[bi];
    if (mass < eps) continue;  // zero row
    for (int k = 0; k < c; ++k) out.at(bi, k) = vx.at(bi, k) / mass;
  }
  return push(std::move(out), {x.id, s.id}, [x, s, B, c, eps](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    const Tensor& vx = t.val(x);
    const Tensor& vs = t.val(s);
    Tensor& gx = t.gradref(x.id);
    Tensor& gs = t.gradref(s.id);
    for (int bi = 0; bi < B; ++bi) {
      const double mass = vs[bi];
      if (mass < eps) continue;
      double sacc = 0.0;
      for (int k = 0; k < c; ++k) {
        const double gv = g.at(bi, k);
        gx.at(bi, k) += gv / mass;
        sacc += gv * vx.at(bi, k);
      }
      gs[bi] -= sacc / (mass * mass);
    }
  });
}

Var Tape::score_gate(Var s, double eps) {
  const Tensor& vs = val(s);
  Tensor out(vs.shape());
  for (std::int64_t i = 0; i < vs.numel(); ++i) out[i] = (vs[i] >= eps) ? vs[i] : 0.0;
  return push(std::move(out), {s.id}, [s, eps](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    const Tensor& vs = t.val(s);
    Tensor& gs = t.gradref(s.id);
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (vs[i] >= eps) gs[i] += g[i];
  });
}

Var Tape::unit_rows(Var x, double eps) {
  const Tensor& vx = val(x);
  if (vx.rank() < 2) throw std::invalid_argument("unit_rows: rank must be >= 2");
  const int c = vx.dim(vx.rank() - 1);
  const std::int64_t rows = vx.numel() / c;
  Tensor out(vx.shape());
  std::vector<double> norms(static_cast<std::size_t>(rows), 0.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xin = vx.data() + r * c;
    double n2 = 0.0;
    for (int k = 0; k < c; ++k) n2 += xin[k] * xin[k];
    const double n = std::sqrt(n2);
    norms[static_cast<std::size_t>(r)] = n;
    if (n < eps) continue;
    double* o = out.data() + r * c;
    for (int k = 0; k < c; ++k) o[k] = xin[k] / n;
  }
  return push(std::move(out), {x.id},
              [x, c, rows, eps, norms = std::move(norms)](Tape& t, int self) {
                const Tensor& g = t.gradref(self);
                const Tensor& y = t.nodes_[static_cast<std::size_t>(self)].value;
                Tensor& gx = t.gradref(x.id);
                for (std::int64_t r = 0; r < rows; ++r) {
                  const double n = norms[static_cast<std::size_t>(r)];
                  if (n < eps) continue;
                  const double* gr = g.data() + r * c;
                  const double* yr = y.data() + r * c;
                  double dot = 0.0;
                  for (int k = 0; k < c; ++k) dot += gr[k] * yr[k];
                  double* gxr = gx.data() + r * c;
                  for (int k = 0; k < c; ++k) gxr[k] += (gr[k] - dot * yr[k]) / n;
                }
              });
}

Var Tape::drop_last(Var x) {
  const Tensor& vx = val(x);
  if (vx.rank() == 3) {
    const int B = vx.dim(0), N = vx.dim(1), c = vx.dim(2);
    Tensor out({B, N - 1, c});
    for (int bi = 0; bi < B; ++bi)
      std::memcpy(out.data() + static_cast<std::int64_t>(bi) * (N - 1) * c,
                  vx.data() + static_cast<std::int64_t>(bi) * N * c,
                  sizeof(double) * static_cast<std::size_t>(N - 1) * c);
    return push(std::move(out), {x.id}, [x, B, N, c](Tape& t, int self) {
      const Tensor& g = t.gradref(self);
      Tensor& gx = t.gradref(x.id);
      for (int bi = 0; bi < B; ++bi)
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(N - 1) * c; ++i)
          gx[static_cast<std::int64_t>(bi) * N * c + i] +=
              g[static_cast<std::int64_t>(bi) * (N - 1) * c + i];
    });
  }
  if (vx.rank() == 2) {
    const int B = vx.dim(0), N = vx.dim(1);
    Tensor out({B, N - 1});
    for (int bi = 0; bi < B; ++bi)
      for (int i = 0; i < N - 1; ++i) out.at(bi, i) = vx.at(bi, i);
    return push(std::move(out), {x.id}, [x, B, N](Tape& t, int self) {
      const Tensor& g = t.gradref(self);
      Tensor& gx = t.gradref(x.id);
      for (int bi = 0; bi < B; ++bi)
        for (int i = 0; i < N - 1; ++i) gx.at(bi, i) += g.at(bi, i);
    });
  }
  throw std::invalid_argument("drop_last: rank must be 2 or 3");
}

Var Tape::mean_spatial(Var f) {
  const Tensor& vf = val(f);
  check_rank(vf, 4, "mean_spatial");
  const int B = vf.dim(0), c = vf.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(vf.dim(2)) * vf.dim(3);
  Tensor out({B, c});
  for (int bi = 0; bi < B; ++bi)
    for (int k = 0; k < c; ++k) {
      const double* plane = vf.data() + (static_cast<std::int64_t>(bi) * c + k) * hw;
      double acc = 0.0;
      for (std::int64_t g = 0; g < hw; ++g) acc += plane[g];
      out.at(bi, k) = acc / static_cast<double>(hw);
    }
  return push(std::move(out), {f.id}, [f, B, c, hw](Tape& t, int self) {
    const Tensor& g = t.gradref(self);
    Tensor& gf = t.gradref(f.id);
    for (int bi = 0; bi < B; ++bi)
      for (int k = 0; k < c; ++k) {
        const double gv = g.at(bi, k) / static_cast<double>(hw);
        if (gv == 0.0) continue;
        double* plane = gf.data() + (static_cast<std::int64_t>(bi) * c + k) * hw;
        for (std::int64_t pix = 0; pix < hw; ++pix) plane[pix] += gv;
      }
  });
}

// --- distances & losses ----------------------------------------------------

Var Tape::pairwise_extended(Var ft, Var s, Var fun, Var sun, double eps, bool use_un) {
  const Tensor& vft = val(ft);
  const Tensor& vs = val(s);
  check_rank(vft, 3, "pairwise_extended");
  const int B = vft.dim(0), R = vft.dim(1), c = vft.dim(2);
  if (vs.dim(0) != B || vs.dim(1) != R)
    throw std::invalid_argument("pairwise_extended: score shape mismatch");
  const double* fun_ptr = nullptr;
  const double* sun_ptr = nullptr;
  if (use_un) {
    fun_ptr = val(fun).data();
    sun_ptr = val(sun).data();
    if (val(fun).dim(0) != B || val(sun).numel() != B)
      throw std::invalid_argument("pairwise_extended: unconfident shapes mismatch");
  }
  Tensor out({B, B});
  std::vector<unsigned char> missing(static_cast<std::size_t>(B) * B, 0);
  kernels::pairwise_extended_forward(vft.data(), vs.data(), fun_ptr, sun_ptr, out.data(),
                                     missing.data(), B, R, c, eps, use_un);
  // Fill undefined pairs with the largest defined distance; they stay
  // constant under backward.
  double maxd = 0.0;
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < B; ++j)
      if (!missing[static_cast<std::size_t>(i) * B + j]) maxd = std::max(maxd, out.at(i, j));
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < B; ++j)
      if (missing[static_cast<std::size_t>(i) * B + j]) out.at(i, j) = maxd;

  std::vector<int> parents = {ft.id, s.id};
  if (use_un) {
    parents.push_back(fun.id);
    parents.push_back(sun.id);
  }
  return push(std::move(out), std::move(parents),
              [ft, s, fun, sun, B, R, c, eps, use_un, missing = std::move(missing)](Tape& t,
                                                                                    int self) {
                const Tensor& g = t.gradref(self);
                const Tensor& d = t.nodes_[static_cast<std::size_t>(self)].value;
                const Tensor& vft = t.val(ft);
                const Tensor& vs = t.val(s);
                Tensor& gft = t.gradref(ft.id);
                Tensor& gs = t.gradref(s.id);
                const double* vfun = use_un ? t.val(fun).data() : nullptr;
                const double* vsun = use_un ? t.val(sun).data() : nullptr;
                double* gfun = use_un ? t.gradref(fun.id).data() : nullptr;
                double* gsun = use_un ? t.gradref(sun.id).data() : nullptr;
                for (int i = 0; i < B; ++i) {
                  for (int j = i + 1; j < B; ++j) {
                    if (missing[static_cast<std::size_t>(i) * B + j]) continue;
                    const double gv = g.at(i, j) + g.at(j, i);
                    if (gv == 0.0) continue;
                    const double dij = d.at(i, j);
                    // Recompute the denominator.
                    double den = 0.0;
                    for (int r = 0; r < R; ++r) {
                      const double ss = vs.at(i, r) * vs.at(j, r);
                      den += ss;
                    }
                    if (use_un) den += vsun[i] * vsun[j];
                    for (int r = 0; r < R; ++r) {
                      const double si = vs.at(i, r), sj = vs.at(j, r);
                      const double ss = si * sj;
                      if (ss == 0.0 && si == 0.0 && sj == 0.0) continue;
                      const double* fi = vft.data() + (static_cast<std::int64_t>(i) * R + r) * c;
                      const double* fj = vft.data() + (static_cast<std::int64_t>(j) * R + r) * c;
                      const double dist = euclid(fi, fj, c);
                      gs.at(i, r) += gv * sj * (dist - dij) / den;
                      gs.at(j, r) += gv * si * (dist - dij) / den;
                      if (ss != 0.0 && dist > 0.0) {
                        const double coef = gv * ss / (den * dist);
                        double* gi = gft.data() + (static_cast<std::int64_t>(i) * R + r) * c;
                        double* gj = gft.data() + (static_cast<std::int64_t>(j) * R + r) * c;
                        for (int k = 0; k < c; ++k) {
                          const double diff = fi[k] - fj[k];
                          gi[k] += coef * diff;
                          gj[k] -= coef * diff;
                        }
                      }
                    }
                    if (use_un) {
                      const double si = vsun[i], sj = vsun[j];
                      const double ss = si * sj;
                      const double* fi = vfun + static_cast<std::int64_t>(i) * c;
                      const double* fj = vfun + static_cast<std::int64_t>(j) * c;
                      const double dist = euclid(fi, fj, c);
                      gsun[i] += gv * sj * (dist - dij) / den;
                      gsun[j] += gv * si * (dist - dij) / den;
                      if (ss != 0.0 && dist > 0.0) {
                        const double coef = gv * ss / (den * dist);
                        double* gi = gfun + static_cast<std::int64_t>(i) * c;
                        double* gj = gfun + static_cast<std::int64_t>(j) * c;
                        for (int k = 0; k < c; ++k) {
                          const double diff = fi[k] - fj[k];
                          gi[k] += coef * diff;
                          gj[k] -= coef * diff;
                        }
                      }
                    }
                  }
                }
              });
}

Var Tape::batch_hard(Var d, const std::vector<int>& labels, double margin) {
  const Tensor& vd = val(d);
  check_rank(vd, 2, "batch_hard");
  const int B = vd.dim(0);
  if (vd.dim(1) != B || static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("batch_hard: matrix/label mismatch");
  // P x K precondition: every identity at least twice, at least two ids.
  for (int a = 0; a < B; ++a) {
    int same = 0, diff = 0;
    for (int j = 0; j < B; ++j) {
      if (j == a) continue;
      (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)] ? same : diff)++;
    }
    if (same == 0 || diff == 0)
      throw std::invalid_argument("batch_hard: each identity needs >= 2 samples and >= 2 ids");
  }
  struct Pick {
    int pos, neg;
    bool active;
  };
  std::vector<Pick> picks(static_cast<std::size_t>(B));
  double loss = 0.0;
  for (int a = 0; a < B; ++a) {
    int pos = -1, neg = -1;
    for (int j = 0; j < B; ++j) {
      if (j == a) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (pos < 0 || vd.at(a, j) > vd.at(a, pos)) pos = j;
      } else {
        if (neg < 0 || vd.at(a, j) < vd.at(a, neg)) neg = j;
      }
    }
    const double term = vd.at(a, pos) - vd.at(a, neg) + margin;
    const bool active = term > 0.0;
    picks[static_cast<std::size_t>(a)] = {pos, neg, active};
    if (active) loss += term;
  }
  loss /= B;
  return push(Tensor::scalar(loss), {d.id}, [d, B, picks = std::move(picks)](Tape& t, int self) {
    const double gv = t.gradref(self)[0];
    if (gv == 0.0) return;
    Tensor& gd = t.gradref(d.id);
    for (int a = 0; a < B; ++a) {
      const auto& p = picks[static_cast<std::size_t>(a)];
      if (!p.active) continue;
      gd.at(a, p.pos) += gv / B;
      gd.at(a, p.neg) -= gv / B;
    }
  });
}

Var Tape::weighted_ce_rows(Var logits, Var w, const std::vector<int>& labels) {
  const Tensor& vl = val(logits);
  const Tensor& vw = val(w);
  check_rank(vl, 3, "weighted_ce_rows");
  const int B = vl.dim(0), R = vl.dim(1), K = vl.dim(2);
  if (vw.dim(0) != B || vw.dim(1) != R || static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("weighted_ce_rows: shape mismatch");
  for (int bi = 0; bi < B; ++bi)
    if (labels[static_cast<std::size_t>(bi)] < 0 || labels[static_cast<std::size_t>(bi)] >= K)
      throw std::invalid_argument("weighted_ce_rows: label out of range");
  double loss = 0.0;
  for (int bi = 0; bi < B; ++bi)
    for (int r = 0; r < R; ++r) {
      const double* row = vl.data() + (static_cast<std::int64_t>(bi) * R + r) * K;
      double m = row[0];
      for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
      double sum = 0.0;
      for (int k = 0; k < K; ++k) sum += std::exp(row[k] - m);
      const double lse = m + std::log(sum);
      loss += vw.at(bi, r) * (lse - row[labels[static_cast<std::size_t>(bi)]]);
    }
  loss /= B;
  return push(Tensor::scalar(loss), {logits.id, w.id},
              [logits, w, B, R, K, labels](Tape& t, int self) {
                const double gv = t.gradref(self)[0];
                if (gv == 0.0) return;
                const Tensor& vl = t.val(logits);
                const Tensor& vw = t.val(w);
                Tensor& gl = t.gradref(logits.id);
                Tensor& gw = t.gradref(w.id);
                for (int bi = 0; bi < B; ++bi)
                  for (int r = 0; r < R; ++r) {
                    const double* row = vl.data() + (static_cast<std::int64_t>(bi) * R + r) * K;
                    double m = row[0];
                    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
                    double sum = 0.0;
                    for (int k = 0; k < K; ++k) sum += std::exp(row[k] - m);
                    const double lse = m + std::log(sum);
                    const int y = labels[static_cast<std::size_t>(bi)];
                    gw.at(bi, r) += gv * (lse - row[y]) / B;
                    const double wt = gv * vw.at(bi, r) / B;
                    if (wt == 0.0) continue;
                    double* grow = gl.data() + (static_cast<std::int64_t>(bi) * R + r) * K;
                    for (int k = 0; k < K; ++k) {
                      const double soft = std::exp(row[k] - m) / sum;
                      grow[k] += wt * (soft - (k == y ? 1.0 : 0.0));
                    }
                  }
              });
}

Var Tape::parsing_ce(Var p, const std::vector<int>& labels) {
  const Tensor& vp = val(p);
  check_rank(vp, 4, "parsing_ce");
  const int B = vp.dim(0), N = vp.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(vp.dim(2)) * vp.dim(3);
  if (static_cast<std::int64_t>(labels.size()) != B * hw)
    throw std::invalid_argument("parsing_ce: label count mismatch");
  for (int lab : labels)
    if (lab < 1 || lab > N) throw std::invalid_argument("parsing_ce: label outside [1, N]");
  const double denom = static_cast<double>(B) * static_cast<double>(hw);
  double loss = 0.0;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(B) * hw; ++i) {
    const std::int64_t bi = i / hw, g = i % hw;
    const int lab = labels[static_cast<std::size_t>(i)] - 1;
    const double prob = vp[(bi * N + lab) * hw + g];
    loss -= std::log(std::max(prob, 1e-300));
  }
  loss /= denom;
  return push(Tensor::scalar(loss), {p.id}, [p, B, N, hw, denom, labels](Tape& t, int self) {
    const double gv = t.gradref(self)[0];
    if (gv == 0.0) return;
    const Tensor& vp = t.val(p);
    Tensor& gp = t.gradref(p.id);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(B) * hw; ++i) {
      const std::int64_t bi = i / hw, g = i % hw;
      const int lab = labels[static_cast<std::size_t>(i)] - 1;
      const double prob = std::max(vp[(bi * N + lab) * hw + g], 1e-300);
      gp[(bi * N + lab) * hw + g] -= gv / (denom * prob);
    }
  });
}

}  // namespace reid::ad
