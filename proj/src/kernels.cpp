#include "reid/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace reid::kernels {

namespace {

inline int out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline double conv_one_output(const double* x, const double* w, const double* b,
                              int Cin, int H, int W, int kh, int kw, int stride, int pad,
                              int bidx, int co, int oy, int ox) {
  const double* xb = x + static_cast<std::int64_t>(bidx) * Cin * H * W;
  const double* wc = w + static_cast<std::int64_t>(co) * Cin * kh * kw;
  double acc = b ? b[co] : 0.0;
  const int iy0 = oy * stride - pad;
  const int ix0 = ox * stride - pad;
  for (int ci = 0; ci < Cin; ++ci) {
    const double* xp = xb + static_cast<std::int64_t>(ci) * H * W;
    const double* wp = wc + static_cast<std::int64_t>(ci) * kh * kw;
    for (int ky = 0; ky < kh; ++ky) {
      const int iy = iy0 + ky;
      if (iy < 0 || iy >= H) continue;
      for (int kx = 0; kx < kw; ++kx) {
        const int ix = ix0 + kx;
        if (ix < 0 || ix >= W) continue;
        acc += xp[iy * W + ix] * wp[ky * kw + kx];
      }
    }
  }
  return acc;
}

}  // namespace

void conv2d_forward_serial(const double* x, const double* w, const double* b, double* y,
                           int B, int Cin, int H, int W, int Cout, int kh, int kw,
                           int stride, int pad) {
  const int Ho = out_extent(H, kh, stride, pad);
  const int Wo = out_extent(W, kw, stride, pad);
  for (int bi = 0; bi < B; ++bi)
    for (int co = 0; co < Cout; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox)
          y[((static_cast<std::int64_t>(bi) * Cout + co) * Ho + oy) * Wo + ox] =
              conv_one_output(x, w, b, Cin, H, W, kh, kw, stride, pad, bi, co, oy, ox);
}

void conv2d_forward(const double* x, const double* w, const double* b, double* y,
                    int B, int Cin, int H, int W, int Cout, int kh, int kw,
                    int stride, int pad) {
  const int Ho = out_extent(H, kh, stride, pad);
  const int Wo = out_extent(W, kw, stride, pad);
  const std::int64_t total = static_cast<std::int64_t>(B) * Cout * Ho;
#pragma omp parallel for schedule(static)
  for (std::int64_t row = 0; row < total; ++row) {
    const int oy = static_cast<int>(row % Ho);
    const int co = static_cast<int>((row / Ho) % Cout);
    const int bi = static_cast<int>(row / (static_cast<std::int64_t>(Ho) * Cout));
    double* yp = y + row * Wo;
    for (int ox = 0; ox < Wo; ++ox)
      yp[ox] = conv_one_output(x, w, b, Cin, H, W, kh, kw, stride, pad, bi, co, oy, ox);
  }
}

namespace {

// Gather-form gradient w.r.t. one input element: sum over the output
// positions whose window covers it.
inline double conv_input_grad(const double* w, const double* gy,
                              int Cin, int Cout, int kh, int kw, int stride, int pad,
                              int Ho, int Wo, int bidx, int ci, int iy, int ix) {
  const double* gyb = gy + static_cast<std::int64_t>(bidx) * Cout * Ho * Wo;
  double acc = 0.0;
  for (int co = 0; co < Cout; ++co) {
    const double* gyp = gyb + static_cast<std::int64_t>(co) * Ho * Wo;
    const double* wp = w + (static_cast<std::int64_t>(co) * Cin + ci) * kh * kw;
    for (int ky = 0; ky < kh; ++ky) {
      const int num = iy + pad - ky;
      if (num < 0 || num % stride != 0) continue;
      const int oy = num / stride;
      if (oy >= Ho) continue;
      for (int kx = 0; kx < kw; ++kx) {
        const int numx = ix + pad - kx;
        if (numx < 0 || numx % stride != 0) continue;
        const int ox = numx / stride;
        if (ox >= Wo) continue;
        acc += gyp[oy * Wo + ox] * wp[ky * kw + kx];
      }
    }
  }
  return acc;
}

inline double conv_weight_grad(const double* x, const double* gy,
                               int Cin, int Cout, int H, int W,
                               int stride, int pad, int Ho, int Wo, int B,
                               int co, int ci, int ky, int kx) {
  double acc = 0.0;
  for (int bi = 0; bi < B; ++bi) {
    const double* xp = x + (static_cast<std::int64_t>(bi) * Cin + ci) * H * W;
    const double* gyp = gy + (static_cast<std::int64_t>(bi) * Cout + co) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const int iy = oy * stride - pad + ky;
      if (iy < 0 || iy >= H) continue;
      for (int ox = 0; ox < Wo; ++ox) {
        const int ix = ox * stride - pad + kx;
        if (ix < 0 || ix >= W) continue;
        acc += gyp[oy * Wo + ox] * xp[iy * W + ix];
      }
    }
  }
  return acc;
}

}  // namespace

void conv2d_backward_serial(const double* x, const double* w, const double* gy,
                            double* gx, double* gw, double* gb,
                            int B, int Cin, int H, int W, int Cout, int kh, int kw,
                            int stride, int pad) {
  const int Ho = out_extent(H, kh, stride, pad);
  const int Wo = out_extent(W, kw, stride, pad);
  if (gx) {
    for (int bi = 0; bi < B; ++bi)
      for (int ci = 0; ci < Cin; ++ci)
        for (int iy = 0; iy < H; ++iy)
          for (int ix = 0; ix < W; ++ix)
            gx[((static_cast<std::int64_t>(bi) * Cin + ci) * H + iy) * W + ix] +=
                conv_input_grad(w, gy, Cin, Cout, kh, kw, stride, pad, Ho, Wo, bi, ci, iy, ix);
  }
  if (gw) {
    for (int co = 0; co < Cout; ++co)
      for (int ci = 0; ci < Cin; ++ci)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx)
            gw[((static_cast<std::int64_t>(co) * Cin + ci) * kh + ky) * kw + kx] +=
                conv_weight_grad(x, gy, Cin, Cout, H, W, stride, pad, Ho, Wo, B, co, ci, ky,
                                 kx);
  }
  if (gb) {
    for (int co = 0; co < Cout; ++co) {
      double acc = 0.0;
      for (int bi = 0; bi < B; ++bi) {
        const double* gyp = gy + (static_cast<std::int64_t>(bi) * Cout + co) * Ho * Wo;
        for (int i = 0; i < Ho * Wo; ++i) acc += gyp[i];
      }
      gb[co] += acc;
    }
  }
}

void conv2d_backward(const double* x, const double* w, const double* gy,
                     double* gx, double* gw, double* gb,
                     int B, int Cin, int H, int W, int Cout, int kh, int kw,
                     int stride, int pad) {
  const int Ho = out_extent(H, kh, stride, pad);
  const int Wo = out_extent(W, kw, stride, pad);
  if (gx) {
    const std::int64_t total = static_cast<std::int64_t>(B) * Cin * H;
#pragma omp parallel for schedule(static)
    for (std::int64_t row = 0; row < total; ++row) {
      const int iy = static_cast<int>(row % H);
      const int ci = static_cast<int>((row / H) % Cin);
      const int bi = static_cast<int>(row / (static_cast<std::int64_t>(H) * Cin));
      double* gxp = gx + row * W;
      for (int ix = 0; ix < W; ++ix)
        gxp[ix] += conv_input_grad(w, gy, Cin, Cout, kh, kw, stride, pad, Ho, Wo, bi, ci, iy, ix);
    }
  }
  if (gw) {
    const std::int64_t total = static_cast<std::int64_t>(Cout) * Cin * kh * kw;
#pragma omp parallel for schedule(static)
    for (std::int64_t wi = 0; wi < total; ++wi) {
      const int kx = static_cast<int>(wi % kw);
      const int ky = static_cast<int>((wi / kw) % kh);
      const int ci = static_cast<int>((wi / (static_cast<std::int64_t>(kw) * kh)) % Cin);
      const int co = static_cast<int>(wi / (static_cast<std::int64_t>(kw) * kh * Cin));
      gw[wi] += conv_weight_grad(x, gy, Cin, Cout, H, W, stride, pad, Ho, Wo, B, co, ci, ky, kx);
    }
  }
  if (gb) {
#pragma omp parallel for schedule(static)
    for (int co = 0; co < Cout; ++co) {
      double acc = 0.0;
      for (int bi = 0; bi < B; ++bi) {
        const double* gyp = gy + (static_cast<std::int64_t>(bi) * Cout + co) * Ho * Wo;
        for (int i = 0; i < Ho * Wo; ++i) acc += gyp[i];
      }
      gb[co] += acc;
    }
  }
}

namespace {

inline double region_pool_one(const double* F, const double* P, const double* weight,
                              int c, int N, int hw, int bidx, int i, int k) {
  const double* Fp = F + (static_cast<std::int64_t>(bidx) * c + k) * hw;
  const double* Pp = P + (static_cast<std::int64_t>(bidx) * N + i) * hw;
  double acc = 0.0;
  if (weight) {
    const double* Wp = weight + static_cast<std::int64_t>(bidx) * hw;
    for (int g = 0; g < hw; ++g) acc += Wp[g] * Pp[g] * Fp[g];
  } else {
    for (int g = 0; g < hw; ++g) acc += Pp[g] * Fp[g];
  }
  return acc;
}

}  // namespace

void region_pool_forward_serial(const double* F, const double* P, const double* weight,
                                double* out, int B, int c, int N, int h, int w) {
  const int hw = h * w;
  for (int bi = 0; bi < B; ++bi)
    for (int i = 0; i < N; ++i)
      for (int k = 0; k < c; ++k)
        out[(static_cast<std::int64_t>(bi) * N + i) * c + k] =
            region_pool_one(F, P, weight, c, N, hw, bi, i, k);
}

void region_pool_forward(const double* F, const double* P, const double* weight,
                         double* out, int B, int c, int N, int h, int w) {
  const int hw = h * w;
  const std::int64_t total = static_cast<std::int64_t>(B) * N * c;
#pragma omp parallel for schedule(static)
  for (std::int64_t o = 0; o < total; ++o) {
    const int k = static_cast<int>(o % c);
    const int i = static_cast<int>((o / c) % N);
    const int bi = static_cast<int>(o / (static_cast<std::int64_t>(c) * N));
    out[o] = region_pool_one(F, P, weight, c, N, hw, bi, i, k);
  }
}

void region_pool_backward(const double* F, const double* P, const double* weight,
                          const double* gout, double* gF, double* gP, double* gweight,
                          int B, int c, int N, int h, int w) {
  const int hw = h * w;
  if (gF) {
    const std::int64_t total = static_cast<std::int64_t>(B) * c * hw;
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < total; ++o) {
      const int g = static_cast<int>(o % hw);
      const int k = static_cast<int>((o / hw) % c);
      const int bi = static_cast<int>(o / (static_cast<std::int64_t>(hw) * c));
      const double wg = weight ? weight[static_cast<std::int64_t>(bi) * hw + g] : 1.0;
      double acc = 0.0;
      for (int i = 0; i < N; ++i)
        acc += P[(static_cast<std::int64_t>(bi) * N + i) * hw + g] *
               gout[(static_cast<std::int64_t>(bi) * N + i) * c + k];
      gF[o] += wg * acc;
    }
  }
  if (gP) {
    const std::int64_t total = static_cast<std::int64_t>(B) * N * hw;
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < total; ++o) {
      const int g = static_cast<int>(o % hw);
      const int i = static_cast<int>((o / hw) % N);
      const int bi = static_cast<int>(o / (static_cast<std::int64_t>(hw) * N));
      const double wg = weight ? weight[static_cast<std::int64_t>(bi) * hw + g] : 1.0;
      double acc = 0.0;
      for (int k = 0; k < c; ++k)
        acc += F[(static_cast<std::int64_t>(bi) * c + k) * hw + g] *
               gout[(static_cast<std::int64_t>(bi) * N + i) * c + k];
      gP[o] += wg * acc;
    }
  }
  if (gweight && weight) {
    const std::int64_t total = static_cast<std::int64_t>(B) * hw;
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < total; ++o) {
      const int g = static_cast<int>(o % hw);
      const int bi = static_cast<int>(o / hw);
      double acc = 0.0;
      for (int i = 0; i < N; ++i) {
        const double pig = P[(static_cast<std::int64_t>(bi) * N + i) * hw + g];
        double inner = 0.0;
        for (int k = 0; k < c; ++k)
          inner += F[(static_cast<std::int64_t>(bi) * c + k) * hw + g] *
                   gout[(static_cast<std::int64_t>(bi) * N + i) * c + k];
        acc += pig * inner;
      }
      gweight[o] += acc;
    }
  }
}

namespace {

inline double euclid(const double* a, const double* b, int c) {
  double s = 0.0;
  for (int k = 0; k < c; ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return std::sqrt(s);
}

inline void pairwise_one(const double* Ft, const double* S, const double* fun,
                         const double* Sun, double* d, unsigned char* missing,
                         int B, int R, int c, double eps, bool use_un, int i, int j) {
  double num = 0.0;
  double den = 0.0;
  for (int r = 0; r < R; ++r) {
    const double ss = S[static_cast<std::int64_t>(i) * R + r] *
                      S[static_cast<std::int64_t>(j) * R + r];
    if (ss == 0.0) continue;
    const double dist = euclid(Ft + (static_cast<std::int64_t>(i) * R + r) * c,
                               Ft + (static_cast<std::int64_t>(j) * R + r) * c, c);
    num += ss * dist;
    den += ss;
  }
  if (use_un) {
    const double ss = Sun[i] * Sun[j];
    if (ss != 0.0) {
      const double dist = euclid(fun + static_cast<std::int64_t>(i) * c,
                                 fun + static_cast<std::int64_t>(j) * c, c);
      num += ss * dist;
      den += ss;
    }
  }
  if (den < eps) {
    missing[static_cast<std::int64_t>(i) * B + j] = 1;
    missing[static_cast<std::int64_t>(j) * B + i] = 1;
    return;
  }
  const double v = num / den;
  d[static_cast<std::int64_t>(i) * B + j] = v;
  d[static_cast<std::int64_t>(j) * B + i] = v;
}

}  // namespace

void pairwise_extended_forward_serial(const double* Ft, const double* S, const double* fun,
                                      const double* Sun, double* d, unsigned char* missing,
                                      int B, int R, int c, double eps, bool use_un) {
  std::memset(d, 0, sizeof(double) * static_cast<std::size_t>(B) * B);
  std::memset(missing, 0, static_cast<std::size_t>(B) * B);
  for (int i = 0; i < B; ++i)
    for (int j = i + 1; j < B; ++j)
      pairwise_one(Ft, S, fun, Sun, d, missing, B, R, c, eps, use_un, i, j);
}

void pairwise_extended_forward(const double* Ft, const double* S, const double* fun,
                               const double* Sun, double* d, unsigned char* missing,
                               int B, int R, int c, double eps, bool use_un) {
  std::memset(d, 0, sizeof(double) * static_cast<std::size_t>(B) * B);
  std::memset(missing, 0, static_cast<std::size_t>(B) * B);
  const std::int64_t npairs = static_cast<std::int64_t>(B) * (B - 1) / 2;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < npairs; ++p) {
    // Unrank pair index p -> (i, j) with i < j.
    std::int64_t i = 0;
    std::int64_t rem = p;
    while (rem >= B - 1 - i) {
      rem -= B - 1 - i;
      ++i;
    }
    const std::int64_t j = i + 1 + rem;
    pairwise_one(Ft, S, fun, Sun, d, missing, B, R, c, eps, use_un,
                 static_cast<int>(i), static_cast<int>(j));
  }
}

void softmax_channels(const double* x, double* p, int B, int N, std::int64_t hw) {
#pragma omp parallel for schedule(static)
  for (std::int64_t bg = 0; bg < static_cast<std::int64_t>(B) * hw; ++bg) {
    const std::int64_t bi = bg / hw, g = bg % hw;
    const double* xin = x + bi * N * hw;
    double* pout = p + bi * N * hw;
    double m = xin[g];
    for (int i = 1; i < N; ++i) m = std::max(m, xin[i * hw + g]);
    double sum = 0.0;
    for (int i = 0; i < N; ++i) {
      const double e = std::exp(xin[i * hw + g] - m);
      pout[i * hw + g] = e;
      sum += e;
    }
    for (int i = 0; i < N; ++i) pout[i * hw + g] /= sum;
  }
}

void tanh_forward(const double* x, double* y, std::int64_t n) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

}  // namespace reid::kernels
