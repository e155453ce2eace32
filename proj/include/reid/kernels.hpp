#pragma once

#include <cstdint>

namespace reid::kernels {

// Hot inner loops, shared by the forward-only paths and the autodiff tape.
// Every kernel has an OpenMP variant (default entry point) and a `_serial`
// reference twin. The parallel variants split work across independent output
// elements and keep the per-element accumulation order identical to the
// serial code, so the two produce bit-identical results for any thread count.
// tests/test_kernels.cpp asserts that; tools/bench_kernels.cpp times both.

// 2-D convolution, zero padding.
//   x: [B, Cin, H, W]   w: [Cout, Cin, kh, kw]   b: [Cout]
//   y: [B, Cout, Ho, Wo] with Ho = (H + 2*pad - kh)/stride + 1, same for Wo.
void conv2d_forward(const double* x, const double* w, const double* b, double* y,
                    int B, int Cin, int H, int W, int Cout, int kh, int kw,
                    int stride, int pad);
void conv2d_forward_serial(const double* x, const double* w, const double* b, double* y,
                           int B, int Cin, int H, int W, int Cout, int kh, int kw,
                           int stride, int pad);

// Gradients of conv2d. Any of gx/gw/gb may be null to skip that output.
// Outputs are accumulated into (caller zero-initialises).
void conv2d_backward(const double* x, const double* w, const double* gy,
                     double* gx, double* gw, double* gb,
                     int B, int Cin, int H, int W, int Cout, int kh, int kw,
                     int stride, int pad);
void conv2d_backward_serial(const double* x, const double* w, const double* gy,
                            double* gx, double* gw, double* gb,
                            int B, int Cin, int H, int W, int Cout, int kh, int kw,
                            int stride, int pad);

// Probability-weighted pooling of pixel features into per-region sums.
//   F: [B, c, h, w]   P: [B, N, h, w]   weight: [B, h, w] or null
//   out[b, i, k] = sum_{y,x} weight[b,y,x] * P[b,i,y,x] * F[b,k,y,x]
void region_pool_forward(const double* F, const double* P, const double* weight,
                         double* out, int B, int c, int N, int h, int w);
void region_pool_forward_serial(const double* F, const double* P, const double* weight,
                                double* out, int B, int c, int N, int h, int w);

// Gradients of region_pool. gF/gP/gweight may be null; accumulated into.
void region_pool_backward(const double* F, const double* P, const double* weight,
                          const double* gout, double* gF, double* gP, double* gweight,
                          int B, int c, int N, int h, int w);

// Visibility/confidence weighted distance matrix between descriptor batches.
//   Ft:  [B, R, c] per-region features (rows unit length or zero)
//   S:   [B, R]    region scores
//   fun: [B, c]    extra pooled feature (rows unit length or zero); null if !use_un
//   Sun: [B]       its score; null if !use_un
// Writes d[B, B] (symmetric, zero diagonal) and missing[B*B] flags set where
// the score denominator falls below eps (those d entries are left 0).
void pairwise_extended_forward(const double* Ft, const double* S, const double* fun,
                               const double* Sun, double* d, unsigned char* missing,
                               int B, int R, int c, double eps, bool use_un);
void pairwise_extended_forward_serial(const double* Ft, const double* S, const double* fun,
                                      const double* Sun, double* d, unsigned char* missing,
                                      int B, int R, int c, double eps, bool use_un);

// Shared elementwise helpers so the tape and the plain inference path run the
// same code. x/p: [B, N, hw]; softmax over N per pixel.
void softmax_channels(const double* x, double* p, int B, int N, std::int64_t hw);
void tanh_forward(const double* x, double* y, std::int64_t n);

}  // namespace reid::kernels
