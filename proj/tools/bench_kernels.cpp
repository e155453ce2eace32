// Times the OpenMP kernels against their serial reference twins on
// training-shaped inputs and prints the speedups.

#include <chrono>
#include <cstdio>
#include <functional>

#include "reid/kernels.hpp"
#include "reid/rng.hpp"
#include "reid/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using reid::Rng;
using reid::Tensor;
namespace kernels = reid::kernels;

namespace {

Tensor randn(Rng& rng, std::vector<int> shape) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
  return t;
}

double time_of(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

void report(const char* name, double serial, double parallel) {
  std::printf("%-22s serial %8.3f ms   omp %8.3f ms   speedup %.2fx\n", name, serial * 1e3,
              parallel * 1e3, serial / parallel);
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("threads: %d\n", omp_get_max_threads());
#else
  std::printf("threads: 1 (compiled without OpenMP)\n");
#endif
  Rng rng(42);
  const int reps = 5;

  {
    const int B = 16, Cin = 16, H = 48, W = 16, Cout = 32;
    const Tensor x = randn(rng, {B, Cin, H, W});
    const Tensor w = randn(rng, {Cout, Cin, 3, 3});
    const Tensor b = randn(rng, {Cout});
    Tensor y({B, Cout, H / 2, W / 2});
    const double ts = time_of(
        [&] {
          kernels::conv2d_forward_serial(x.data(), w.data(), b.data(), y.data(), B, Cin, H, W,
                                         Cout, 3, 3, 2, 1);
        },
        reps);
    const double tp = time_of(
        [&] {
          kernels::conv2d_forward(x.data(), w.data(), b.data(), y.data(), B, Cin, H, W, Cout, 3,
                                  3, 2, 1);
        },
        reps);
    report("conv2d forward", ts, tp);

    const Tensor gy = randn(rng, {B, Cout, H / 2, W / 2});
    Tensor gx({B, Cin, H, W}), gw({Cout, Cin, 3, 3}), gb({Cout});
    const double bs = time_of(
        [&] {
          gx.fill(0.0);
          gw.fill(0.0);
          gb.fill(0.0);
          kernels::conv2d_backward_serial(x.data(), w.data(), gy.data(), gx.data(), gw.data(),
                                          gb.data(), B, Cin, H, W, Cout, 3, 3, 2, 1);
        },
        reps);
    const double bp = time_of(
        [&] {
          gx.fill(0.0);
          gw.fill(0.0);
          gb.fill(0.0);
          kernels::conv2d_backward(x.data(), w.data(), gy.data(), gx.data(), gw.data(), gb.data(),
                                   B, Cin, H, W, Cout, 3, 3, 2, 1);
        },
        reps);
    report("conv2d backward", bs, bp);
  }

  {
    const int B = 16, c = 32, N = 8, h = 12, w = 4;
    const Tensor F = randn(rng, {B, c, h, w});
    Tensor P({B, N, h, w});
    for (std::int64_t i = 0; i < P.numel(); ++i) P[i] = rng.uniform();
    const Tensor wgt = randn(rng, {B, h, w});
    Tensor out({B, N, c});
    const double ts = time_of(
        [&] {
          kernels::region_pool_forward_serial(F.data(), P.data(), wgt.data(), out.data(), B, c, N,
                                              h, w);
        },
        reps * 20);
    const double tp = time_of(
        [&] {
          kernels::region_pool_forward(F.data(), P.data(), wgt.data(), out.data(), B, c, N, h, w);
        },
        reps * 20);
    report("region_pool forward", ts, tp);
  }

  {
    const int B = 64, R = 7, c = 32;
    const Tensor Ft = randn(rng, {B, R, c});
    Tensor S({B, R});
    for (std::int64_t i = 0; i < S.numel(); ++i) S[i] = rng.uniform();
    const Tensor fun = randn(rng, {B, c});
    Tensor Sun({B});
    for (int i = 0; i < B; ++i) Sun[i] = rng.uniform();
    Tensor d({B, B});
    std::vector<unsigned char> missing(static_cast<std::size_t>(B) * B);
    const double ts = time_of(
        [&] {
          kernels::pairwise_extended_forward_serial(Ft.data(), S.data(), fun.data(), Sun.data(),
                                                    d.data(), missing.data(), B, R, c, 1e-8, true);
        },
        reps * 20);
    const double tp = time_of(
        [&] {
          kernels::pairwise_extended_forward(Ft.data(), S.data(), fun.data(), Sun.data(), d.data(),
                                             missing.data(), B, R, c, 1e-8, true);
        },
        reps * 20);
    report("pairwise distances", ts, tp);
  }
  return 0;
}
