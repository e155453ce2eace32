#pragma once

#include <functional>
#include <vector>

#include "reid/tensor.hpp"

namespace reid::ad {

class Tape;

/// Handle to a tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over Tensor-granular operations. One tape per training
/// step; ops record a backward closure that accumulates into parent grads.
/// Forward computations reuse the same kernels as the plain inference path,
/// so tape values match the non-tape pipeline bit for bit.
class Tape {
 public:
  Var leaf(Tensor value);
  /// Leaf that never receives gradient (constants, frozen scores).
  Var constant(Tensor value);

  const Tensor& val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  const Tensor& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  /// Seeds d(root)=1 (root must be a scalar) and sweeps the tape in reverse.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

  // --- elementwise / shape ---
  Var add(Var a, Var b);
  Var scale(Var x, double a);
  Var one_minus(Var x);
  Var tanh(Var x);
  Var reshape(Var x, std::vector<int> shape);
  Var sum_all(Var x);                 // scalar sum of all entries
  Var entry(Var x, std::int64_t i);   // scalar view of one entry

  // --- network layers ---
  // x [B,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  // x [B,C,H,W] -> [B,C,H/f,W/f], mean over f x f blocks
  Var avgpool(Var x, int factor);
  // [B,c1,h,w] ++ [B,c2,h,w] -> [B,c1+c2,h,w]
  Var concat_channels(Var a, Var b);
  // channels [c0, c1) of x
  Var slice_channels(Var x, int c0, int c1);
  // x [B,N,h,w] -> softmax over dim 1 per pixel
  Var softmax_channels(Var x);
  // x [B,R,c], w [R,K,c], b [R,K] -> [B,R,K]
  Var rows_affine(Var x, Var w, Var b);

  // --- entropy masking ---
  // P [B,N,h,w] -> normalized entropy [B,h,w]
  Var entropy_norm(Var p);
  // e [B,h,w]: keep entries >= tau, zero the rest
  Var threshold_keep(Var e, double tau);
  // per-image median threshold (midpoint convention), threshold held constant
  Var median_threshold_keep(Var e);

  // --- pooling / descriptors ---
  // F [B,c,h,w], P [B,N,h,w], optional weight [B,h,w] -> [B,N,c]
  Var region_pool(Var f, Var p);
  Var region_pool(Var f, Var p, Var weight);
  // P [B,N,h,w] -> [B,N]
  Var region_mass(Var p);
  // M [B,h,w] -> [B]
  Var grid_sum(Var m);
  // F [B,c,h,w], M [B,h,w] -> [B,c] mask-weighted sums
  Var masked_pool(Var f, Var m);
  // x [B,c] / s [B]: rows divided by s where s >= eps, else zero rows
  Var div_mass(Var x, Var s, double eps);
  // s [B]: s where s >= eps, else 0
  Var score_gate(Var s, double eps);
  // rows of the last dimension normalized to unit length; rows with norm
  // below eps become zero (and pass no gradient)
  Var unit_rows(Var x, double eps);
  // drop the last slice of dim 1 ([B,N,c] -> [B,N-1,c], [B,N] -> [B,N-1])
  Var drop_last(Var x);
  // F [B,c,h,w] -> [B,c] spatial mean
  Var mean_spatial(Var f);

  // --- distances & losses ---
  // Ft [B,R,c], S [B,R], fun [B,c], Sun [B] -> [B,B]. Pairs whose score
  // denominator is below eps are filled with the largest defined entry and
  // treated as constants. R may be 0 (pass invalid fun/Sun only if !use_un).
  Var pairwise_extended(Var ft, Var s, Var fun, Var sun, double eps, bool use_un);
  // d [B,B]: mean over anchors of max(0, hardest_pos - hardest_neg + margin)
  Var batch_hard(Var d, const std::vector<int>& labels, double margin);
  // logits [B,R,K], w [B,R], labels [B] -> scalar (1/B) sum w*CE
  Var weighted_ce_rows(Var logits, Var w, const std::vector<int>& labels);
  // P [B,N,h,w] probabilities, labels flat [B*h*w] with values 1..N -> scalar
  Var parsing_ce(Var p, const std::vector<int>& labels);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> parents;
    std::function<void(Tape&, int)> back;  // empty for leaves/constants
  };

  Var push(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> back);
  Tensor& gradref(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

  std::vector<Node> nodes_;
};

}  // namespace reid::ad
