#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ddeq/tensor.hpp"

namespace ddeq {

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

enum class Op : uint8_t {
  kConst,
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDivNz,  // elementwise a/b, exactly 0 where b == 0
  kScale,
  kAddScalar,
  kMatMul,
  kTranspose,
  kRelu,
  kHeaviside,  // 1 where x > 0; carries no gradient
  kExp,
  kLog,
  kSqrt,
  kRowSum,           // NxQ -> Nx1
  kColSum,           // NxQ -> 1xQ
  kSumAll,           // -> 1x1
  kBroadcastRow,     // 1xQ -> NxQ
  kBroadcastCol,     // Nx1 -> NxQ
  kBroadcastScalar,  // 1x1 -> NxQ
  kConcatCols,
  kSliceCols,
  kTensorVecContract,  // (LxJxK, 1xK) -> LxJ
  kOuter3,             // (LxJ, 1xK) -> LxJxK
  kContract3,          // (LxJxK, LxJ) -> 1xK
  kPairwiseDist,       // (Nxd, Mxd) -> NxM Euclidean distances
  kPairwiseSqDist,
  kMaskedSoftmax,  // per row over masked columns; masked outputs are 0
  kMaskedMaxPool,  // NxQ over active rows -> 1xQ
};

// Reverse-mode tape over Tensors. Forward values are computed eagerly; the
// backward pass emits ordinary ops onto the same tape, so gradients are
// themselves differentiable (needed to backpropagate through the inner
// Wasserstein gradient step).
class Tape {
 public:
  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div_nz(Var a, Var b);
  Var scale(Var a, double c);
  Var neg(Var a) { return scale(a, -1.0); }
  Var add_scalar(Var a, double c);
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
  Var transpose(Var a);
  Var relu(Var a);
  Var heaviside(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var row_sum(Var a);
  Var col_sum(Var a);
  Var sum_all(Var a);
  Var broadcast_row(Var a, int64_t rows);
  Var broadcast_col(Var a, int64_t cols);
  Var broadcast_scalar(Var a, int64_t rows, int64_t cols);
  Var concat_cols(Var a, Var b);
  Var slice_cols(Var a, int64_t c0, int64_t c1);
  Var tensor_vec_contract(Var t, Var v);
  Var outer3(Var m, Var v);
  Var contract3(Var t, Var m);
  Var pairwise_dist(Var a, Var b);
  Var pairwise_sqdist(Var a, Var b);
  Var masked_softmax(Var logits, const std::vector<uint8_t>& col_mask);
  Var masked_max_pool(Var a, const std::vector<uint8_t>& row_mask);

  // Gradient of a scalar output w.r.t. each listed var, as on-tape vars.
  // Vars the output does not depend on get zero gradients of matching shape.
  std::vector<Var> grad(Var output, const std::vector<Var>& wrt);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    int32_t a = -1, b = -1;
    Tensor value;
    bool requires_grad = false;
    double attr = 0.0;                // Scale / AddScalar
    bool trans_a = false, trans_b = false;
    int64_t i0 = 0, i1 = 0;           // SliceCols / broadcast target dims
    std::vector<uint8_t> mask;        // masked ops
    std::vector<int32_t> argmax;      // MaskedMaxPool winners
  };

  std::vector<Node> nodes_;

  Var push(Node n);
  Var binary_same_shape(Op op, Var a, Var b);
  void backward_into(int32_t id, Var g, std::vector<Var>& grad_of);
  void accumulate(std::vector<Var>& grad_of, int32_t id, Var g);
};

// ---- composite helpers (built from the primitive ops above) ----

// Per-row layer normalization with epsilon inside the square root.
Var layer_norm(Tape& t, Var x, double eps = 1e-5);
// Mean over active rows -> 1xQ. Throws AllMasked when no row is active.
Var masked_mean_rows(Tape& t, Var x, const std::vector<uint8_t>& row_mask);
// Zeroes rows whose mask entry is false.
Var zero_masked_rows(Tape& t, Var x, const std::vector<uint8_t>& row_mask);
// rows where pin is true are replaced by the same rows of `pinned_source`.
Var pin_rows(Tape& t, Var x, Var pinned_source,
             const std::vector<uint8_t>& pin_mask);

// ---- gradient checking ----

struct GradCheckItem {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckItem> items;
  bool all_pass() const {
    for (const auto& it : items)
      if (!it.pass) return false;
    return !items.empty();
  }
};

// Scalar function of a list of input tensors, built on the given tape.
using GradCheckFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Central finite differences of f w.r.t. every input entry (step h).
std::vector<Tensor> finite_diff_grad(const GradCheckFn& f,
                                     const std::vector<Tensor>& inputs,
                                     double h = 1e-5);

// Relative error with a unit floor: |a-f| / max(1, |a|, |f|).
double grad_rel_err(const std::vector<Tensor>& analytic,
                    const std::vector<Tensor>& fd);

// Reverse-mode vs central finite differences for one scalar function.
GradCheckItem gradcheck(const std::string& name, const GradCheckFn& f,
                        const std::vector<Tensor>& inputs, double tol,
                        double h = 1e-5);

}  // namespace ddeq
