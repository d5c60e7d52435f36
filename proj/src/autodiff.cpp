#include "ddeq/autodiff.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

namespace ddeq {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                            Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

CMapM cmap(const Tensor& t) { return CMapM(t.data(), t.rows(), t.cols()); }
MapM map(Tensor& t) { return MapM(t.data(), t.rows(), t.cols()); }

}  // namespace

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::kConst;
  n.value = std::move(value);
  n.requires_grad = false;
  return push(std::move(n));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::binary_same_shape(Op op, Var a, Var b) {
  const Tensor& ta = nodes_[a.id].value;
  const Tensor& tb = nodes_[b.id].value;
  if (!ta.same_shape(tb)) throw ShapeError("elementwise op: shape mismatch");
  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  Tensor out = ta;
  const auto& va = ta.vec();
  const auto& vb = tb.vec();
  auto& vo = out.vec();
  switch (op) {
    case Op::kAdd:
      for (size_t i = 0; i < vo.size(); ++i) vo[i] = va[i] + vb[i];
      break;
    case Op::kSub:
      for (size_t i = 0; i < vo.size(); ++i) vo[i] = va[i] - vb[i];
      break;
    case Op::kMul:
      for (size_t i = 0; i < vo.size(); ++i) vo[i] = va[i] * vb[i];
      break;
    case Op::kDivNz:
      for (size_t i = 0; i < vo.size(); ++i)
        vo[i] = vb[i] == 0.0 ? 0.0 : va[i] / vb[i];
      break;
    default:
      throw Error("internal: not an elementwise op");
  }
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) { return binary_same_shape(Op::kAdd, a, b); }
Var Tape::sub(Var a, Var b) { return binary_same_shape(Op::kSub, a, b); }
Var Tape::mul(Var a, Var b) { return binary_same_shape(Op::kMul, a, b); }
Var Tape::div_nz(Var a, Var b) { return binary_same_shape(Op::kDivNz, a, b); }

Var Tape::scale(Var a, double c) {
  Node n;
  n.op = Op::kScale;
  n.a = a.id;
  n.attr = c;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = nodes_[a.id].value;
  for (auto& v : n.value.vec()) v *= c;
  return push(std::move(n));
}

Var Tape::add_scalar(Var a, double c) {
  Node n;
  n.op = Op::kAddScalar;
  n.a = a.id;
  n.attr = c;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = nodes_[a.id].value;
  for (auto& v : n.value.vec()) v += c;
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
  const Tensor& ta = nodes_[a.id].value;
  const Tensor& tb = nodes_[b.id].value;
  if (ta.rank3() || tb.rank3()) throw ShapeError("matmul: rank-3 input");
  int64_t ar = trans_a ? ta.cols() : ta.rows();
  int64_t ac = trans_a ? ta.rows() : ta.cols();
  int64_t br = trans_b ? tb.cols() : tb.rows();
  int64_t bc = trans_b ? tb.rows() : tb.cols();
  if (ac != br) throw ShapeError("matmul: inner dimension mismatch");
  Tensor out(ar, bc);
  auto A = cmap(ta);
  auto B = cmap(tb);
  auto O = map(out);
  if (!trans_a && !trans_b)
    O.noalias() = A * B;
  else if (trans_a && !trans_b)
    O.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b)
    O.noalias() = A * B.transpose();
  else
    O.noalias() = A.transpose() * B.transpose();
  Node n;
  n.op = Op::kMatMul;
  n.a = a.id;
  n.b = b.id;
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  n.requires_grad = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::transpose(Var a) {
  const Tensor& ta = nodes_[a.id].value;
  if (ta.rank3()) throw ShapeError("transpose: rank-3 input");
  Tensor out(ta.cols(), ta.rows());
  map(out) = cmap(ta).transpose();
  Node n;
  n.op = Op::kTranspose;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::relu(Var a) {
  Node n;
  n.op = Op::kRelu;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = nodes_[a.id].value;
  for (auto& v : n.value.vec()) v = v > 0.0 ? v : 0.0;
  return push(std::move(n));
}

Var Tape::heaviside(Var a) {
  Node n;
  n.op = Op::kHeaviside;
  n.a = a.id;
  n.requires_grad = false;  // subgradient 0 everywhere
  n.value = nodes_[a.id].value;
  for (auto& v : n.value.vec()) v = v > 0.0 ? 1.0 : 0.0;
  return push(std::move(n));
}

Var Tape::exp(Var a) {
  Node n;
  n.op = Op::kExp;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = nodes_[a.id].value;
  for (auto& v : n.value.vec()) v = std::exp(v);
  return push(std::move(n));
}

Var Tape::log(Var a) {
  Node n;
  n.op = Op::kLog;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = nodes_[a.id].value;
  for (auto& v : n.value.vec()) v = std::log(v);
  return push(std::move(n));
}

Var Tape::sqrt(Var a) {
  Node n;
  n.op = Op::kSqrt;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = nodes_[a.id].value;
  for (auto& v : n.value.vec()) v = std::sqrt(v);
  return push(std::move(n));
}

Var Tape::row_sum(Var a) {
  const Tensor& ta = nodes_[a.id].value;
  if (ta.rank3()) throw ShapeError("row_sum: rank-3 input");
  Tensor out(ta.rows(), 1);
  map(out) = cmap(ta).rowwise().sum();
  Node n;
  n.op = Op::kRowSum;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::col_sum(Var a) {
  const Tensor& ta = nodes_[a.id].value;
  if (ta.rank3()) throw ShapeError("col_sum: rank-3 input");
  Tensor out(1, ta.cols());
  map(out) = cmap(ta).colwise().sum();
  Node n;
  n.op = Op::kColSum;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::sum_all(Var a) {
  const Tensor& ta = nodes_[a.id].value;
  if (ta.rank3()) throw ShapeError("sum_all: rank-3 input");
  double s = 0.0;
  for (double v : ta.vec()) s += v;
  Node n;
  n.op = Op::kSumAll;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

Var Tape::broadcast_row(Var a, int64_t rows) {
  const Tensor& ta = nodes_[a.id].value;
  if (ta.rank3() || ta.rows() != 1) throw ShapeError("broadcast_row: want 1xQ");
  Tensor out(rows, ta.cols());
  map(out) = cmap(ta).replicate(rows, 1);
  Node n;
  n.op = Op::kBroadcastRow;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::broadcast_col(Var a, int64_t cols) {
  const Tensor& ta = nodes_[a.id].value;
  if (ta.rank3() || ta.cols() != 1) throw ShapeError("broadcast_col: want Nx1");
  Tensor out(ta.rows(), cols);
  map(out) = cmap(ta).replicate(1, cols);
  Node n;
  n.op = Op::kBroadcastCol;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::broadcast_scalar(Var a, int64_t rows, int64_t cols) {
  const Tensor& ta = nodes_[a.id].value;
  if (ta.numel() != 1) throw ShapeError("broadcast_scalar: want 1x1");
  Node n;
  n.op = Op::kBroadcastScalar;
  n.a = a.id;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = Tensor::full(rows, cols, ta.vec()[0]);
  return push(std::move(n));
}

Var Tape::concat_cols(Var a, Var b) {
  const Tensor& ta = nodes_[a.id].value;
  const Tensor& tb = nodes_[b.id].value;
  if (ta.rank3() || tb.rank3() || ta.rows() != tb.rows())
    throw ShapeError("concat_cols: row mismatch");
  Tensor out(ta.rows(), ta.cols() + tb.cols());
  for (int64_t i = 0; i < ta.rows(); ++i) {
    for (int64_t j = 0; j < ta.cols(); ++j) out(i, j) = ta(i, j);
    for (int64_t j = 0; j < tb.cols(); ++j) out(i, ta.cols() + j) = tb(i, j);
  }
  Node n;
  n.op = Op::kConcatCols;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::slice_cols(Var a, int64_t c0, int64_t c1) {
  const Tensor& ta = nodes_[a.id].value;
  if (ta.rank3() || c0 < 0 || c1 > ta.cols() || c0 >= c1)
    throw ShapeError("slice_cols: bad range");
  Tensor out(ta.rows(), c1 - c0);
  for (int64_t i = 0; i < ta.rows(); ++i)
    for (int64_t j = c0; j < c1; ++j) out(i, j - c0) = ta(i, j);
  Node n;
  n.op = Op::kSliceCols;
  n.a = a.id;
  n.i0 = c0;
  n.i1 = c1;
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::tensor_vec_contract(Var t, Var v) {
  const Tensor& tt = nodes_[t.id].value;
  const Tensor& tv = nodes_[v.id].value;
  if (!tt.rank3() || tv.rank3() || tv.rows() != 1 || tv.cols() != tt.dim(2))
    throw ShapeError("tensor_vec_contract: want (LxJxK, 1xK)");
  int64_t L = tt.dim(0), J = tt.dim(1), K = tt.dim(2);
  Tensor out(L, J);
  for (int64_t l = 0; l < L; ++l)
    for (int64_t j = 0; j < J; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < K; ++k) s += tt(l, j, k) * tv(0, k);
      out(l, j) = s;
    }
  Node n;
  n.op = Op::kTensorVecContract;
  n.a = t.id;
  n.b = v.id;
  n.requires_grad = nodes_[t.id].requires_grad || nodes_[v.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::outer3(Var m, Var v) {
  const Tensor& tm = nodes_[m.id].value;
  const Tensor& tv = nodes_[v.id].value;
  if (tm.rank3() || tv.rank3() || tv.rows() != 1)
    throw ShapeError("outer3: want (LxJ, 1xK)");
  int64_t L = tm.rows(), J = tm.cols(), K = tv.cols();
  Tensor out(L, J, K);
  for (int64_t l = 0; l < L; ++l)
    for (int64_t j = 0; j < J; ++j)
      for (int64_t k = 0; k < K; ++k) out(l, j, k) = tm(l, j) * tv(0, k);
  Node n;
  n.op = Op::kOuter3;
  n.a = m.id;
  n.b = v.id;
  n.requires_grad = nodes_[m.id].requires_grad || nodes_[v.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::contract3(Var t, Var m) {
  const Tensor& tt = nodes_[t.id].value;
  const Tensor& tm = nodes_[m.id].value;
  if (!tt.rank3() || tm.rank3() || tm.rows() != tt.dim(0) ||
      tm.cols() != tt.dim(1))
    throw ShapeError("contract3: want (LxJxK, LxJ)");
  int64_t L = tt.dim(0), J = tt.dim(1), K = tt.dim(2);
  Tensor out(1, K);
  for (int64_t k = 0; k < K; ++k) {
    double s = 0.0;
    for (int64_t l = 0; l < L; ++l)
      for (int64_t j = 0; j < J; ++j) s += tt(l, j, k) * tm(l, j);
    out(0, k) = s;
  }
  Node n;
  n.op = Op::kContract3;
  n.a = t.id;
  n.b = m.id;
  n.requires_grad = nodes_[t.id].requires_grad || nodes_[m.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::pairwise_dist(Var a, Var b) {
  const Tensor& ta = nodes_[a.id].value;
  const Tensor& tb = nodes_[b.id].value;
  if (ta.rank3() || tb.rank3() || ta.cols() != tb.cols())
    throw ShapeError("pairwise_dist: dimension mismatch");
  int64_t N = ta.rows(), M = tb.rows(), d = ta.cols();
  Tensor out(N, M);
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < M; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        double diff = ta(i, k) - tb(j, k);
        s += diff * diff;
      }
      out(i, j) = std::sqrt(s);
    }
  Node n;
  n.op = Op::kPairwiseDist;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::pairwise_sqdist(Var a, Var b) {
  const Tensor& ta = nodes_[a.id].value;
  const Tensor& tb = nodes_[b.id].value;
  if (ta.rank3() || tb.rank3() || ta.cols() != tb.cols())
    throw ShapeError("pairwise_sqdist: dimension mismatch");
  int64_t N = ta.rows(), M = tb.rows(), d = ta.cols();
  Tensor out(N, M);
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < M; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        double diff = ta(i, k) - tb(j, k);
        s += diff * diff;
      }
      out(i, j) = s;
    }
  Node n;
  n.op = Op::kPairwiseSqDist;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::masked_softmax(Var logits, const std::vector<uint8_t>& col_mask) {
  const Tensor& tl = nodes_[logits.id].value;
  if (tl.rank3() || static_cast<int64_t>(col_mask.size()) != tl.cols())
    throw ShapeError("masked_softmax: mask size mismatch");
  bool any = false;
  for (uint8_t m : col_mask) any = any || m;
  if (!any) throw AllSourcesMasked("masked_softmax: no active column");
  int64_t N = tl.rows(), M = tl.cols();
  Tensor out(N, M);
  for (int64_t i = 0; i < N; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < M; ++j)
      if (col_mask[j] && tl(i, j) > mx) mx = tl(i, j);
    double denom = 0.0;
    for (int64_t j = 0; j < M; ++j)
      if (col_mask[j]) {
        out(i, j) = std::exp(tl(i, j) - mx);
        denom += out(i, j);
      }
    for (int64_t j = 0; j < M; ++j)
      out(i, j) = col_mask[j] ? out(i, j) / denom : 0.0;
  }
  Node n;
  n.op = Op::kMaskedSoftmax;
  n.a = logits.id;
  n.mask = col_mask;
  n.requires_grad = nodes_[logits.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::masked_max_pool(Var a, const std::vector<uint8_t>& row_mask) {
  const Tensor& ta = nodes_[a.id].value;
  if (ta.rank3() || static_cast<int64_t>(row_mask.size()) != ta.rows())
    throw ShapeError("masked_max_pool: mask size mismatch");
  bool any = false;
  for (uint8_t m : row_mask) any = any || m;
  if (!any) throw AllMasked("masked_max_pool: no active row");
  int64_t N = ta.rows(), Q = ta.cols();
  Tensor out(1, Q);
  std::vector<int32_t> argmax(Q, -1);
  for (int64_t q = 0; q < Q; ++q) {
    double best = -std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < N; ++i)
      if (row_mask[i] && ta(i, q) > best) {  // first maximum wins ties
        best = ta(i, q);
        argmax[q] = static_cast<int32_t>(i);
      }
    out(0, q) = best;
  }
  Node n;
  n.op = Op::kMaskedMaxPool;
  n.a = a.id;
  n.mask = row_mask;
  n.argmax = std::move(argmax);
  n.requires_grad = nodes_[a.id].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

void Tape::accumulate(std::vector<Var>& grad_of, int32_t id, Var g) {
  if (id < 0 || !nodes_[id].requires_grad) return;
  if (!grad_of[id].valid())
    grad_of[id] = g;
  else
    grad_of[id] = add(grad_of[id], g);
}

void Tape::backward_into(int32_t id, Var g, std::vector<Var>& grad_of) {
  // Snapshot fields; emitting ops may reallocate nodes_.
  const Op op = nodes_[id].op;
  const int32_t ia = nodes_[id].a;
  const int32_t ib = nodes_[id].b;
  const double attr = nodes_[id].attr;
  const bool trans_a = nodes_[id].trans_a;
  const bool trans_b = nodes_[id].trans_b;
  const int64_t i0 = nodes_[id].i0;
  const int64_t i1 = nodes_[id].i1;
  Var a{ia}, b{ib}, out{id};
  const bool need_a = ia >= 0 && nodes_[ia].requires_grad;
  const bool need_b = ib >= 0 && nodes_[ib].requires_grad;

  switch (op) {
    case Op::kConst:
    case Op::kLeaf:
    case Op::kHeaviside:
      return;
    case Op::kAdd:
      if (need_a) accumulate(grad_of, ia, g);
      if (need_b) accumulate(grad_of, ib, g);
      return;
    case Op::kSub:
      if (need_a) accumulate(grad_of, ia, g);
      if (need_b) accumulate(grad_of, ib, neg(g));
      return;
    case Op::kMul:
      if (need_a) accumulate(grad_of, ia, mul(g, b));
      if (need_b) accumulate(grad_of, ib, mul(g, a));
      return;
    case Op::kDivNz:
      if (need_a) accumulate(grad_of, ia, div_nz(g, b));
      if (need_b) accumulate(grad_of, ib, neg(div_nz(mul(g, out), b)));
      return;
    case Op::kScale:
      if (need_a) accumulate(grad_of, ia, scale(g, attr));
      return;
    case Op::kAddScalar:
      if (need_a) accumulate(grad_of, ia, g);
      return;
    case Op::kMatMul:
      if (need_a)
        accumulate(grad_of, ia,
                   trans_a ? matmul(b, g, trans_b, true)
                           : matmul(g, b, false, !trans_b));
      if (need_b)
        accumulate(grad_of, ib,
                   trans_b ? matmul(g, a, true, trans_a)
                           : matmul(a, g, !trans_a, false));
      return;
    case Op::kTranspose:
      if (need_a) accumulate(grad_of, ia, transpose(g));
      return;
    case Op::kRelu:
      if (need_a) accumulate(grad_of, ia, mul(g, heaviside(a)));
      return;
    case Op::kExp:
      if (need_a) accumulate(grad_of, ia, mul(g, out));
      return;
    case Op::kLog:
      if (need_a) accumulate(grad_of, ia, div_nz(g, a));
      return;
    case Op::kSqrt:
      if (need_a) accumulate(grad_of, ia, scale(div_nz(g, out), 0.5));
      return;
    case Op::kRowSum:
      if (need_a)
        accumulate(grad_of, ia, broadcast_col(g, nodes_[ia].value.cols()));
      return;
    case Op::kColSum:
      if (need_a)
        accumulate(grad_of, ia, broadcast_row(g, nodes_[ia].value.rows()));
      return;
    case Op::kSumAll:
      if (need_a)
        accumulate(grad_of, ia,
                   broadcast_scalar(g, nodes_[ia].value.rows(),
                                    nodes_[ia].value.cols()));
      return;
    case Op::kBroadcastRow:
      if (need_a) accumulate(grad_of, ia, col_sum(g));
      return;
    case Op::kBroadcastCol:
      if (need_a) accumulate(grad_of, ia, row_sum(g));
      return;
    case Op::kBroadcastScalar:
      if (need_a) accumulate(grad_of, ia, sum_all(g));
      return;
    case Op::kConcatCols: {
      int64_t ca = nodes_[ia].value.cols();
      int64_t cb = nodes_[ib].value.cols();
      if (need_a) accumulate(grad_of, ia, slice_cols(g, 0, ca));
      if (need_b) accumulate(grad_of, ib, slice_cols(g, ca, ca + cb));
      return;
    }
    case Op::kSliceCols: {
      if (!need_a) return;
      int64_t rows = nodes_[ia].value.rows();
      int64_t cols = nodes_[ia].value.cols();
      Var ga = g;
      if (i0 > 0) ga = concat_cols(constant(Tensor::zeros(rows, i0)), ga);
      if (i1 < cols)
        ga = concat_cols(ga, constant(Tensor::zeros(rows, cols - i1)));
      accumulate(grad_of, ia, ga);
      return;
    }
    case Op::kTensorVecContract:
      if (need_a) accumulate(grad_of, ia, outer3(g, b));
      if (need_b) accumulate(grad_of, ib, contract3(a, g));
      return;
    case Op::kOuter3:
      if (need_a) accumulate(grad_of, ia, tensor_vec_contract(g, b));
      if (need_b) accumulate(grad_of, ib, contract3(g, a));
      return;
    case Op::kContract3:
      if (need_a) accumulate(grad_of, ia, outer3(b, g));
      if (need_b) accumulate(grad_of, ib, tensor_vec_contract(a, g));
      return;
    case Op::kPairwiseDist: {
      int64_t d = nodes_[ia].value.cols();
      Var w = div_nz(g, out);
      if (need_a)
        accumulate(grad_of, ia,
                   sub(mul(broadcast_col(row_sum(w), d), a), matmul(w, b)));
      if (need_b)
        accumulate(grad_of, ib,
                   sub(mul(broadcast_col(transpose(col_sum(w)), d), b),
                       matmul(w, a, true, false)));
      return;
    }
    case Op::kPairwiseSqDist: {
      int64_t d = nodes_[ia].value.cols();
      if (need_a)
        accumulate(
            grad_of, ia,
            scale(sub(mul(broadcast_col(row_sum(g), d), a), matmul(g, b)),
                  2.0));
      if (need_b)
        accumulate(grad_of, ib,
                   scale(sub(mul(broadcast_col(transpose(col_sum(g)), d), b),
                             matmul(g, a, true, false)),
                         2.0));
      return;
    }
    case Op::kMaskedSoftmax: {
      if (!need_a) return;
      Var s = row_sum(mul(g, out));
      accumulate(grad_of, ia,
                 mul(out, sub(g, broadcast_col(s, nodes_[ia].value.cols()))));
      return;
    }
    case Op::kMaskedMaxPool: {
      if (!need_a) return;
      int64_t N = nodes_[ia].value.rows();
      int64_t Q = nodes_[ia].value.cols();
      Tensor ind(N, Q);
      for (int64_t q = 0; q < Q; ++q) ind(nodes_[id].argmax[q], q) = 1.0;
      accumulate(grad_of, ia, mul(constant(std::move(ind)), broadcast_row(g, N)));
      return;
    }
  }
  throw Error("internal: unhandled op in backward");
}

std::vector<Var> Tape::grad(Var output, const std::vector<Var>& wrt) {
  if (nodes_[output.id].value.numel() != 1)
    throw NotScalarOutput("grad: output must be a scalar");
  std::vector<Var> grad_of(static_cast<size_t>(output.id) + 1, Var{});
  if (nodes_[output.id].requires_grad) {
    grad_of[output.id] = constant(Tensor::scalar(1.0));
    for (int32_t id = output.id; id >= 0; --id) {
      if (!grad_of[id].valid()) continue;
      backward_into(id, grad_of[id], grad_of);
    }
  }
  std::vector<Var> result;
  result.reserve(wrt.size());
  for (Var w : wrt) {
    if (w.id <= output.id && grad_of[w.id].valid()) {
      result.push_back(grad_of[w.id]);
    } else {
      const Tensor& v = nodes_[w.id].value;
      result.push_back(constant(
          v.rank3() ? Tensor(v.dim(0), v.dim(1), v.dim(2))
                    : Tensor::zeros(v.rows(), v.cols())));
    }
  }
  return result;
}

// ---- composites ----

Var layer_norm(Tape& t, Var x, double eps) {
  int64_t q = t.value(x).cols();
  Var m = t.scale(t.row_sum(x), 1.0 / static_cast<double>(q));
  Var xc = t.sub(x, t.broadcast_col(m, q));
  Var v = t.scale(t.row_sum(t.mul(xc, xc)), 1.0 / static_cast<double>(q));
  Var sd = t.sqrt(t.add_scalar(v, eps));
  return t.div_nz(xc, t.broadcast_col(sd, q));
}

Var masked_mean_rows(Tape& t, Var x, const std::vector<uint8_t>& row_mask) {
  const Tensor& tx = t.value(x);
  if (static_cast<int64_t>(row_mask.size()) != tx.rows())
    throw ShapeError("masked_mean_rows: mask size mismatch");
  int64_t n_active = 0;
  for (uint8_t m : row_mask) n_active += m ? 1 : 0;
  if (n_active == 0) throw AllMasked("masked_mean_rows: no active row");
  Tensor sel(tx.rows(), tx.cols());
  for (int64_t i = 0; i < tx.rows(); ++i)
    if (row_mask[i])
      for (int64_t j = 0; j < tx.cols(); ++j) sel(i, j) = 1.0;
  return t.scale(t.col_sum(t.mul(x, t.constant(std::move(sel)))),
                 1.0 / static_cast<double>(n_active));
}

Var zero_masked_rows(Tape& t, Var x, const std::vector<uint8_t>& row_mask) {
  const Tensor& tx = t.value(x);
  if (static_cast<int64_t>(row_mask.size()) != tx.rows())
    throw ShapeError("zero_masked_rows: mask size mismatch");
  Tensor sel(tx.rows(), tx.cols());
  for (int64_t i = 0; i < tx.rows(); ++i)
    if (row_mask[i])
      for (int64_t j = 0; j < tx.cols(); ++j) sel(i, j) = 1.0;
  return t.mul(x, t.constant(std::move(sel)));
}

Var pin_rows(Tape& t, Var x, Var pinned_source,
             const std::vector<uint8_t>& pin_mask) {
  const Tensor& tx = t.value(x);
  if (static_cast<int64_t>(pin_mask.size()) != tx.rows())
    throw ShapeError("pin_rows: mask size mismatch");
  Tensor keep(tx.rows(), tx.cols());
  Tensor take(tx.rows(), tx.cols());
  for (int64_t i = 0; i < tx.rows(); ++i)
    for (int64_t j = 0; j < tx.cols(); ++j)
      (pin_mask[i] ? take : keep)(i, j) = 1.0;
  return t.add(t.mul(x, t.constant(std::move(keep))),
               t.mul(pinned_source, t.constant(std::move(take))));
}

// ---- gradient checking ----

std::vector<Tensor> finite_diff_grad(const GradCheckFn& f,
                                     const std::vector<Tensor>& inputs,
                                     double h) {
  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.leaf(x, false));
    return tape.value(f(tape, vars)).scalar_value();
  };
  std::vector<Tensor> grads;
  grads.reserve(inputs.size());
  std::vector<Tensor> work = inputs;
  for (size_t t = 0; t < inputs.size(); ++t) {
    Tensor g = inputs[t];
    for (auto& v : g.vec()) v = 0.0;
    for (int64_t i = 0; i < inputs[t].numel(); ++i) {
      double orig = work[t].vec()[i];
      work[t].vec()[i] = orig + h;
      double fp = eval(work);
      work[t].vec()[i] = orig - h;
      double fm = eval(work);
      work[t].vec()[i] = orig;
      g.vec()[i] = (fp - fm) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double grad_rel_err(const std::vector<Tensor>& analytic,
                    const std::vector<Tensor>& fd) {
  if (analytic.size() != fd.size())
    throw ShapeError("grad_rel_err: list size mismatch");
  double worst = 0.0;
  for (size_t t = 0; t < analytic.size(); ++t) {
    const auto& a = analytic[t].vec();
    const auto& b = fd[t].vec();
    if (a.size() != b.size()) throw ShapeError("grad_rel_err: shape mismatch");
    for (size_t i = 0; i < a.size(); ++i) {
      double denom = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
      worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
  }
  return worst;
}

GradCheckItem gradcheck(const std::string& name, const GradCheckFn& f,
                        const std::vector<Tensor>& inputs, double tol,
                        double h) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
  Var out = f(tape, vars);
  std::vector<Var> gv = tape.grad(out, vars);
  std::vector<Tensor> analytic;
  analytic.reserve(gv.size());
  for (Var g : gv) analytic.push_back(tape.value(g));
  std::vector<Tensor> fd = finite_diff_grad(f, inputs, h);
  GradCheckItem item;
  item.name = name;
  item.max_rel_err = grad_rel_err(analytic, fd);
  item.pass = item.max_rel_err <= tol;
  return item;
}

}  // namespace ddeq
