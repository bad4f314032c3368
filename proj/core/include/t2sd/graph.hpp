// Copyright 2026 The t2sd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "t2sd/param_store.hpp"
#include "t2sd/tensor.hpp"

namespace t2sd {

/// Reverse-mode tape over a fixed op catalog. A graph is built per training
/// step (define-by-run), forward values are computed eagerly, and backward()
/// fills gradients for every parameter and leaf reachable from the loss.
///
/// Single-threaded per instance; values are plain row-major buffers and the
/// matmul family is evaluated through Eigen maps.
template <typename S>
class Graph {
 public:
  using Id = int32_t;
  template <typename T>
  using EMat = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  template <typename T>
  using CEMat = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  explicit Graph(ParamStore<S>* params = nullptr) : params_(params) {}

  // ---- leaves ------------------------------------------------------------

  /// Constant input: no gradient is tracked or stored for it.
  Id input(Tensor<S> value) { return push(Op::kInput, "input", {}, std::move(value), false); }

  /// Differentiable non-parameter input (gradients retrievable via grad()).
  Id leaf(Tensor<S> value) { return push(Op::kLeaf, "leaf", {}, std::move(value), true); }

  /// Named parameter from the bound store. Repeated lookups of the same name
  /// return the same node so fan-out accumulates correctly.
  Id param(const std::string& name) {
    if (!params_) throw DataError("graph has no parameter store bound");
    auto it = param_ids_.find(name);
    if (it != param_ids_.end()) return it->second;
    Id id = push(Op::kParam, name, {}, params_->at(name), true);
    param_ids_.emplace(name, id);
    return id;
  }

  // ---- matmul family -----------------------------------------------------

  /// a [..., n, k] x b [k, m] -> [..., n, m]; leading axes collapse to rows.
  Id matmul(Id a, Id b) {
    const Tensor<S>&A = val(a), &B = val(b);
    if (B.rank() != 2 || A.last() != B.dim(0)) {
      throw DataError("matmul: incompatible shapes " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    }
    Shape out_shape = A.shape();
    out_shape.back() = B.dim(1);
    Tensor<S> out(out_shape);
    CEMat<S> ma(A.data(), A.rows(), A.last());
    CEMat<S> mb(B.data(), B.dim(0), B.dim(1));
    EMat<S> mo(out.data(), out.rows(), out.last());
    mo.noalias() = ma * mb;
    return push(Op::kMatMul, "matmul", {a, b}, std::move(out), needs(a) || needs(b));
  }

  /// a [n, k] x b [m, k]^T -> [n, m]; both sides differentiable (used for
  /// similarity matrices between two embedding batches).
  Id matmul_nt(Id a, Id b) {
    const Tensor<S>&A = val(a), &B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1)) {
      throw DataError("matmul_nt: incompatible shapes " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    }
    Tensor<S> out({A.dim(0), B.dim(0)});
    CEMat<S> ma(A.data(), A.dim(0), A.dim(1));
    CEMat<S> mb(B.data(), B.dim(0), B.dim(1));
    EMat<S> mo(out.data(), out.rows(), out.last());
    mo.noalias() = ma * mb.transpose();
    return push(Op::kMatMulNT, "matmul_nt", {a, b}, std::move(out), needs(a) || needs(b));
  }

  /// Batched matmul: a [B, n, k] x b [B, k, m] -> [B, n, m]. With
  /// transpose_b, b is [B, m, k] and is transposed per slice.
  Id bmm(Id a, Id b, bool transpose_b = false) {
    const Tensor<S>&A = val(a), &B = val(b);
    if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0)) {
      throw DataError("bmm: want rank-3 with equal batch, got " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    }
    const int64_t bs = A.dim(0), n = A.dim(1), k = A.dim(2);
    const int64_t m = transpose_b ? B.dim(1) : B.dim(2);
    if ((transpose_b ? B.dim(2) : B.dim(1)) != k) {
      throw DataError("bmm: inner extents differ, " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    }
    Tensor<S> out({bs, n, m});
    for (int64_t i = 0; i < bs; ++i) {
      CEMat<S> ma(A.data() + i * n * k, n, k);
      EMat<S> mo(out.data() + i * n * m, n, m);
      if (transpose_b) {
        CEMat<S> mb(B.data() + i * m * k, m, k);
        mo.noalias() = ma * mb.transpose();
      } else {
        CEMat<S> mb(B.data() + i * k * m, k, m);
        mo.noalias() = ma * mb;
      }
    }
    return push(transpose_b ? Op::kBMMNT : Op::kBMM, "bmm", {a, b}, std::move(out), needs(a) || needs(b));
  }

  // ---- elementwise and broadcast ops --------------------------------------

  Id add(Id a, Id b) { return ew2(Op::kAdd, "add", a, b); }
  Id sub(Id a, Id b) { return ew2(Op::kSub, "sub", a, b); }
  Id mul(Id a, Id b) { return ew2(Op::kMul, "mul", a, b); }

  /// x [..., m] + bias [m].
  Id add_bias(Id x, Id b) {
    const Tensor<S>&X = val(x), &B = val(b);
    if (B.rank() != 1 || B.dim(0) != X.last()) {
      throw DataError("add_bias: bias " + shape_str(B.shape()) + " does not match features of " + shape_str(X.shape()));
    }
    Tensor<S> out(X.shape());
    const int64_t rows = X.rows(), m = X.last();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < m; ++j) out[r * m + j] = X[r * m + j] + B[j];
    return push(Op::kAddBias, "add_bias", {x, b}, std::move(out), needs(x) || needs(b));
  }

  /// x [B, T, W] + e [B, W], broadcast over the token axis.
  Id add_rows(Id x, Id e) {
    const Tensor<S>&X = val(x), &E = val(e);
    if (X.rank() != 3 || E.rank() != 2 || E.dim(0) != X.dim(0) || E.dim(1) != X.dim(2)) {
      throw DataError("add_rows: shapes " + shape_str(X.shape()) + " + " + shape_str(E.shape()));
    }
    Tensor<S> out(X.shape());
    const int64_t bs = X.dim(0), t = X.dim(1), w = X.dim(2);
    for (int64_t b = 0; b < bs; ++b)
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < w; ++j) out[(b * t + i) * w + j] = X[(b * t + i) * w + j] + E[b * w + j];
    return push(Op::kAddRows, "add_rows", {x, e}, std::move(out), needs(x) || needs(e));
  }

  /// x + c where c is a constant tensor matching x's trailing slice
  /// ([B, T, W] + [T, W]); used for position tables.
  Id add_broadcast0(Id x, const Tensor<S>& c) {
    const Tensor<S>& X = val(x);
    if (X.rank() < 2 || c.numel() != X.numel() / X.dim(0)) {
      throw DataError("add_broadcast0: constant " + shape_str(c.shape()) + " does not tile " + shape_str(X.shape()));
    }
    Tensor<S> out(X.shape());
    const int64_t b = X.dim(0), inner = c.numel();
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < inner; ++j) out[i * inner + j] = X[i * inner + j] + c[j];
    return push(Op::kAddBroadcast0, "add_broadcast0", {x}, std::move(out), needs(x));
  }

  Id scale(Id x, double c) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape());
    for (int64_t i = 0; i < X.numel(); ++i) out[i] = static_cast<S>(static_cast<double>(X[i]) * c);
    Id id = push(Op::kScale, "scale", {x}, std::move(out), needs(x));
    node(id).c0 = c;
    return id;
  }

  Id add_scalar(Id x, double c) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape());
    for (int64_t i = 0; i < X.numel(); ++i) out[i] = static_cast<S>(static_cast<double>(X[i]) + c);
    return push(Op::kAddScalar, "add_scalar", {x}, std::move(out), needs(x));
  }

  /// x [B, ...] scaled per leading index by the constant vector c [B].
  Id rows_scale(Id x, Tensor<S> c) {
    const Tensor<S>& X = val(x);
    if (c.numel() != X.dim(0)) throw DataError("rows_scale: need one coefficient per leading index");
    Tensor<S> out(X.shape());
    const int64_t b = X.dim(0), inner = X.numel() / b;
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < inner; ++j) out[i * inner + j] = X[i * inner + j] * c[i];
    Id id = push(Op::kRowsScale, "rows_scale", {x}, std::move(out), needs(x));
    node(id).aux = std::move(c);
    return id;
  }

  /// Elementwise product with a constant mask of the same shape.
  Id mul_const(Id x, Tensor<S> c) {
    const Tensor<S>& X = val(x);
    if (!c.same_shape(X)) throw DataError("mul_const: mask shape mismatch");
    Tensor<S> out(X.shape());
    for (int64_t i = 0; i < X.numel(); ++i) out[i] = X[i] * c[i];
    Id id = push(Op::kMulConst, "mul_const", {x}, std::move(out), needs(x));
    node(id).aux = std::move(c);
    return id;
  }

  // ---- nonlinearities ------------------------------------------------------

  Id relu(Id x) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape());
    for (int64_t i = 0; i < X.numel(); ++i) out[i] = X[i] > S(0) ? X[i] : S(0);
    return push(Op::kRelu, "relu", {x}, std::move(out), needs(x));
  }

  Id gelu(Id x) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape());
    for (int64_t i = 0; i < X.numel(); ++i) {
      const double v = static_cast<double>(X[i]);
      out[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
    return push(Op::kGelu, "gelu", {x}, std::move(out), needs(x));
  }

  Id exp(Id x) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape());
    for (int64_t i = 0; i < X.numel(); ++i) out[i] = static_cast<S>(std::exp(static_cast<double>(X[i])));
    return push(Op::kExp, "exp", {x}, std::move(out), needs(x));
  }

  Id log(Id x) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape());
    for (int64_t i = 0; i < X.numel(); ++i) out[i] = static_cast<S>(std::log(static_cast<double>(X[i])));
    return push(Op::kLog, "log", {x}, std::move(out), needs(x));
  }

  Id square(Id x) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape());
    for (int64_t i = 0; i < X.numel(); ++i) out[i] = X[i] * X[i];
    return push(Op::kSquare, "square", {x}, std::move(out), needs(x));
  }

  Id clamp(Id x, double lo, double hi) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape());
    for (int64_t i = 0; i < X.numel(); ++i) {
      double v = static_cast<double>(X[i]);
      out[i] = static_cast<S>(v < lo ? lo : (v > hi ? hi : v));
    }
    Id id = push(Op::kClamp, "clamp", {x}, std::move(out), needs(x));
    node(id).c0 = lo;
    node(id).c1 = hi;
    return id;
  }

  // ---- normalization and attention pieces ----------------------------------

  /// Per-feature layer norm over the last axis with learnable scale/shift.
  Id layer_norm(Id x, Id gamma, Id beta, double eps = 1e-5) {
    const Tensor<S>&X = val(x), &G = val(gamma), &B = val(beta);
    const int64_t m = X.last(), rows = X.rows();
    if (G.numel() != m || B.numel() != m) throw DataError("layer_norm: scale/shift must have feature extent");
    Tensor<S> out(X.shape());
    Tensor<S> xhat(X.shape());
    Tensor<S> rstd({rows});
    for (int64_t r = 0; r < rows; ++r) {
      const S* xr = X.data() + r * m;
      double mean = 0;
      for (int64_t j = 0; j < m; ++j) mean += static_cast<double>(xr[j]);
      mean /= static_cast<double>(m);
      double var = 0;
      for (int64_t j = 0; j < m; ++j) {
        const double d = static_cast<double>(xr[j]) - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double rs = 1.0 / std::sqrt(var + eps);
      rstd[r] = static_cast<S>(rs);
      for (int64_t j = 0; j < m; ++j) {
        const double h = (static_cast<double>(xr[j]) - mean) * rs;
        xhat[r * m + j] = static_cast<S>(h);
        out[r * m + j] = static_cast<S>(h * static_cast<double>(G[j]) + static_cast<double>(B[j]));
      }
    }
    Id id = push(Op::kLayerNorm, "layer_norm", {x, gamma, beta}, std::move(out), needs(x) || needs(gamma) || needs(beta));
    node(id).aux = std::move(xhat);
    node(id).aux2 = std::move(rstd);
    return id;
  }

  /// Max-subtracted softmax over the last axis.
  Id softmax(Id x) {
    const Tensor<S>& X = val(x);
    Tensor<S> out(X.shape());
    const int64_t rows = X.rows(), m = X.last();
    for (int64_t r = 0; r < rows; ++r) {
      const S* xr = X.data() + r * m;
      double mx = static_cast<double>(xr[0]);
      for (int64_t j = 1; j < m; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
      double z = 0;
      for (int64_t j = 0; j < m; ++j) {
        const double e = std::exp(static_cast<double>(xr[j]) - mx);
        out[r * m + j] = static_cast<S>(e);
        z += e;
      }
      for (int64_t j = 0; j < m; ++j) out[r * m + j] = static_cast<S>(static_cast<double>(out[r * m + j]) / z);
    }
    return push(Op::kSoftmax, "softmax", {x}, std::move(out), needs(x));
  }

  /// log(sum(exp(x))) over the last axis -> [rows, 1], max-subtracted.
  Id logsumexp(Id x) {
    const Tensor<S>& X = val(x);
    const int64_t rows = X.rows(), m = X.last();
    Shape out_shape = X.shape();
    out_shape.back() = 1;
    Tensor<S> out(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
      const S* xr = X.data() + r * m;
      double mx = static_cast<double>(xr[0]);
      for (int64_t j = 1; j < m; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
      double z = 0;
      for (int64_t j = 0; j < m; ++j) z += std::exp(static_cast<double>(xr[j]) - mx);
      out[r] = static_cast<S>(mx + std::log(z));
    }
    return push(Op::kLogSumExp, "logsumexp", {x}, std::move(out), needs(x));
  }

  /// Rows scaled to unit L2 norm. A zero row is an error.
  Id l2_normalize(Id x) {
    const Tensor<S>& X = val(x);
    const int64_t rows = X.rows(), m = X.last();
    Tensor<S> out(X.shape());
    Tensor<S> norms({rows});
    for (int64_t r = 0; r < rows; ++r) {
      double n2 = 0;
      for (int64_t j = 0; j < m; ++j) {
        const double v = static_cast<double>(X[r * m + j]);
        n2 += v * v;
      }
      if (n2 == 0.0) throw NumericalError("l2_normalize: zero vector");
      const double n = std::sqrt(n2);
      norms[r] = static_cast<S>(n);
      for (int64_t j = 0; j < m; ++j) out[r * m + j] = static_cast<S>(static_cast<double>(X[r * m + j]) / n);
    }
    Id id = push(Op::kL2Normalize, "l2_normalize", {x}, std::move(out), needs(x));
    node(id).aux = std::move(norms);
    return id;
  }

  // ---- reductions and shape ops ---------------------------------------------

  Id sum(Id x) {
    const Tensor<S>& X = val(x);
    double s = 0;
    for (int64_t i = 0; i < X.numel(); ++i) s += static_cast<double>(X[i]);
    return push(Op::kSum, "sum", {x}, Tensor<S>::scalar(static_cast<S>(s)), needs(x));
  }

  Id mean(Id x) {
    const Tensor<S>& X = val(x);
    double s = 0;
    for (int64_t i = 0; i < X.numel(); ++i) s += static_cast<double>(X[i]);
    return push(Op::kMean, "mean", {x}, Tensor<S>::scalar(static_cast<S>(s / static_cast<double>(X.numel()))),
                needs(x));
  }

  /// Sum over the last axis -> [rows, 1].
  Id row_sum(Id x) {
    const Tensor<S>& X = val(x);
    const int64_t rows = X.rows(), m = X.last();
    Shape out_shape = X.shape();
    out_shape.back() = 1;
    Tensor<S> out(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
      double s = 0;
      for (int64_t j = 0; j < m; ++j) s += static_cast<double>(X[r * m + j]);
      out[r] = static_cast<S>(s);
    }
    return push(Op::kRowSum, "row_sum", {x}, std::move(out), needs(x));
  }

  /// Mean over groups of `group` consecutive tokens: [B, T, W] -> [B, T/group, W].
  Id mean_pool(Id x, int64_t group) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 3 || group <= 0 || X.dim(1) % group != 0) {
      throw DataError("mean_pool: group " + std::to_string(group) + " must divide token axis of " +
                      shape_str(X.shape()));
    }
    const int64_t b = X.dim(0), t = X.dim(1), w = X.dim(2), to = t / group;
    Tensor<S> out({b, to, w});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t g = 0; g < to; ++g)
        for (int64_t j = 0; j < w; ++j) {
          double s = 0;
          for (int64_t u = 0; u < group; ++u) s += static_cast<double>(X[(i * t + g * group + u) * w + j]);
          out[(i * to + g) * w + j] = static_cast<S>(s / static_cast<double>(group));
        }
    Id id = push(Op::kMeanPool, "mean_pool", {x}, std::move(out), needs(x));
    node(id).k = group;
    return id;
  }

  /// Nearest-neighbor token upsampling: [B, T, W] -> [B, T*factor, W].
  Id repeat_tokens(Id x, int64_t factor) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 3 || factor <= 0) throw DataError("repeat_tokens: want rank-3 input and positive factor");
    const int64_t b = X.dim(0), t = X.dim(1), w = X.dim(2);
    Tensor<S> out({b, t * factor, w});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t g = 0; g < t; ++g)
        for (int64_t u = 0; u < factor; ++u)
          for (int64_t j = 0; j < w; ++j) out[(i * t * factor + g * factor + u) * w + j] = X[(i * t + g) * w + j];
    Id id = push(Op::kRepeatTokens, "repeat_tokens", {x}, std::move(out), needs(x));
    node(id).k = factor;
    return id;
  }

  /// Concatenation along the feature (last) axis.
  Id concat(Id a, Id b) {
    const Tensor<S>&A = val(a), &B = val(b);
    if (A.rank() != B.rank() || A.rows() != B.rows()) throw DataError("concat: row counts differ");
    for (int i = 0; i + 1 < A.rank(); ++i) {
      if (A.dim(i) != B.dim(i)) throw DataError("concat: leading shapes differ");
    }
    Shape out_shape = A.shape();
    out_shape.back() = A.last() + B.last();
    Tensor<S> out(out_shape);
    const int64_t rows = A.rows(), ma = A.last(), mb = B.last();
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t j = 0; j < ma; ++j) out[r * (ma + mb) + j] = A[r * ma + j];
      for (int64_t j = 0; j < mb; ++j) out[r * (ma + mb) + ma + j] = B[r * mb + j];
    }
    return push(Op::kConcat, "concat", {a, b}, std::move(out), needs(a) || needs(b));
  }

  /// [B, T, W] -> [B*heads, T, W/heads], splitting the feature axis.
  Id split_heads(Id x, int64_t heads) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 3 || X.dim(2) % heads != 0) throw DataError("split_heads: feature axis not divisible by heads");
    const int64_t b = X.dim(0), t = X.dim(1), w = X.dim(2), dh = w / heads;
    Tensor<S> out({b * heads, t, dh});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t u = 0; u < t; ++u)
          for (int64_t j = 0; j < dh; ++j) out[((i * heads + h) * t + u) * dh + j] = X[(i * t + u) * w + h * dh + j];
    Id id = push(Op::kSplitHeads, "split_heads", {x}, std::move(out), needs(x));
    node(id).k = heads;
    return id;
  }

  /// Inverse of split_heads: [B*heads, T, dh] -> [B, T, heads*dh].
  Id merge_heads(Id x, int64_t heads) {
    const Tensor<S>& X = val(x);
    if (X.rank() != 3 || X.dim(0) % heads != 0) throw DataError("merge_heads: batch axis not divisible by heads");
    const int64_t b = X.dim(0) / heads, t = X.dim(1), dh = X.dim(2), w = heads * dh;
    Tensor<S> out({b, t, w});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t u = 0; u < t; ++u)
          for (int64_t j = 0; j < dh; ++j) out[(i * t + u) * w + h * dh + j] = X[((i * heads + h) * t + u) * dh + j];
    Id id = push(Op::kMergeHeads, "merge_heads", {x}, std::move(out), needs(x));
    node(id).k = heads;
    return id;
  }

  Id reshape(Id x, Shape shape) {
    Tensor<S> out = val(x).reshaped(std::move(shape));
    return push(Op::kReshape, "reshape", {x}, std::move(out), needs(x));
  }

  // ---- access ---------------------------------------------------------------

  const Tensor<S>& value(Id id) const { return nodes_[static_cast<size_t>(id)].val; }

  /// Gradient of the last backward()'s loss w.r.t. a leaf/param/intermediate.
  const Tensor<S>& grad(Id id) const {
    const NodeT& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.numel() == 0) throw DataError("no gradient recorded for node (did backward run?)");
    return n.grad;
  }

  const std::map<std::string, Tensor<S>>& param_grads() const { return param_grads_; }

  size_t size() const { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar loss. May be called once per recording.
  void backward(Id loss) {
    if (backward_done_) throw std::logic_error("backward called twice on the same recording");
    backward_done_ = true;
    NodeT& ln = node(loss);
    if (ln.val.numel() != 1) throw DataError("backward: loss must be scalar");
    ensure_grad(loss);
    ln.grad[0] = S(1);
    for (Id id = loss; id >= 0; --id) {
      NodeT& n = node(id);
      if (!n.needs_grad || n.grad.numel() == 0) continue;
      backward_node(id, n);
    }
    for (const auto& [name, pid] : param_ids_) {
      NodeT& n = node(pid);
      if (n.grad.numel() > 0) param_grads_[name] = n.grad;
    }
  }

 private:
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;

  enum class Op {
    kInput, kLeaf, kParam,
    kMatMul, kMatMulNT, kBMM, kBMMNT,
    kAdd, kSub, kMul, kAddBias, kAddRows, kAddBroadcast0,
    kScale, kAddScalar, kRowsScale, kMulConst,
    kRelu, kGelu, kExp, kLog, kSquare, kClamp,
    kLayerNorm, kSoftmax, kLogSumExp, kL2Normalize,
    kSum, kMean, kRowSum, kMeanPool, kRepeatTokens,
    kConcat, kSplitHeads, kMergeHeads, kReshape,
  };

  struct NodeT {
    Op op;
    std::array<Id, 3> in{-1, -1, -1};
    Tensor<S> val;
    Tensor<S> grad;      // empty until touched by backward
    Tensor<S> aux;       // op-specific saved tensor (xhat, norms, constants)
    Tensor<S> aux2;      // second saved tensor (layer_norm rstd)
    double c0 = 0, c1 = 0;
    int64_t k = 0;
    std::string name;
    bool needs_grad = false;
  };

  NodeT& node(Id id) { return nodes_[static_cast<size_t>(id)]; }
  const Tensor<S>& val(Id id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) throw DataError("invalid node id");
    return nodes_[static_cast<size_t>(id)].val;
  }
  bool needs(Id id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  Id push(Op op, std::string name, std::initializer_list<Id> inputs, Tensor<S> val, bool needs_grad) {
    if (!val.all_finite()) throw NumericalError("non-finite output in op '" + name + "'");
    NodeT n;
    n.op = op;
    n.name = std::move(name);
    int i = 0;
    for (Id in : inputs) n.in[static_cast<size_t>(i++)] = in;
    n.val = std::move(val);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  Id ew2(Op op, const char* name, Id a, Id b) {
    const Tensor<S>&A = val(a), &B = val(b);
    if (!A.same_shape(B)) {
      throw DataError(std::string(name) + ": shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
    }
    Tensor<S> out(A.shape());
    for (int64_t i = 0; i < A.numel(); ++i) {
      switch (op) {
        case Op::kAdd: out[i] = A[i] + B[i]; break;
        case Op::kSub: out[i] = A[i] - B[i]; break;
        default: out[i] = A[i] * B[i]; break;
      }
    }
    return push(op, name, {a, b}, std::move(out), needs(a) || needs(b));
  }

  void ensure_grad(Id id) {
    NodeT& n = node(id);
    if (n.grad.numel() == 0) n.grad = Tensor<S>(n.val.shape());
  }

  /// Accumulates into input `slot`'s gradient buffer if that input wants one.
  Tensor<S>* sink(NodeT& n, int slot) {
    Id id = n.in[static_cast<size_t>(slot)];
    if (id < 0 || !needs(id)) return nullptr;
    ensure_grad(id);
    return &node(id).grad;
  }

  void backward_node(Id id, NodeT& n) {
    const Tensor<S>& g = n.grad;
    switch (n.op) {
      case Op::kInput:
      case Op::kLeaf:
      case Op::kParam:
        return;
      case Op::kMatMul: {
        const Tensor<S>&A = val(n.in[0]), &B = val(n.in[1]);
        CEMat<S> mg(g.data(), g.rows(), g.last());
        if (Tensor<S>* da = sink(n, 0)) {
          CEMat<S> mb(B.data(), B.dim(0), B.dim(1));
          EMat<S> md(da->data(), da->rows(), da->last());
          md.noalias() += mg * mb.transpose();
        }
        if (Tensor<S>* db = sink(n, 1)) {
          CEMat<S> ma(A.data(), A.rows(), A.last());
          EMat<S> md(db->data(), db->dim(0), db->dim(1));
          md.noalias() += ma.transpose() * mg;
        }
        return;
      }
      case Op::kMatMulNT: {
        const Tensor<S>&A = val(n.in[0]), &B = val(n.in[1]);
        CEMat<S> mg(g.data(), g.dim(0), g.dim(1));
        if (Tensor<S>* da = sink(n, 0)) {
          CEMat<S> mb(B.data(), B.dim(0), B.dim(1));
          EMat<S> md(da->data(), da->dim(0), da->dim(1));
          md.noalias() += mg * mb;
        }
        if (Tensor<S>* db = sink(n, 1)) {
          CEMat<S> ma(A.data(), A.dim(0), A.dim(1));
          EMat<S> md(db->data(), db->dim(0), db->dim(1));
          md.noalias() += mg.transpose() * ma;
        }
        return;
      }
      case Op::kBMM:
      case Op::kBMMNT: {
        const Tensor<S>&A = val(n.in[0]), &B = val(n.in[1]);
        const int64_t bs = A.dim(0), rows = A.dim(1), k = A.dim(2), m = n.val.dim(2);
        const bool tb = n.op == Op::kBMMNT;
        Tensor<S>* da = sink(n, 0);
        Tensor<S>* db = sink(n, 1);
        for (int64_t i = 0; i < bs; ++i) {
          CEMat<S> mg(g.data() + i * rows * m, rows, m);
          CEMat<S> ma(A.data() + i * rows * k, rows, k);
          if (tb) {
            CEMat<S> mb(B.data() + i * m * k, m, k);
            if (da) { EMat<S> d(da->data() + i * rows * k, rows, k); d.noalias() += mg * mb; }
            if (db) { EMat<S> d(db->data() + i * m * k, m, k); d.noalias() += mg.transpose() * ma; }
          } else {
            CEMat<S> mb(B.data() + i * k * m, k, m);
            if (da) { EMat<S> d(da->data() + i * rows * k, rows, k); d.noalias() += mg * mb.transpose(); }
            if (db) { EMat<S> d(db->data() + i * k * m, k, m); d.noalias() += ma.transpose() * mg; }
          }
        }
        return;
      }
      case Op::kAdd: {
        if (Tensor<S>* da = sink(n, 0)) for (int64_t i = 0; i < g.numel(); ++i) (*da)[i] += g[i];
        if (Tensor<S>* db = sink(n, 1)) for (int64_t i = 0; i < g.numel(); ++i) (*db)[i] += g[i];
        return;
      }
      case Op::kSub: {
        if (Tensor<S>* da = sink(n, 0)) for (int64_t i = 0; i < g.numel(); ++i) (*da)[i] += g[i];
        if (Tensor<S>* db = sink(n, 1)) for (int64_t i = 0; i < g.numel(); ++i) (*db)[i] -= g[i];
        return;
      }
      case Op::kMul: {
        const Tensor<S>&A = val(n.in[0]), &B = val(n.in[1]);
        if (Tensor<S>* da = sink(n, 0)) for (int64_t i = 0; i < g.numel(); ++i) (*da)[i] += g[i] * B[i];
        if (Tensor<S>* db = sink(n, 1)) for (int64_t i = 0; i < g.numel(); ++i) (*db)[i] += g[i] * A[i];
        return;
      }
      case Op::kAddBias: {
        const int64_t rows = g.rows(), m = g.last();
        if (Tensor<S>* dx = sink(n, 0)) for (int64_t i = 0; i < g.numel(); ++i) (*dx)[i] += g[i];
        if (Tensor<S>* db = sink(n, 1)) {
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < m; ++j) (*db)[j] += g[r * m + j];
        }
        return;
      }
      case Op::kAddRows: {
        const int64_t bs = g.dim(0), t = g.dim(1), w = g.dim(2);
        if (Tensor<S>* dx = sink(n, 0)) for (int64_t i = 0; i < g.numel(); ++i) (*dx)[i] += g[i];
        if (Tensor<S>* de = sink(n, 1)) {
          for (int64_t b = 0; b < bs; ++b)
            for (int64_t i = 0; i < t; ++i)
              for (int64_t j = 0; j < w; ++j) (*de)[b * w + j] += g[(b * t + i) * w + j];
        }
        return;
      }
      case Op::kAddBroadcast0:
      case Op::kAddScalar:
      case Op::kReshape: {
        if (Tensor<S>* dx = sink(n, 0)) for (int64_t i = 0; i < g.numel(); ++i) (*dx)[i] += g[i];
        return;
      }
      case Op::kScale: {
        if (Tensor<S>* dx = sink(n, 0))
          for (int64_t i = 0; i < g.numel(); ++i) (*dx)[i] += static_cast<S>(static_cast<double>(g[i]) * n.c0);
        return;
      }
      case Op::kRowsScale: {
        if (Tensor<S>* dx = sink(n, 0)) {
          const int64_t b = g.dim(0), inner = g.numel() / b;
          for (int64_t i = 0; i < b; ++i)
            for (int64_t j = 0; j < inner; ++j) (*dx)[i * inner + j] += g[i * inner + j] * n.aux[i];
        }
        return;
      }
      case Op::kMulConst: {
        if (Tensor<S>* dx = sink(n, 0)) for (int64_t i = 0; i < g.numel(); ++i) (*dx)[i] += g[i] * n.aux[i];
        return;
      }
      case Op::kRelu: {
        const Tensor<S>& X = val(n.in[0]);
        if (Tensor<S>* dx = sink(n, 0))
          for (int64_t i = 0; i < g.numel(); ++i) (*dx)[i] += X[i] > S(0) ? g[i] : S(0);
        return;
      }
      case Op::kGelu: {
        const Tensor<S>& X = val(n.in[0]);
        if (Tensor<S>* dx = sink(n, 0)) {
          for (int64_t i = 0; i < g.numel(); ++i) {
            const double v = static_cast<double>(X[i]);
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            (*dx)[i] += static_cast<S>(static_cast<double>(g[i]) * (cdf + v * pdf));
          }
        }
        return;
      }
      case Op::kExp: {
        if (Tensor<S>* dx = sink(n, 0)) for (int64_t i = 0; i < g.numel(); ++i) (*dx)[i] += g[i] * n.val[i];
        return;
      }
      case Op::kLog: {
        const Tensor<S>& X = val(n.in[0]);
        if (Tensor<S>* dx = sink(n, 0)) for (int64_t i = 0; i < g.numel(); ++i) (*dx)[i] += g[i] / X[i];
        return;
      }
      case Op::kSquare: {
        const Tensor<S>& X = val(n.in[0]);
        if (Tensor<S>* dx = sink(n, 0)) for (int64_t i = 0; i < g.numel(); ++i) (*dx)[i] += S(2) * g[i] * X[i];
        return;
      }
      case Op::kClamp: {
        const Tensor<S>& X = val(n.in[0]);
        if (Tensor<S>* dx = sink(n, 0)) {
          for (int64_t i = 0; i < g.numel(); ++i) {
            const double v = static_cast<double>(X[i]);
            if (v > n.c0 && v < n.c1) (*dx)[i] += g[i];
          }
        }
        return;
      }
      case Op::kLayerNorm: {
        const Tensor<S>& G = val(n.in[1]);
        const Tensor<S>& xhat = n.aux;
        const Tensor<S>& rstd = n.aux2;
        const int64_t rows = g.rows(), m = g.last();
        Tensor<S>* dx = sink(n, 0);
        Tensor<S>* dg = sink(n, 1);
        Tensor<S>* db = sink(n, 2);
        for (int64_t r = 0; r < rows; ++r) {
          double sum_dh = 0, sum_dh_xhat = 0;
          for (int64_t j = 0; j < m; ++j) {
            const double dh = static_cast<double>(g[r * m + j]) * static_cast<double>(G[j]);
            sum_dh += dh;
            sum_dh_xhat += dh * static_cast<double>(xhat[r * m + j]);
          }
          const double inv_m = 1.0 / static_cast<double>(m);
          for (int64_t j = 0; j < m; ++j) {
            const double gj = static_cast<double>(g[r * m + j]);
            const double h = static_cast<double>(xhat[r * m + j]);
            if (dx) {
              const double dh = gj * static_cast<double>(G[j]);
              (*dx)[r * m + j] += static_cast<S>(static_cast<double>(rstd[r]) *
                                                  (dh - inv_m * sum_dh - h * inv_m * sum_dh_xhat));
            }
            if (dg) (*dg)[j] += static_cast<S>(gj * h);
            if (db) (*db)[j] += g[r * m + j];
          }
        }
        return;
      }
      case Op::kSoftmax: {
        const Tensor<S>& Y = n.val;
        if (Tensor<S>* dx = sink(n, 0)) {
          const int64_t rows = g.rows(), m = g.last();
          for (int64_t r = 0; r < rows; ++r) {
            double dot = 0;
            for (int64_t j = 0; j < m; ++j) dot += static_cast<double>(g[r * m + j]) * static_cast<double>(Y[r * m + j]);
            for (int64_t j = 0; j < m; ++j)
              (*dx)[r * m + j] += static_cast<S>(static_cast<double>(Y[r * m + j]) *
                                                  (static_cast<double>(g[r * m + j]) - dot));
          }
        }
        return;
      }
      case Op::kLogSumExp: {
        const Tensor<S>& X = val(n.in[0]);
        if (Tensor<S>* dx = sink(n, 0)) {
          const int64_t rows = X.rows(), m = X.last();
          for (int64_t r = 0; r < rows; ++r) {
            const double y = static_cast<double>(n.val[r]);
            for (int64_t j = 0; j < m; ++j)
              (*dx)[r * m + j] += static_cast<S>(static_cast<double>(g[r]) *
                                                  std::exp(static_cast<double>(X[r * m + j]) - y));
          }
        }
        return;
      }
      case Op::kL2Normalize: {
        const Tensor<S>& Y = n.val;
        const Tensor<S>& norms = n.aux;
        if (Tensor<S>* dx = sink(n, 0)) {
          const int64_t rows = g.rows(), m = g.last();
          for (int64_t r = 0; r < rows; ++r) {
            double dot = 0;
            for (int64_t j = 0; j < m; ++j) dot += static_cast<double>(g[r * m + j]) * static_cast<double>(Y[r * m + j]);
            for (int64_t j = 0; j < m; ++j)
              (*dx)[r * m + j] += static_cast<S>((static_cast<double>(g[r * m + j]) -
                                                   static_cast<double>(Y[r * m + j]) * dot) /
                                                  static_cast<double>(norms[r]));
          }
        }
        return;
      }
      case Op::kSum: {
        if (Tensor<S>* dx = sink(n, 0)) for (int64_t i = 0; i < dx->numel(); ++i) (*dx)[i] += g[0];
        return;
      }
      case Op::kMean: {
        if (Tensor<S>* dx = sink(n, 0)) {
          const S s = static_cast<S>(static_cast<double>(g[0]) / static_cast<double>(dx->numel()));
          for (int64_t i = 0; i < dx->numel(); ++i) (*dx)[i] += s;
        }
        return;
      }
      case Op::kRowSum: {
        if (Tensor<S>* dx = sink(n, 0)) {
          const int64_t rows = dx->rows(), m = dx->last();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < m; ++j) (*dx)[r * m + j] += g[r];
        }
        return;
      }
      case Op::kMeanPool: {
        if (Tensor<S>* dx = sink(n, 0)) {
          const int64_t b = dx->dim(0), t = dx->dim(1), w = dx->dim(2), group = n.k, to = t / group;
          for (int64_t i = 0; i < b; ++i)
            for (int64_t gi = 0; gi < to; ++gi)
              for (int64_t u = 0; u < group; ++u)
                for (int64_t j = 0; j < w; ++j)
                  (*dx)[(i * t + gi * group + u) * w + j] +=
                      static_cast<S>(static_cast<double>(g[(i * to + gi) * w + j]) / static_cast<double>(group));
        }
        return;
      }
      case Op::kRepeatTokens: {
        if (Tensor<S>* dx = sink(n, 0)) {
          const int64_t b = dx->dim(0), t = dx->dim(1), w = dx->dim(2), f = n.k;
          for (int64_t i = 0; i < b; ++i)
            for (int64_t gi = 0; gi < t; ++gi)
              for (int64_t u = 0; u < f; ++u)
                for (int64_t j = 0; j < w; ++j) (*dx)[(i * t + gi) * w + j] += g[(i * t * f + gi * f + u) * w + j];
        }
        return;
      }
      case Op::kConcat: {
        const Tensor<S>&A = val(n.in[0]), &B = val(n.in[1]);
        const int64_t rows = A.rows(), ma = A.last(), mb = B.last();
        if (Tensor<S>* da = sink(n, 0)) {
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < ma; ++j) (*da)[r * ma + j] += g[r * (ma + mb) + j];
        }
        if (Tensor<S>* db = sink(n, 1)) {
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < mb; ++j) (*db)[r * mb + j] += g[r * (ma + mb) + ma + j];
        }
        return;
      }
      case Op::kSplitHeads: {
        if (Tensor<S>* dx = sink(n, 0)) {
          const int64_t heads = n.k, b = dx->dim(0), t = dx->dim(1), w = dx->dim(2), dh = w / heads;
          for (int64_t i = 0; i < b; ++i)
            for (int64_t h = 0; h < heads; ++h)
              for (int64_t u = 0; u < t; ++u)
                for (int64_t j = 0; j < dh; ++j)
                  (*dx)[(i * t + u) * w + h * dh + j] += g[((i * heads + h) * t + u) * dh + j];
        }
        return;
      }
      case Op::kMergeHeads: {
        if (Tensor<S>* dx = sink(n, 0)) {
          const int64_t heads = n.k, bh = dx->dim(0), t = dx->dim(1), dh = dx->dim(2), b = bh / heads, w = heads * dh;
          for (int64_t i = 0; i < b; ++i)
            for (int64_t h = 0; h < heads; ++h)
              for (int64_t u = 0; u < t; ++u)
                for (int64_t j = 0; j < dh; ++j)
                  (*dx)[((i * heads + h) * t + u) * dh + j] += g[(i * t + u) * w + h * dh + j];
        }
        return;
      }
    }
    (void)id;
  }

  std::vector<NodeT> nodes_;
  ParamStore<S>* params_;
  std::map<std::string, Id> param_ids_;
  std::map<std::string, Tensor<S>> param_grads_;
  bool backward_done_ = false;
};

}  // namespace t2sd
