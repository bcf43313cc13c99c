#pragma once

// Reverse-mode tape over a small, closed set of dense primitives. Nodes are
// appended in evaluation order, so reverse index order is a valid reverse
// topological order and backward() visits every node at most once.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "olive/error.hpp"
#include "olive/tensor.hpp"

namespace olive {

template <class T>
class BasicTape;

/// Handle to a value recorded on a tape.
template <class T>
struct BasicVar {
  BasicTape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(id); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <class T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;
  using VarT = BasicVar<T>;
  using BackwardFn = std::function<void(BasicTape&, std::size_t)>;

  BasicTape() { nodes_.reserve(256); }
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  VarT leaf(TensorT value, bool requires_grad) {
    value.set_requires_grad(requires_grad);
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return {this, nodes_.size() - 1};
  }
  VarT param(TensorT value) { return leaf(std::move(value), true); }
  VarT constant(TensorT value) { return leaf(std::move(value), false); }

  /// Records an op output. The backward closure is kept only when some input
  /// participates in differentiation.
  VarT record(TensorT value, std::initializer_list<VarT> inputs, BackwardFn backward) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || nodes_[in.id].requires_grad;
    return record_impl(std::move(value), rg, std::move(backward));
  }
  VarT record(TensorT value, std::span<const VarT> inputs, BackwardFn backward) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || nodes_[in.id].requires_grad;
    return record_impl(std::move(value), rg, std::move(backward));
  }

  const TensorT& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(VarT v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Accumulation buffer for a node's gradient, zero-initialized on first use.
  TensorT& grad_buffer(std::size_t id) {
    auto& node = nodes_[id];
    if (node.grad.empty()) node.grad = TensorT(node.value.shape());
    return node.grad;
  }
  const TensorT& grad_of_output(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient of the last backward() target with respect to `v`; zeros when
  /// `v` did not influence it.
  TensorT grad(VarT v) const {
    const auto& node = nodes_[v.id];
    return node.grad.empty() ? TensorT(node.value.shape()) : node.grad;
  }

  void backward(VarT loss) {
    require(loss.tape == this, ErrorCode::Usage, "loss belongs to a different tape");
    require(nodes_[loss.id].value.size() == 1, ErrorCode::Usage,
            "backward() needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
    require(!backward_done_, ErrorCode::Usage, "backward() already ran on this tape");
    backward_done_ = true;
    grad_buffer(loss.id)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
      node.backward(*this, i);
    }
  }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  VarT record_impl(TensorT value, bool rg, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(backward) : BackwardFn{}});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;

namespace kernels {

// C (m x n) += A (m x k) * B (k x n)
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m x n) += A (m x k) * B^T, B stored n x k
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C (m x n) += A^T * B, A stored k x m, B stored k x n
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

template <class T>
BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  require(bv.rows() == k, ErrorCode::Dimension,
          "matmul inner dimensions disagree: " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
  BasicTensor<T> out({m, n});
  kernels::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    if (tape.requires_grad(a)) {
      kernels::gemm_nt(g.data(), tape.value(b.id).data(), tape.grad_buffer(a.id).data(), m, n, k);
    }
    if (tape.requires_grad(b)) {
      kernels::gemm_tn(tape.value(a.id).data(), g.data(), tape.grad_buffer(b.id).data(), m, k, n);
    }
  });
}

/// a (m x k) times the transpose of b (n x k).
template <class T>
BasicVar<T> matmul_nt(BasicVar<T> a, BasicVar<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  require(bv.cols() == k, ErrorCode::Dimension,
          "matmul_nt inner dimensions disagree: " + shape_str(av.shape()) + " * " + shape_str(bv.shape()) + "^T");
  BasicTensor<T> out({m, n});
  kernels::gemm_nt(av.data(), bv.data(), out.data(), m, k, n);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    if (tape.requires_grad(a)) {
      kernels::gemm_nn(g.data(), tape.value(b.id).data(), tape.grad_buffer(a.id).data(), m, n, k);
    }
    if (tape.requires_grad(b)) {
      kernels::gemm_tn(g.data(), tape.value(a.id).data(), tape.grad_buffer(b.id).data(), m, n, k);
    }
  });
}

/// Elementwise sum; `b` may also be a single row broadcast over the rows of `a`.
template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool same = av.shape() == bv.shape() || (av.size() == bv.size() && av.cols() == bv.cols());
  const bool row_broadcast = !same && bv.rows() == 1 && bv.cols() == av.cols();
  require(same || row_broadcast, ErrorCode::Dimension,
          "add shape mismatch: " + shape_str(av.shape()) + " + " + shape_str(bv.shape()));
  BasicTensor<T> out = av;
  out.set_requires_grad(false);
  const std::size_t cols = av.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += row_broadcast ? bv[i % cols] : bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b, row_broadcast, cols](BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    if (tape.requires_grad(a)) {
      auto& ga = tape.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tape.requires_grad(b)) {
      auto& gb = tape.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[row_broadcast ? i % cols : i] += g[i];
    }
  });
}

template <class T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.size() == bv.size() && av.cols() == bv.cols(), ErrorCode::Dimension,
          "mul shape mismatch: " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    const auto& av = tape.value(a.id);
    const auto& bv = tape.value(b.id);
    if (tape.requires_grad(a)) {
      auto& ga = tape.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(b)) {
      auto& gb = tape.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
BasicVar<T> scale(BasicVar<T> a, T factor) {
  BasicTensor<T> out(a.value().shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return a.tape->record(std::move(out), {a}, [a, factor](BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    auto& ga = tape.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <class T>
BasicVar<T> sum(BasicVar<T> a) {
  const auto& av = a.value();
  T acc = T(0);
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
  return a.tape->record(BasicTensor<T>({1}, std::vector<T>{acc}), {a}, [a](BasicTape<T>& tape, std::size_t self) {
    const T g = tape.grad_of_output(self)[0];
    auto& ga = tape.grad_buffer(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

/// GELU, tanh approximation.
template <class T>
BasicVar<T> gelu(BasicVar<T> a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  const auto& av = a.value();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = av[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
  }
  return a.tape->record(std::move(out), {a}, [a](BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    const auto& av = tape.value(a.id);
    auto& ga = tape.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = av[i];
      const T t = std::tanh(c * (x + k * x * x * x));
      const T dt = (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      ga[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * dt);
    }
  });
}

/// Softmax along `axis` of a matrix view (0 = down columns, 1 or -1 = across
/// rows). Max-subtracted for stability.
template <class T>
BasicVar<T> softmax(BasicVar<T> x, int axis = -1) {
  const auto& xv = x.value();
  require(axis == -1 || axis == 0 || axis == 1, ErrorCode::Dimension, "softmax axis must be -1, 0 or 1");
  require(xv.all_finite(), ErrorCode::Numeric, "softmax input is not finite");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  const bool along_rows = axis != 0;
  const std::size_t lanes = along_rows ? rows : cols;
  const std::size_t len = along_rows ? cols : rows;
  auto at = [&](std::size_t lane, std::size_t i) { return along_rows ? lane * cols + i : i * cols + lane; };

  BasicTensor<T> out(xv.shape());
  for (std::size_t lane = 0; lane < lanes; ++lane) {
    T mx = xv[at(lane, 0)];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xv[at(lane, i)]);
    T total = T(0);
    for (std::size_t i = 0; i < len; ++i) {
      const T e = std::exp(xv[at(lane, i)] - mx);
      out[at(lane, i)] = e;
      total += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[at(lane, i)] /= total;
  }
  return x.tape->record(std::move(out), {x}, [x, along_rows, rows, cols](BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    const auto& y = tape.value(self);
    auto& gx = tape.grad_buffer(x.id);
    const std::size_t lanes = along_rows ? rows : cols;
    const std::size_t len = along_rows ? cols : rows;
    auto at = [&](std::size_t lane, std::size_t i) { return along_rows ? lane * cols + i : i * cols + lane; };
    for (std::size_t lane = 0; lane < lanes; ++lane) {
      T dot = T(0);
      for (std::size_t i = 0; i < len; ++i) dot += g[at(lane, i)] * y[at(lane, i)];
      for (std::size_t i = 0; i < len; ++i) gx[at(lane, i)] += y[at(lane, i)] * (g[at(lane, i)] - dot);
    }
  });
}

/// Per-row normalization over the last axis followed by an affine map.
template <class T>
BasicVar<T> layer_norm(BasicVar<T> x, BasicVar<T> gamma, BasicVar<T> beta, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  require(gamma.value().size() == cols && beta.value().size() == cols, ErrorCode::Dimension,
          "layer_norm gamma/beta must match last dimension " + std::to_string(cols));
  BasicTensor<T> out(xv.shape());
  BasicTensor<T> xhat(xv.shape());
  std::vector<T> rstd(rows);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * cols;
    T mean = T(0);
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= T(cols);
    T var = T(0);
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (xr[c] - mean) * rstd[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](
                            BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    const auto& gv = tape.value(gamma.id);
    if (tape.requires_grad(beta)) {
      auto& gb = tape.grad_buffer(beta.id);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    }
    if (tape.requires_grad(gamma)) {
      auto& gg = tape.grad_buffer(gamma.id);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * xhat[r * cols + c];
    }
    if (tape.requires_grad(x)) {
      auto& gx = tape.grad_buffer(x.id);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_d = T(0), mean_dx = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
          const T d = g[r * cols + c] * gv[c];
          mean_d += d;
          mean_dx += d * xhat[r * cols + c];
        }
        mean_d /= T(cols);
        mean_dx /= T(cols);
        for (std::size_t c = 0; c < cols; ++c) {
          const T d = g[r * cols + c] * gv[c];
          gx[r * cols + c] += rstd[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
        }
      }
    }
  });
}

/// Gathers rows of `table` by id.
template <class T>
BasicVar<T> embedding(BasicVar<T> table, std::span<const int> ids) {
  const auto& tv = table.value();
  const std::size_t d = tv.cols();
  require(!ids.empty(), ErrorCode::Dimension, "embedding lookup needs at least one id");
  BasicTensor<T> out({ids.size(), d});
  std::vector<int> idv(ids.begin(), ids.end());
  for (std::size_t t = 0; t < idv.size(); ++t) {
    require(idv[t] >= 0 && static_cast<std::size_t>(idv[t]) < tv.rows(), ErrorCode::Dimension,
            "embedding id " + std::to_string(idv[t]) + " out of range " + std::to_string(tv.rows()));
    std::copy_n(tv.data() + static_cast<std::size_t>(idv[t]) * d, d, out.data() + t * d);
  }
  return table.tape->record(std::move(out), {table}, [table, d, idv = std::move(idv)](BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    auto& gt = tape.grad_buffer(table.id);
    for (std::size_t t = 0; t < idv.size(); ++t) {
      T* dst = gt.data() + static_cast<std::size_t>(idv[t]) * d;
      const T* src = g.data() + t * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

/// Mean negative log-likelihood over positions whose target is not
/// `ignore_index`.
template <class T>
BasicVar<T> cross_entropy(BasicVar<T> logits, std::span<const int> targets, int ignore_index = -100) {
  const auto& lv = logits.value();
  const std::size_t rows = lv.rows(), vocab = lv.cols();
  require(targets.size() == rows, ErrorCode::Dimension,
          "cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  std::vector<int> tv(targets.begin(), targets.end());
  std::size_t count = 0;
  for (int t : tv) {
    if (t == ignore_index) continue;
    require(t >= 0 && static_cast<std::size_t>(t) < vocab, ErrorCode::Domain,
            "cross_entropy target " + std::to_string(t) + " outside vocabulary");
    ++count;
  }
  require(count > 0, ErrorCode::Domain, "cross_entropy: every position is ignored");
  require(lv.all_finite(), ErrorCode::Numeric, "cross_entropy logits are not finite");

  BasicTensor<T> probs(lv.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* lr = lv.data() + r * vocab;
    T mx = lr[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, lr[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(lr[c] - mx));
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] = static_cast<T>(std::exp(static_cast<double>(lr[c] - mx)) / z);
    if (tv[r] != ignore_index) total += std::log(z) - static_cast<double>(lr[tv[r]] - mx);
  }
  const T loss = static_cast<T>(total / static_cast<double>(count));
  return logits.tape->record(BasicTensor<T>({1}, std::vector<T>{loss}), {logits},
                             [logits, vocab, count, ignore_index, tv = std::move(tv), probs = std::move(probs)](
                                 BasicTape<T>& tape, std::size_t self) {
    const T g = tape.grad_of_output(self)[0] / static_cast<T>(count);
    auto& gl = tape.grad_buffer(logits.id);
    for (std::size_t r = 0; r < tv.size(); ++r) {
      if (tv[r] == ignore_index) continue;
      for (std::size_t c = 0; c < vocab; ++c) {
        const T onehot = static_cast<int>(c) == tv[r] ? T(1) : T(0);
        gl[r * vocab + c] += g * (probs[r * vocab + c] - onehot);
      }
    }
  });
}

/// Multi-head scaled dot-product attention. q is T x D, k and v are S x D;
/// each head owns a contiguous D/heads column block. With `causal`, query
/// position t sees key positions <= t.
template <class T>
BasicVar<T> attention(BasicVar<T> q, BasicVar<T> k, BasicVar<T> v, std::size_t heads, bool causal) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  const std::size_t tq = qv.rows(), s = kv.rows(), dim = qv.cols();
  require(heads >= 1 && dim % heads == 0, ErrorCode::Dimension, "attention heads must divide model width");
  require(kv.cols() == dim && vv.cols() == dim && vv.rows() == s, ErrorCode::Dimension,
          "attention q/k/v widths or lengths disagree");
  require(!causal || tq <= s, ErrorCode::Dimension, "causal attention needs T <= S");
  const std::size_t dh = dim / heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));

  BasicTensor<T> out({tq, dim});
  BasicTensor<T> probs({heads * tq, s});  // per head, T x S
  std::vector<T> scores(s);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      const std::size_t visible = causal ? i + 1 : s;
      const T* qi = qv.data() + i * dim + off;
      T mx = T(0);
      for (std::size_t j = 0; j < visible; ++j) {
        const T* kj = kv.data() + j * dim + off;
        T acc = T(0);
        for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
        scores[j] = acc * inv;
        mx = j == 0 ? scores[j] : std::max(mx, scores[j]);
      }
      T total = T(0);
      for (std::size_t j = 0; j < visible; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        total += scores[j];
      }
      T* prow = probs.data() + (h * tq + i) * s;
      T* orow = out.data() + i * dim + off;
      for (std::size_t j = 0; j < visible; ++j) {
        const T p = scores[j] / total;
        prow[j] = p;
        const T* vj = vv.data() + j * dim + off;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vj[c];
      }
    }
  }
  require(out.all_finite(), ErrorCode::Numeric, "attention produced non-finite values");
  return q.tape->record(std::move(out), {q, k, v},
                        [q, k, v, heads, causal, tq, s, dim, dh, inv, probs = std::move(probs)](
                            BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    const auto& qv = tape.value(q.id);
    const auto& kv = tape.value(k.id);
    const auto& vv = tape.value(v.id);
    const bool gq = tape.requires_grad(q), gk = tape.requires_grad(k), gv = tape.requires_grad(v);
    T* dq = gq ? tape.grad_buffer(q.id).data() : nullptr;
    T* dk = gk ? tape.grad_buffer(k.id).data() : nullptr;
    T* dv = gv ? tape.grad_buffer(v.id).data() : nullptr;
    std::vector<T> dp(s);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < tq; ++i) {
        const std::size_t visible = causal ? i + 1 : s;
        const T* prow = probs.data() + (h * tq + i) * s;
        const T* gi = g.data() + i * dim + off;
        T dot = T(0);
        for (std::size_t j = 0; j < visible; ++j) {
          const T* vj = vv.data() + j * dim + off;
          T acc = T(0);
          for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
          dp[j] = acc;
          dot += acc * prow[j];
          if (dv) {
            T* dvj = dv + j * dim + off;
            for (std::size_t c = 0; c < dh; ++c) dvj[c] += prow[j] * gi[c];
          }
        }
        const T* qi = qv.data() + i * dim + off;
        for (std::size_t j = 0; j < visible; ++j) {
          const T ds = prow[j] * (dp[j] - dot) * inv;
          if (ds == T(0)) continue;
          const T* kj = kv.data() + j * dim + off;
          if (dq) {
            T* dqi = dq + i * dim + off;
            for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
          }
          if (dk) {
            T* dkj = dk + j * dim + off;
            for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
          }
        }
      }
    }
  });
}

template <class T>
BasicVar<T> concat_rows(std::span<const BasicVar<T>> parts) {
  require(!parts.empty(), ErrorCode::Dimension, "concat_rows needs at least one input");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, ErrorCode::Dimension, "concat_rows width mismatch");
    rows += p.rows();
  }
  BasicTensor<T> out({rows, cols});
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (node id, row offset)
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    std::copy(pv.values().begin(), pv.values().end(), out.data() + offset * cols);
    spans.emplace_back(p.id, offset);
    offset += p.rows();
  }
  return parts.front().tape->record(std::move(out), parts, [cols, spans = std::move(spans)](BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    for (const auto& [id, off] : spans) {
      if (!tape.requires_grad(id)) continue;
      auto& gp = tape.grad_buffer(id);
      const T* src = g.data() + off * cols;
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
    }
  });
}

template <class T>
BasicVar<T> concat_rows(std::initializer_list<BasicVar<T>> parts) {
  return concat_rows(std::span<const BasicVar<T>>(parts.begin(), parts.size()));
}

template <class T>
BasicVar<T> slice_rows(BasicVar<T> x, std::size_t begin, std::size_t count) {
  const auto& xv = x.value();
  require(count >= 1 && begin + count <= xv.rows(), ErrorCode::Dimension,
          "slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ") outside " +
              std::to_string(xv.rows()) + " rows");
  const std::size_t cols = xv.cols();
  BasicTensor<T> out({count, cols});
  std::copy_n(xv.data() + begin * cols, count * cols, out.data());
  return x.tape->record(std::move(out), {x}, [x, begin, cols](BasicTape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of_output(self);
    T* dst = tape.grad_buffer(x.id).data() + begin * cols;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

}  // namespace olive
