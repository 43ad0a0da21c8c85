#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xlt/random.hpp"
#include "xlt/tensor.hpp"

namespace xlt {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of primitive applications.
///
/// Nodes are appended in execution order, so every input of node i has an
/// index below i and a single reverse sweep computes all gradients. Leaves
/// created with param() refer to the Parameter's storage instead of copying it.
class Tape {
 public:
  struct Node;
  using BackwardFn = std::function<void(Tape&, const Node&)>;

  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    const Parameter* param = nullptr;
    const char* op = "leaf";
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor grad;

    const Tensor& value() const { return ref ? *ref : owned; }
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  /// Leaf owning its value; receives a gradient when value.requires_grad.
  Var leaf(Tensor value) {
    Node n;
    n.requires_grad = grad_enabled_ && value.requires_grad;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor value) {
    value.requires_grad = false;
    return leaf(std::move(value));
  }

  /// Leaf aliasing a parameter. The parameter must outlive the tape.
  Var param(const Parameter& p) {
    Node n;
    n.ref = &p.value;
    n.param = &p;
    n.requires_grad = grad_enabled_ && p.value.requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Appends the result of a primitive. Non-finite output is a contract
  /// violation of the primitive and is reported immediately.
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    if (!value.all_finite())
      throw std::domain_error(std::string(op) + ": produced a non-finite value");
    Node n;
    n.op = op;
    n.owned = std::move(value);
    for (auto i : inputs)
      if (nodes_.at(i).requires_grad) n.requires_grad = true;
    if (n.requires_grad) {
      n.inputs = std::move(inputs);
      n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Gradient accumulator for node id, allocated as zeros on first use.
  Tensor& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor(n.value().shape, 0.0);
    return n.grad;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Reverse sweep from a scalar loss. Returns the gradient of every
  /// parameter leaf on the tape; leaves that did not feed the loss get zeros.
  std::unordered_map<const Parameter*, Tensor> backward(Var loss) {
    const Node& root = nodes_.at(loss.id());
    if (!root.value().is_scalar())
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(root.value().shape));
    for (auto& n : nodes_) n.grad = Tensor();
    if (root.requires_grad) {
      grad_slot(loss.id()).data[0] = 1.0;
      for (std::size_t i = loss.id() + 1; i-- > 0;) {
        const Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.data.empty() || !n.backward) continue;
        n.backward(*this, n);
      }
    }
    std::unordered_map<const Parameter*, Tensor> grads;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (!n.param || !n.requires_grad) continue;
      auto [it, inserted] = grads.try_emplace(n.param, Tensor(n.value().shape, 0.0));
      if (!n.grad.data.empty())
        for (std::size_t k = 0; k < n.grad.data.size(); ++k) it->second.data[k] += n.grad.data[k];
    }
    backward_done_ = true;
    return grads;
  }

  /// Gradient of a node after backward(); zeros when it did not participate.
  Tensor grad(Var v) const {
    if (!backward_done_) throw std::logic_error("grad: backward() has not been run on this tape");
    const Node& n = nodes_.at(v.id());
    if (n.grad.data.empty()) return Tensor(n.value().shape, 0.0);
    return n.grad;
  }

 private:
  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value(); }
inline bool Var::requires_grad() const { return tape_->needs_grad(id_); }

namespace detail {

inline void require_rank2(std::string_view op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape));
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline void axpy(Tensor& dst, const Tensor& src, double alpha = 1.0) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += alpha * src.data[i];
}

}  // namespace detail

enum class Transpose { kNone, kSecond };

/// a[m,k] x b[k,n], or a[m,k] x b[n,k]^T with Transpose::kSecond.
inline Var matmul(Var a, Var b, Transpose tb = Transpose::kNone) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2("matmul", av);
  detail::require_rank2("matmul", bv);
  const bool bt = tb == Transpose::kSecond;
  const std::size_t m = av.shape[0], k = av.shape[1];
  const std::size_t bk = bt ? bv.shape[1] : bv.shape[0];
  const std::size_t n = bt ? bv.shape[0] : bv.shape[1];
  if (k != bk) throw shape_mismatch("matmul", av.shape, bv.shape);
  Tensor out({m, n});
  if (bt)
    detail::gemm_nt(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  else
    detail::gemm_nn(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {ia, ib}, [=](Tape& t, const Tape::Node& self) {
    const Tensor& g = self.grad;
    const Tensor& A = t.node(ia).value();
    const Tensor& B = t.node(ib).value();
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad_slot(ia);
      if (bt)
        detail::gemm_nn(g.data.data(), B.data.data(), ga.data.data(), m, n, k);
      else
        detail::gemm_nt(g.data.data(), B.data.data(), ga.data.data(), m, n, k);
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_slot(ib);
      if (bt)
        detail::gemm_tn(g.data.data(), A.data.data(), gb.data.data(), n, m, k);
      else
        detail::gemm_tn(A.data.data(), g.data.data(), gb.data.data(), k, m, n);
    }
  });
}

/// Elementwise sum. b may also be a vector matching a's last dimension, in
/// which case it is broadcast over the rows of a.
inline Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool same = av.shape == bv.shape || (av.is_scalar() && bv.is_scalar());
  const bool bcast = !same && bv.rank() == 1 && av.rank() == 2 && bv.shape[0] == av.shape[1];
  if (!same && !bcast) throw shape_mismatch("add", av.shape, bv.shape);
  Tensor out = av;
  out.requires_grad = false;
  if (same) {
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  } else {
    const std::size_t n = bv.size();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i % n];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {ia, ib}, [=](Tape& t, const Tape::Node& self) {
    const Tensor& g = self.grad;
    if (t.needs_grad(ia)) detail::axpy(t.grad_slot(ia), g);
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_slot(ib);
      if (same) {
        detail::axpy(gb, g);
      } else {
        const std::size_t n = gb.size();
        for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i % n] += g.data[i];
      }
    }
  });
}

inline Var scale(Var a, double factor) {
  Tensor out = a.value();
  out.requires_grad = false;
  for (auto& v : out.data) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record("scale", std::move(out), {ia}, [=](Tape& t, const Tape::Node& self) {
    detail::axpy(t.grad_slot(ia), self.grad, factor);
  });
}

/// Sum of all entries, as a scalar.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor::scalar(s), {ia}, [=](Tape& t, const Tape::Node& self) {
    const double g = self.grad.data[0];
    for (auto& v : t.grad_slot(ia).data) v += g;
  });
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_derivative(double x) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

/// Exact (erf-based) GELU.
inline Var gelu(Var a) {
  Tensor out = a.value();
  out.requires_grad = false;
  for (auto& v : out.data) v = gelu_value(v);
  const std::size_t ia = a.id();
  return a.tape().record("gelu", std::move(out), {ia}, [=](Tape& t, const Tape::Node& self) {
    const Tensor& x = t.node(ia).value();
    Tensor& gx = t.grad_slot(ia);
    for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += self.grad.data[i] * gelu_derivative(x.data[i]);
  });
}

inline Var tanh(Var a) {
  Tensor out = a.value();
  out.requires_grad = false;
  for (auto& v : out.data) v = std::tanh(v);
  const std::size_t ia = a.id();
  return a.tape().record("tanh", std::move(out), {ia}, [=](Tape& t, const Tape::Node& self) {
    const Tensor& y = self.value();
    Tensor& gx = t.grad_slot(ia);
    for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += self.grad.data[i] * (1.0 - y.data[i] * y.data[i]);
  });
}

/// Numerically stable softmax of one row, written into out.
inline void softmax_row(std::span<const double> in, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : in) mx = std::max(mx, v);
  double total = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
}

/// Softmax over the last axis.
inline Var softmax(Var a) {
  const Tensor& x = a.value();
  if (x.size() == 0 || x.cols() == 0) throw ShapeError("softmax: empty reduction axis");
  Tensor out = x;
  out.requires_grad = false;
  const std::size_t n = x.cols(), m = x.size() / n;
  for (std::size_t r = 0; r < m; ++r)
    softmax_row({x.data.data() + r * n, n}, {out.data.data() + r * n, n});
  const std::size_t ia = a.id();
  return a.tape().record("softmax", std::move(out), {ia}, [=](Tape& t, const Tape::Node& self) {
    const Tensor& y = self.value();
    const Tensor& g = self.grad;
    Tensor& gx = t.grad_slot(ia);
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g.data[r * n + j] * y.data[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx.data[r * n + j] += y.data[r * n + j] * (g.data[r * n + j] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-12;

/// Normalizes each row of x to zero mean and unit (population) variance,
/// then applies per-column gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols(), m = xv.size() / n;
  if (gain.value().shape != Shape{n}) throw shape_mismatch("layer_norm", xv.shape, gain.value().shape);
  if (bias.value().shape != Shape{n}) throw shape_mismatch("layer_norm", xv.shape, bias.value().shape);
  Tensor xhat(xv.shape);
  std::vector<double> inv_std(m);
  Tensor out(xv.shape);
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mean) * inv_std[r];
      xhat.data[r * n + j] = h;
      out.data[r * n + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      "layer_norm", std::move(out), {ix, ig, ib},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tape::Node& self) {
        const Tensor& g = self.grad;
        const auto& gv = t.node(ig).value().data;
        if (t.needs_grad(ig)) {
          Tensor& gg = t.grad_slot(ig);
          for (std::size_t i = 0; i < g.size(); ++i) gg.data[i % n] += g.data[i] * xhat.data[i];
        }
        if (t.needs_grad(ib)) {
          Tensor& gb = t.grad_slot(ib);
          for (std::size_t i = 0; i < g.size(); ++i) gb.data[i % n] += g.data[i];
        }
        if (t.needs_grad(ix)) {
          Tensor& gx = t.grad_slot(ix);
          const double dn = static_cast<double>(n);
          for (std::size_t r = 0; r < m; ++r) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g.data[r * n + j] * gv[j];
              sum_d += d;
              sum_dx += d * xhat.data[r * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g.data[r * n + j] * gv[j];
              gx.data[r * n + j] += inv_std[r] / dn * (dn * d - sum_d - xhat.data[r * n + j] * sum_dx);
            }
          }
        }
      });
}

/// Gathers rows of table[V,H] for each id.
inline Var embedding(Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = table.value();
  detail::require_rank2("embedding", tv);
  const std::size_t vocab = tv.shape[0], h = tv.shape[1];
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  Tensor out({ids.size(), h});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(vocab) + " rows");
    std::copy_n(tv.data.data() + ids[i] * h, h, out.data.data() + i * h);
  }
  const std::size_t it = table.id();
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return table.tape().record("embedding", std::move(out), {it},
                             [=, saved = std::move(saved)](Tape& t, const Tape::Node& self) {
                               Tensor& gt = t.grad_slot(it);
                               for (std::size_t i = 0; i < saved.size(); ++i)
                                 for (std::size_t j = 0; j < h; ++j)
                                   gt.data[saved[i] * h + j] += self.grad.data[i * h + j];
                             });
}

/// Gathers selected rows of a matrix.
inline Var select_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  detail::require_rank2("select_rows", xv);
  const std::size_t m = xv.shape[0], n = xv.shape[1];
  if (rows.empty()) throw ShapeError("select_rows: empty row list");
  Tensor out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m)
      throw std::out_of_range("select_rows: row " + std::to_string(rows[i]) + " outside matrix of " +
                              std::to_string(m) + " rows");
    std::copy_n(xv.data.data() + rows[i] * n, n, out.data.data() + i * n);
  }
  const std::size_t ix = x.id();
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return x.tape().record("select_rows", std::move(out), {ix},
                         [=, saved = std::move(saved)](Tape& t, const Tape::Node& self) {
                           Tensor& gx = t.grad_slot(ix);
                           for (std::size_t i = 0; i < saved.size(); ++i)
                             for (std::size_t j = 0; j < n; ++j) gx.data[saved[i] * n + j] += self.grad.data[i * n + j];
                         });
}

/// Key for the counter-based dropout mask. Identical keys give identical masks.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t tensor_id = 0;
};

/// Inverted dropout. Identity when train is false or rate is zero.
inline Var dropout(Var x, double rate, DropoutKey key, bool train) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0) return x;
  const Tensor& xv = x.value();
  std::vector<double> mask(xv.size());
  const double keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = counter_uniform(key.seed, key.step, key.tensor_id, i) >= rate ? keep : 0.0;
  Tensor out = xv;
  out.requires_grad = false;
  for (std::size_t i = 0; i < mask.size(); ++i) out.data[i] *= mask[i];
  const std::size_t ix = x.id();
  return x.tape().record("dropout", std::move(out), {ix},
                         [=, mask = std::move(mask)](Tape& t, const Tape::Node& self) {
                           Tensor& gx = t.grad_slot(ix);
                           for (std::size_t i = 0; i < mask.size(); ++i) gx.data[i] += self.grad.data[i] * mask[i];
                         });
}

/// Multi-head scaled dot-product attention over q, k, v of shape [T, H].
///
/// The hidden dimension is split into num_heads contiguous slices. Keys whose
/// key_mask entry is zero receive an additive -inf score, so they get exactly
/// zero weight; at least one key must be unmasked.
inline Var attention(Var q, Var k, Var v, std::size_t num_heads, std::span<const std::uint8_t> key_mask) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  detail::require_rank2("attention", qv);
  if (kv.shape != qv.shape) throw shape_mismatch("attention", qv.shape, kv.shape);
  if (vv.shape != qv.shape) throw shape_mismatch("attention", qv.shape, vv.shape);
  const std::size_t T = qv.shape[0], H = qv.shape[1];
  if (num_heads == 0 || H % num_heads != 0)
    throw ShapeError("attention: hidden size " + std::to_string(H) + " not divisible by " +
                     std::to_string(num_heads) + " heads");
  if (key_mask.size() != T)
    throw shape_mismatch("attention", qv.shape, Shape{key_mask.size()});
  if (std::none_of(key_mask.begin(), key_mask.end(), [](auto m) { return m != 0; }))
    throw std::invalid_argument("attention: every key is masked");
  const std::size_t d = H / num_heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
  // probs[h][i][j]
  std::vector<double> probs(num_heads * T * T, 0.0);
  Tensor out({T, H});
  std::vector<double> scores(T);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t off = h * d;
    for (std::size_t i = 0; i < T; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < T; ++j) {
        if (!mask[j]) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += qv.data[i * H + off + c] * kv.data[j * H + off + c];
        scores[j] = s * inv_sqrt_d;
        mx = std::max(mx, scores[j]);
      }
      double total = 0.0;
      double* p = probs.data() + (h * T + i) * T;
      for (std::size_t j = 0; j < T; ++j) {
        if (!mask[j]) continue;
        p[j] = std::exp(scores[j] - mx);
        total += p[j];
      }
      for (std::size_t j = 0; j < T; ++j) {
        if (!mask[j]) continue;
        p[j] /= total;
        for (std::size_t c = 0; c < d; ++c) out.data[i * H + off + c] += p[j] * vv.data[j * H + off + c];
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      "attention", std::move(out), {iq, ik, iv},
      [=, probs = std::move(probs), mask = std::move(mask)](Tape& t, const Tape::Node& self) {
        const Tensor& g = self.grad;
        const Tensor& Q = t.node(iq).value();
        const Tensor& K = t.node(ik).value();
        const Tensor& V = t.node(iv).value();
        Tensor gq({T, H}), gk({T, H}), gv({T, H});
        std::vector<double> dp(T), ds(T);
        for (std::size_t h = 0; h < num_heads; ++h) {
          const std::size_t off = h * d;
          for (std::size_t i = 0; i < T; ++i) {
            const double* p = probs.data() + (h * T + i) * T;
            double dot = 0.0;
            for (std::size_t j = 0; j < T; ++j) {
              if (!mask[j]) continue;
              double s = 0.0;
              for (std::size_t c = 0; c < d; ++c) {
                s += g.data[i * H + off + c] * V.data[j * H + off + c];
                gv.data[j * H + off + c] += p[j] * g.data[i * H + off + c];
              }
              dp[j] = s;
              dot += s * p[j];
            }
            for (std::size_t j = 0; j < T; ++j) {
              if (!mask[j]) continue;
              ds[j] = p[j] * (dp[j] - dot) * inv_sqrt_d;
              for (std::size_t c = 0; c < d; ++c) {
                gq.data[i * H + off + c] += ds[j] * K.data[j * H + off + c];
                gk.data[j * H + off + c] += ds[j] * Q.data[i * H + off + c];
              }
            }
          }
        }
        if (t.needs_grad(iq)) detail::axpy(t.grad_slot(iq), gq);
        if (t.needs_grad(ik)) detail::axpy(t.grad_slot(ik), gk);
        if (t.needs_grad(iv)) detail::axpy(t.grad_slot(iv), gv);
      });
}

/// Mean negative log-likelihood of labels under softmax(logits), logits [N, C].
inline Var cross_entropy(Var logits, std::span<const std::int32_t> labels) {
  const Tensor& z = logits.value();
  detail::require_rank2("cross_entropy", z);
  const std::size_t N = z.shape[0], C = z.shape[1];
  if (labels.size() != N) throw shape_mismatch("cross_entropy", z.shape, Shape{labels.size()});
  Tensor probs(z.shape);
  double loss = 0.0;
  for (std::size_t r = 0; r < N; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= C)
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) + " outside " +
                              std::to_string(C) + " classes");
    const double* row = z.data.data() + r * C;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, row[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) total += std::exp(row[c] - mx);
    const double log_total = std::log(total) + mx;
    loss += log_total - row[labels[r]];
    for (std::size_t c = 0; c < C; ++c) probs.data[r * C + c] = std::exp(row[c] - log_total);
  }
  loss /= static_cast<double>(N);
  const std::size_t iz = logits.id();
  std::vector<std::int32_t> saved(labels.begin(), labels.end());
  return logits.tape().record(
      "cross_entropy", Tensor::scalar(loss), {iz},
      [=, probs = std::move(probs), saved = std::move(saved)](Tape& t, const Tape::Node& self) {
        const double g = self.grad.data[0] / static_cast<double>(N);
        Tensor& gz = t.grad_slot(iz);
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t c = 0; c < C; ++c)
            gz.data[r * C + c] += g * (probs.data[r * C + c] - (static_cast<std::int32_t>(c) == saved[r] ? 1.0 : 0.0));
      });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

/// Max over coordinates of |analytic - central difference| / max(1e-8, |central difference|).
inline double relative_gradient_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / std::max(1e-8, std::abs(numeric[i])));
  return worst;
}

namespace detail {
inline void check_epsilon(double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3))
    throw std::invalid_argument("finite_difference_check: epsilon must lie in [1e-7, 1e-3]");
}
inline double scalar_output(Var out) {
  if (!out.value().is_scalar())
    throw ShapeError("finite_difference_check: function output has shape " + shape_str(out.shape()) +
                     ", expected a scalar");
  return out.value().data[0];
}
}  // namespace detail

/// Checks the tape gradient of fn at point against central differences.
inline double finite_difference_check(const std::function<Var(Tape&, Var)>& fn, const Tensor& point,
                                      double epsilon) {
  detail::check_epsilon(epsilon);
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor x = point;
    x.requires_grad = true;
    Var xv = tape.leaf(std::move(x));
    Var out = fn(tape, xv);
    detail::scalar_output(out);
    tape.backward(out);
    analytic = tape.grad(xv).data;
  }
  std::vector<double> numeric(point.size());
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + epsilon;
    Tape up(false);
    const double f_up = detail::scalar_output(fn(up, up.leaf(probe)));
    probe.data[i] = orig - epsilon;
    Tape down(false);
    const double f_down = detail::scalar_output(fn(down, down.leaf(probe)));
    probe.data[i] = orig;
    numeric[i] = (f_up - f_down) / (2.0 * epsilon);
  }
  return relative_gradient_error(analytic, numeric);
}

/// Same check over a set of parameters perturbed in place (restored on exit).
inline double finite_difference_check(const std::function<Var(Tape&)>& loss_fn, std::span<Parameter* const> params,
                                      double epsilon) {
  detail::check_epsilon(epsilon);
  std::vector<double> analytic, numeric;
  std::unordered_map<const Parameter*, Tensor> grads;
  {
    Tape tape;
    Var out = loss_fn(tape);
    detail::scalar_output(out);
    grads = tape.backward(out);
  }
  for (Parameter* p : params) {
    auto it = grads.find(p);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      analytic.push_back(it == grads.end() ? 0.0 : it->second.data[i]);
      const double orig = p->value.data[i];
      p->value.data[i] = orig + epsilon;
      Tape up(false);
      const double f_up = detail::scalar_output(loss_fn(up));
      p->value.data[i] = orig - epsilon;
      Tape down(false);
      const double f_down = detail::scalar_output(loss_fn(down));
      p->value.data[i] = orig;
      numeric.push_back((f_up - f_down) / (2.0 * epsilon));
    }
  }
  return relative_gradient_error(analytic, numeric);
}

}  // namespace xlt
