#pragma once

// Dense float64 tensors with reverse-mode autodiff on an explicit tape.
// Matrix products go through OpenBLAS; everything else is plain loops.
// The op surface is deliberately small: exactly what the energy model,
// its dynamics, and the training loop need.

#include <cblas.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "nrgpt/common.hpp"

extern "C" void openblas_set_num_threads(int);

namespace nrgpt {

inline void set_blas_threads(int n) { openblas_set_num_threads(n); }

using Buffer = std::vector<double>;
using BufferPtr = std::shared_ptr<Buffer>;

class Tape;

struct Tensor {
  std::vector<int> shape;
  BufferPtr data;
  Tape* tape = nullptr;  // non-owning; null for constants
  int node = -1;         // handle into the tape, -1 when untracked

  Tensor() = default;
  Tensor(std::vector<int> shape_, BufferPtr data_) : shape(std::move(shape_)), data(std::move(data_)) {}

  static Tensor zeros(std::vector<int> shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return Tensor(std::move(shape), std::make_shared<Buffer>(n, 0.0));
  }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }
  static Tensor from(std::vector<int> shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::make_shared<Buffer>(std::move(values)));
    if (t.numel() != t.data->size()) throw ShapeError("from: size mismatch");
    return t;
  }
  static Tensor scalar(double v) { return from({1}, {v}); }

  size_t numel() const {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }
  bool is_scalar() const { return numel() == 1; }
  bool tracked() const { return tape != nullptr && node >= 0; }

  double& at(size_t i) { return (*data)[i]; }
  double at(size_t i) const { return (*data)[i]; }
  double* raw() { return data->data(); }
  const double* raw() const { return data->data(); }

  // 2-D helpers
  int rows() const { return shape.at(0); }
  int cols() const { return shape.at(1); }
  double& at2(int r, int c) { return (*data)[static_cast<size_t>(r) * cols() + c]; }
  double at2(int r, int c) const { return (*data)[static_cast<size_t>(r) * cols() + c]; }

  double item() const {
    if (!is_scalar()) throw ContractError("item() on non-scalar");
    return (*data)[0];
  }

  // Deep copy of the buffer, detached from any tape.
  Tensor detached_copy() const { return Tensor(shape, std::make_shared<Buffer>(*data)); }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (size_t i = 0; i < t.shape.size(); ++i) s += (i ? "x" : "") + std::to_string(t.shape[i]);
  return s + "]";
}

// ---------------------------------------------------------------------------
// Tape: ordered op records plus per-node gradient buffers. Built eagerly per
// forward pass, consumed by a single backward() call, then discarded.
// Confined to one thread; batch parallelism uses one tape per sequence.
// ---------------------------------------------------------------------------

class Tape {
 public:
  // Registers a leaf whose gradient will be accumulated by backward().
  Tensor leaf(const Tensor& t) {
    Tensor out = t;
    out.tape = this;
    out.node = new_node_(t.numel());
    return out;
  }

  int new_node_(size_t numel) {
    grads_.push_back({});
    numel_.push_back(numel);
    return static_cast<int>(grads_.size()) - 1;
  }

  void record(std::function<void(Tape&)> backward_rule) { ops_.push_back(std::move(backward_rule)); }

  // Accumulation target for node `id`; allocated zeroed on first touch.
  Buffer& grad_buffer(int id) {
    auto& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) g.assign(numel_[static_cast<size_t>(id)], 0.0);
    return g;
  }
  bool has_grad(int id) const { return !grads_[static_cast<size_t>(id)].empty(); }

  void backward(const Tensor& loss) {
    if (loss.tape != this || loss.node < 0) throw ContractError("backward: loss not on this tape");
    if (!loss.is_scalar()) throw ContractError("backward: loss must be scalar");
    if (consumed_) throw ContractError("backward: tape already consumed");
    consumed_ = true;
    grad_buffer(loss.node)[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)(*this);
  }

  // Gradient of the backward()-ed scalar w.r.t. a tensor on this tape.
  Tensor grad(const Tensor& t) {
    if (t.tape != this || t.node < 0) throw ContractError("grad: tensor not on this tape");
    if (!consumed_) throw ContractError("grad: call backward first");
    Tensor g = Tensor::zeros(t.shape);
    auto& buf = grads_[static_cast<size_t>(t.node)];
    if (!buf.empty()) std::copy(buf.begin(), buf.end(), g.data->begin());
    return g;
  }

  size_t num_nodes() const { return grads_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void(Tape&)>> ops_;
  std::vector<Buffer> grads_;
  std::vector<size_t> numel_;
  bool consumed_ = false;
};

namespace detail {

inline Tape* joint_tape(const Tensor& a, const Tensor& b) {
  if (a.tape && b.tape && a.tape != b.tape) throw ContractError("operands live on different tapes");
  return a.tape ? a.tape : b.tape;
}

inline Tensor make_out(std::vector<int> shape, Tape* tape) {
  Tensor out = Tensor::zeros(std::move(shape));
  if (tape) {
    out.tape = tape;
    out.node = tape->new_node_(out.numel());
  }
  return out;
}

// dgemm wrapper, row-major. Counts m*n*k multiply-adds.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  flops::add(static_cast<uint64_t>(m) * static_cast<uint64_t>(n) * static_cast<uint64_t>(k));
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

// a[m,k] . b[k,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul " + shape_str(a) + " . " + shape_str(b));
  Tape* tape = detail::joint_tape(a, b);
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = detail::make_out({m, n}, tape);
  detail::gemm(false, false, m, n, k, 1.0, a.raw(), k, b.raw(), n, 0.0, out.raw(), n);
  if (tape) {
    const int na = a.node, nb = b.node, no = out.node;
    BufferPtr pa = a.data, pb = b.data;
    tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na >= 0)  // dA += G . B^T
        detail::gemm(false, true, m, k, n, 1.0, go.data(), n, pb->data(), n, 1.0,
                     t.grad_buffer(na).data(), k);
      if (nb >= 0)  // dB += A^T . G
        detail::gemm(true, false, k, n, m, 1.0, pa->data(), k, go.data(), n, 1.0,
                     t.grad_buffer(nb).data(), n);
    });
  }
  return out;
}

// a[m,k] . b[n,k]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
    throw ShapeError("matmul_nt " + shape_str(a) + " . " + shape_str(b) + "^T");
  Tape* tape = detail::joint_tape(a, b);
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = detail::make_out({m, n}, tape);
  detail::gemm(false, true, m, n, k, 1.0, a.raw(), k, b.raw(), k, 0.0, out.raw(), n);
  if (tape) {
    const int na = a.node, nb = b.node, no = out.node;
    BufferPtr pa = a.data, pb = b.data;
    tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na >= 0)  // dA += G . B
        detail::gemm(false, false, m, k, n, 1.0, go.data(), n, pb->data(), k, 1.0,
                     t.grad_buffer(na).data(), k);
      if (nb >= 0)  // dB += G^T . A
        detail::gemm(true, false, n, k, m, 1.0, go.data(), n, pa->data(), k, 1.0,
                     t.grad_buffer(nb).data(), k);
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("add " + shape_str(a) + " vs " + shape_str(b));
  Tape* tape = detail::joint_tape(a, b);
  Tensor out = detail::make_out(a.shape, tape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (tape) {
    const int na = a.node, nb = b.node, no = out.node;
    tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na >= 0) {
        Buffer& ga = t.grad_buffer(na);
        for (size_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (nb >= 0) {
        Buffer& gb = t.grad_buffer(nb);
        for (size_t i = 0; i < n; ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("sub " + shape_str(a) + " vs " + shape_str(b));
  Tape* tape = detail::joint_tape(a, b);
  Tensor out = detail::make_out(a.shape, tape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  if (tape) {
    const int na = a.node, nb = b.node, no = out.node;
    tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na >= 0) {
        Buffer& ga = t.grad_buffer(na);
        for (size_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (nb >= 0) {
        Buffer& gb = t.grad_buffer(nb);
        for (size_t i = 0; i < n; ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("mul " + shape_str(a) + " vs " + shape_str(b));
  Tape* tape = detail::joint_tape(a, b);
  Tensor out = detail::make_out(a.shape, tape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (tape) {
    const int na = a.node, nb = b.node, no = out.node;
    BufferPtr pa = a.data, pb = b.data;
    tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na >= 0) {
        Buffer& ga = t.grad_buffer(na);
        for (size_t i = 0; i < n; ++i) ga[i] += go[i] * (*pb)[i];
      }
      if (nb >= 0) {
        Buffer& gb = t.grad_buffer(nb);
        for (size_t i = 0; i < n; ++i) gb[i] += go[i] * (*pa)[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = detail::make_out(a.shape, a.tape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * s;
  if (a.tape) {
    const int na = a.node, no = out.node;
    a.tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na >= 0) {
        Buffer& ga = t.grad_buffer(na);
        for (size_t i = 0; i < n; ++i) ga[i] += go[i] * s;
      }
    });
  }
  return out;
}

// out[r,:] = a[r,:] + v  (bias over rows)
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (a.rank() != 2 || v.rank() != 1 || v.dim(0) != a.cols())
    throw ShapeError("add_rowvec " + shape_str(a) + " + " + shape_str(v));
  Tape* tape = detail::joint_tape(a, v);
  const int m = a.rows(), d = a.cols();
  Tensor out = detail::make_out(a.shape, tape);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < d; ++c) out.at2(r, c) = a.at2(r, c) + v.at(static_cast<size_t>(c));
  if (tape) {
    const int na = a.node, nv = v.node, no = out.node;
    tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na >= 0) {
        Buffer& ga = t.grad_buffer(na);
        for (size_t i = 0; i < static_cast<size_t>(m) * d; ++i) ga[i] += go[i];
      }
      if (nv >= 0) {
        Buffer& gv = t.grad_buffer(nv);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < d; ++c) gv[static_cast<size_t>(c)] += go[static_cast<size_t>(r) * d + c];
      }
    });
  }
  return out;
}

// out[r,:] = a[r,:] * v  (per-column scaling, e.g. gamma)
inline Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  if (a.rank() != 2 || v.rank() != 1 || v.dim(0) != a.cols())
    throw ShapeError("mul_rowvec " + shape_str(a) + " * " + shape_str(v));
  Tape* tape = detail::joint_tape(a, v);
  const int m = a.rows(), d = a.cols();
  Tensor out = detail::make_out(a.shape, tape);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < d; ++c) out.at2(r, c) = a.at2(r, c) * v.at(static_cast<size_t>(c));
  if (tape) {
    const int na = a.node, nv = v.node, no = out.node;
    BufferPtr pa = a.data, pv = v.data;
    tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na >= 0) {
        Buffer& ga = t.grad_buffer(na);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < d; ++c) {
            const size_t i = static_cast<size_t>(r) * d + c;
            ga[i] += go[i] * (*pv)[static_cast<size_t>(c)];
          }
      }
      if (nv >= 0) {
        Buffer& gv = t.grad_buffer(nv);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < d; ++c) {
            const size_t i = static_cast<size_t>(r) * d + c;
            gv[static_cast<size_t>(c)] += go[i] * (*pa)[i];
          }
      }
    });
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  Tensor out = detail::make_out({1}, a.tape);
  out.at(0) = std::accumulate(a.data->begin(), a.data->end(), 0.0);
  if (a.tape) {
    const int na = a.node, no = out.node;
    const size_t n = a.numel();
    a.tape->record([=](Tape& t) {
      const double g = t.grad_buffer(no)[0];
      if (na >= 0) {
        Buffer& ga = t.grad_buffer(na);
        for (size_t i = 0; i < n; ++i) ga[i] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations. GELU is the exact Gaussian-CDF form; relu' takes 0 at z=0.
// ---------------------------------------------------------------------------

enum class Act { Relu, Gelu };

namespace detail {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double act_f(double z, Act k) {
  return k == Act::Relu ? (z > 0.0 ? z : 0.0) : 0.5 * z * (1.0 + std::erf(z * kInvSqrt2));
}
inline double act_df(double z, Act k) {
  if (k == Act::Relu) return z > 0.0 ? 1.0 : 0.0;
  const double phi = kInvSqrt2Pi * std::exp(-0.5 * z * z);
  return 0.5 * (1.0 + std::erf(z * kInvSqrt2)) + z * phi;
}
inline double act_d2f(double z, Act k) {
  if (k == Act::Relu) return 0.0;
  const double phi = kInvSqrt2Pi * std::exp(-0.5 * z * z);
  return phi * (2.0 - z * z);
}
}  // namespace detail

inline Tensor activation(const Tensor& z, Act kind) {
  Tensor out = detail::make_out(z.shape, z.tape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = detail::act_f(z.at(i), kind);
  if (z.tape) {
    const int nz = z.node, no = out.node;
    BufferPtr pz = z.data;
    z.tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (nz >= 0) {
        Buffer& gz = t.grad_buffer(nz);
        for (size_t i = 0; i < n; ++i) gz[i] += go[i] * detail::act_df((*pz)[i], kind);
      }
    });
  }
  return out;
}

// sigma'(z) as a graph op; its backward uses sigma''.
inline Tensor activation_prime(const Tensor& z, Act kind) {
  Tensor out = detail::make_out(z.shape, z.tape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = detail::act_df(z.at(i), kind);
  if (z.tape) {
    const int nz = z.node, no = out.node;
    BufferPtr pz = z.data;
    z.tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (nz >= 0) {
        Buffer& gz = t.grad_buffer(nz);
        for (size_t i = 0; i < n; ++i) gz[i] += go[i] * detail::act_d2f((*pz)[i], kind);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// log sum_{i: mask} exp(z_i), max-subtracted. Errors on an all-false mask;
// the attention energy never calls it that way (empty windows short-circuit
// to zero before reaching here).
// ---------------------------------------------------------------------------

inline Tensor logsumexp(const Tensor& z, const std::vector<bool>& mask) {
  if (z.rank() != 1 || mask.size() != z.numel()) throw ShapeError("logsumexp mask/z mismatch");
  double m = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) m = std::max(m, z.at(i));
  if (!std::isfinite(m) && m < 0) throw ContractError("logsumexp: empty mask");
  double s = 0.0;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) s += std::exp(z.at(i) - m);
  Tensor out = detail::make_out({1}, z.tape);
  out.at(0) = m + std::log(s);
  if (z.tape) {
    const int nz = z.node, no = out.node;
    BufferPtr pz = z.data;
    const double lse = out.at(0);
    const auto msk = mask;
    z.tape->record([=](Tape& t) {
      const double g = t.grad_buffer(no)[0];
      if (nz >= 0) {
        Buffer& gz = t.grad_buffer(nz);
        for (size_t i = 0; i < msk.size(); ++i)
          if (msk[i]) gz[i] += g * std::exp((*pz)[i] - lse);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise softmax of an N x N score matrix restricted to the causal window:
// row A is normalized over columns B < A (or B <= A with include_self).
// Rows with an empty window come out identically zero; that convention makes
// token 1's attention term vanish.
// ---------------------------------------------------------------------------

inline Tensor causal_softmax(const Tensor& scores, bool include_self = false) {
  if (scores.rank() != 2 || scores.rows() != scores.cols())
    throw ShapeError("causal_softmax wants square scores, got " + shape_str(scores));
  const int n = scores.rows();
  Tensor out = detail::make_out(scores.shape, scores.tape);
  for (int a = 0; a < n; ++a) {
    const int lim = include_self ? a + 1 : a;  // columns [0, lim)
    if (lim == 0) continue;                    // empty window -> zero row
    double m = scores.at2(a, 0);
    for (int b = 1; b < lim; ++b) m = std::max(m, scores.at2(a, b));
    double s = 0.0;
    for (int b = 0; b < lim; ++b) s += std::exp(scores.at2(a, b) - m);
    for (int b = 0; b < lim; ++b) out.at2(a, b) = std::exp(scores.at2(a, b) - m) / s;
  }
  if (scores.tape) {
    const int ns = scores.node, no = out.node;
    BufferPtr po = out.data;
    scores.tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (ns < 0) return;
      Buffer& gs = t.grad_buffer(ns);
      for (int a = 0; a < n; ++a) {
        const int lim = include_self ? a + 1 : a;
        if (lim == 0) continue;
        const size_t row = static_cast<size_t>(a) * n;
        double dot = 0.0;
        for (int b = 0; b < lim; ++b) dot += go[row + b] * (*po)[row + b];
        for (int b = 0; b < lim; ++b) gs[row + b] += (*po)[row + b] * (go[row + b] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding gather and mean cross-entropy, the two ends of the model.
// ---------------------------------------------------------------------------

inline Tensor embed_rows(const std::vector<int>& ids, const Tensor& table) {
  if (table.rank() != 2) throw ShapeError("embed_rows wants 2-D table");
  const int d = table.cols();
  for (int id : ids)
    if (id < 0 || id >= table.rows()) throw ContractError("embed_rows: id out of range");
  Tensor out = detail::make_out({static_cast<int>(ids.size()), d}, table.tape);
  for (size_t r = 0; r < ids.size(); ++r)
    std::memcpy(out.raw() + r * d, table.raw() + static_cast<size_t>(ids[r]) * d,
                sizeof(double) * static_cast<size_t>(d));
  if (table.tape) {
    const int nt = table.node, no = out.node;
    const auto idx = ids;
    table.tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (nt < 0) return;
      Buffer& gt = t.grad_buffer(nt);
      for (size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < d; ++c)
          gt[static_cast<size_t>(idx[r]) * d + c] += go[r * d + c];
    });
  }
  return out;
}

// Mean next-token cross-entropy over positions whose target != ignore_id.
// Stable log-softmax forward, (softmax - onehot)/count backward.
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets,
                                 int ignore_id = -1) {
  if (logits.rank() != 2 || static_cast<size_t>(logits.rows()) != targets.size())
    throw ShapeError("cross_entropy_mean: logits " + shape_str(logits) + " vs " +
                     std::to_string(targets.size()) + " targets");
  const int n = logits.rows(), v = logits.cols();
  int count = 0;
  double total = 0.0;
  std::vector<double> logz(static_cast<size_t>(n));
  for (int r = 0; r < n; ++r) {
    if (targets[static_cast<size_t>(r)] == ignore_id) continue;
    const int y = targets[static_cast<size_t>(r)];
    if (y < 0 || y >= v) throw ContractError("cross_entropy_mean: target out of range");
    double m = logits.at2(r, 0);
    for (int c = 1; c < v; ++c) m = std::max(m, logits.at2(r, c));
    double s = 0.0;
    for (int c = 0; c < v; ++c) s += std::exp(logits.at2(r, c) - m);
    logz[static_cast<size_t>(r)] = m + std::log(s);
    total += logz[static_cast<size_t>(r)] - logits.at2(r, y);
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy_mean: all positions ignored");
  Tensor out = detail::make_out({1}, logits.tape);
  out.at(0) = total / count;
  if (logits.tape) {
    const int nl = logits.node, no = out.node;
    BufferPtr pl = logits.data;
    const auto tg = targets;
    const auto lz = logz;
    logits.tape->record([=](Tape& t) {
      const double g = t.grad_buffer(no)[0] / count;
      if (nl < 0) return;
      Buffer& gl = t.grad_buffer(nl);
      for (int r = 0; r < n; ++r) {
        if (tg[static_cast<size_t>(r)] == ignore_id) continue;
        const size_t row = static_cast<size_t>(r) * v;
        for (int c = 0; c < v; ++c) {
          double p = std::exp((*pl)[row + c] - lz[static_cast<size_t>(r)]);
          gl[row + c] += g * (p - (c == tg[static_cast<size_t>(r)] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

// a[k,m]^T . b[k,n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
    throw ShapeError("matmul_tn " + shape_str(a) + "^T . " + shape_str(b));
  Tape* tape = detail::joint_tape(a, b);
  const int m = a.cols(), k = a.rows(), n = b.cols();
  Tensor out = detail::make_out({m, n}, tape);
  detail::gemm(true, false, m, n, k, 1.0, a.raw(), m, b.raw(), n, 0.0, out.raw(), n);
  if (tape) {
    const int na = a.node, nb = b.node, no = out.node;
    BufferPtr pa = a.data, pb = b.data;
    tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na >= 0)  // dA += B . G^T
        detail::gemm(false, true, k, m, n, 1.0, pb->data(), n, go.data(), n, 1.0,
                     t.grad_buffer(na).data(), m);
      if (nb >= 0)  // dB += A . G
        detail::gemm(false, false, k, n, m, 1.0, pa->data(), m, go.data(), n, 1.0,
                     t.grad_buffer(nb).data(), n);
    });
  }
  return out;
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d wants 2-D");
  const int m = a.rows(), n = a.cols();
  Tensor out = detail::make_out({n, m}, a.tape);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out.at2(c, r) = a.at2(r, c);
  if (a.tape) {
    const int na = a.node, no = out.node;
    a.tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na < 0) return;
      Buffer& ga = t.grad_buffer(na);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) ga[static_cast<size_t>(r) * n + c] += go[static_cast<size_t>(c) * m + r];
    });
  }
  return out;
}

// Same buffer, new shape; gradient flows through unchanged.
inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  if (n != a.numel()) throw ShapeError("reshape: numel mismatch");
  Tensor out = detail::make_out(std::move(shape), a.tape);
  std::copy(a.data->begin(), a.data->end(), out.data->begin());
  if (a.tape) {
    const int na = a.node, no = out.node;
    a.tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na < 0) return;
      Buffer& ga = t.grad_buffer(na);
      for (size_t i = 0; i < n; ++i) ga[i] += go[i];
    });
  }
  return out;
}

inline Tensor slice_row(const Tensor& a, int r) {
  if (a.rank() != 2 || r < 0 || r >= a.rows()) throw ShapeError("slice_row out of range");
  const int d = a.cols();
  Tensor out = detail::make_out({d}, a.tape);
  std::memcpy(out.raw(), a.raw() + static_cast<size_t>(r) * d, sizeof(double) * static_cast<size_t>(d));
  if (a.tape) {
    const int na = a.node, no = out.node;
    a.tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na < 0) return;
      Buffer& ga = t.grad_buffer(na);
      for (int c = 0; c < d; ++c) ga[static_cast<size_t>(r) * d + c] += go[static_cast<size_t>(c)];
    });
  }
  return out;
}

inline Tensor slice_elem(const Tensor& a, int i) {
  if (i < 0 || static_cast<size_t>(i) >= a.numel()) throw ShapeError("slice_elem out of range");
  Tensor out = detail::make_out({1}, a.tape);
  out.at(0) = a.at(static_cast<size_t>(i));
  if (a.tape) {
    const int na = a.node, no = out.node;
    a.tape->record([=](Tape& t) {
      if (na >= 0) t.grad_buffer(na)[static_cast<size_t>(i)] += t.grad_buffer(no)[0];
    });
  }
  return out;
}

// a * s where s is a scalar node (used for learnable step sizes, head weights).
inline Tensor mul_scalar_node(const Tensor& a, const Tensor& s) {
  if (!s.is_scalar()) throw ShapeError("mul_scalar_node: s must be scalar");
  Tape* tape = detail::joint_tape(a, s);
  Tensor out = detail::make_out(a.shape, tape);
  const size_t n = out.numel();
  const double sv = s.at(0);
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * sv;
  if (tape) {
    const int na = a.node, ns = s.node, no = out.node;
    BufferPtr pa = a.data;
    tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na >= 0) {
        Buffer& ga = t.grad_buffer(na);
        for (size_t i = 0; i < n; ++i) ga[i] += go[i] * sv;
      }
      if (ns >= 0) {
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) acc += go[i] * (*pa)[i];
        t.grad_buffer(ns)[0] += acc;
      }
    });
  }
  return out;
}

// log(1 + e^x), overflow-safe; keeps learnable step-size constants positive.
inline Tensor softplus(const Tensor& a) {
  Tensor out = detail::make_out(a.shape, a.tape);
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) {
    const double z = a.at(i);
    out.at(i) = z > 30.0 ? z : std::log1p(std::exp(z));
  }
  if (a.tape) {
    const int na = a.node, no = out.node;
    BufferPtr pa = a.data;
    a.tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      if (na < 0) return;
      Buffer& ga = t.grad_buffer(na);
      for (size_t i = 0; i < n; ++i) ga[i] += go[i] / (1.0 + std::exp(-(*pa)[i]));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Small conveniences used by tests and the CLI (no autodiff needed).
// ---------------------------------------------------------------------------

inline Tensor row(const Tensor& a, int r) {
  Tensor out = Tensor::zeros({a.cols()});
  std::memcpy(out.raw(), a.raw() + static_cast<size_t>(r) * a.cols(),
              sizeof(double) * static_cast<size_t>(a.cols()));
  return out;
}

inline double norm2(const Tensor& a) {
  double s = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) s += a.at(i) * a.at(i);
  return std::sqrt(s);
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i)));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("max_abs_diff shape mismatch");
  double m = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

inline bool all_finite(const Tensor& a) {
  for (size_t i = 0; i < a.numel(); ++i)
    if (!std::isfinite(a.at(i))) return false;
  return true;
}

inline Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (size_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal(mean, stddev);
  return t;
}

inline Tensor rand_uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (size_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(lo, hi);
  return t;
}

}  // namespace nrgpt
