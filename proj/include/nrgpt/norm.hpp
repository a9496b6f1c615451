#pragma once

// LayerNorm / RMSNorm forward maps, their exact analytic Jacobians, and the
// projection factor P with jacobian = (1/r) * diag(gamma) * P.

#include <cmath>
#include <vector>

#include "nrgpt/tensor.hpp"

namespace nrgpt {

enum class NormKind { LayerNorm, RmsNorm, None };

inline const char* to_string(NormKind k) {
  switch (k) {
    case NormKind::LayerNorm: return "layernorm";
    case NormKind::RmsNorm: return "rmsnorm";
    default: return "none";
  }
}

inline NormKind norm_kind_from(const std::string& s) {
  if (s == "layernorm") return NormKind::LayerNorm;
  if (s == "rmsnorm") return NormKind::RmsNorm;
  if (s == "none") return NormKind::None;
  throw ConfigError("unknown norm kind: " + s);
}

struct NormParams {
  NormKind kind = NormKind::RmsNorm;
  Tensor gamma;  // [D]
  Tensor shift;  // [D]; identically zero for rmsnorm
  double epsilon = 1e-5;

  static NormParams layernorm(Tensor gamma, Tensor shift, double eps = 1e-5) {
    NormParams p{NormKind::LayerNorm, std::move(gamma), std::move(shift), eps};
    p.validate();
    return p;
  }
  static NormParams rmsnorm(Tensor gamma, double eps = 1e-5) {
    NormParams p{NormKind::RmsNorm, std::move(gamma), Tensor{}, eps};
    p.shift = Tensor::zeros({p.gamma.dim(0)});
    p.validate();
    return p;
  }
  static NormParams none() { return NormParams{NormKind::None, Tensor{}, Tensor{}, 0.0}; }

  void validate() const {
    if (kind == NormKind::None) return;
    if (gamma.rank() != 1) throw ShapeError("norm gamma must be 1-D");
    if (kind == NormKind::LayerNorm) {
      if (epsilon <= 0.0) throw ContractError("layernorm requires epsilon > 0");
      if (shift.rank() != 1 || shift.dim(0) != gamma.dim(0))
        throw ShapeError("layernorm shift/gamma size mismatch");
    } else {
      if (epsilon < 0.0) throw ContractError("rmsnorm epsilon must be >= 0");
      for (size_t i = 0; i < shift.numel(); ++i)
        if (shift.at(i) != 0.0) throw ContractError("rmsnorm requires zero shift");
    }
  }
};

namespace detail {

// r and the direction vector u shared by forward/Jacobian:
//   rmsnorm:   r = sqrt(|x|^2/D + eps),        u = x
//   layernorm: r = sqrt(Var[x] + eps),         u = x - mean(x)
struct NormScratch {
  double r;
  std::vector<double> u;
};

inline NormScratch norm_scratch(const double* x, int d, const NormParams& p) {
  NormScratch s;
  s.u.assign(x, x + d);
  if (p.kind == NormKind::LayerNorm) {
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += x[i];
    mu /= d;
    for (auto& v : s.u) v -= mu;
  }
  double ss = 0.0;
  for (double v : s.u) ss += v * v;
  const double r2 = ss / d + p.epsilon;
  if (r2 <= 0.0) throw ContractError("normalize: zero input with epsilon = 0");
  s.r = std::sqrt(r2);
  return s;
}

}  // namespace detail

// g = gamma .* u / r (+ shift for layernorm); identity for kind none.
inline Tensor normalize(const Tensor& x, const NormParams& p) {
  if (p.kind == NormKind::None) return x.detached_copy();
  if (x.rank() != 1 || x.dim(0) != p.gamma.dim(0)) throw ShapeError("normalize: x/gamma mismatch");
  const int d = x.dim(0);
  const auto s = detail::norm_scratch(x.raw(), d, p);
  Tensor g = Tensor::zeros({d});
  for (int i = 0; i < d; ++i) {
    g.at(static_cast<size_t>(i)) = p.gamma.at(static_cast<size_t>(i)) * s.u[static_cast<size_t>(i)] / s.r;
    if (p.kind == NormKind::LayerNorm) g.at(static_cast<size_t>(i)) += p.shift.at(static_cast<size_t>(i));
  }
  return g;
}

// Exact dg/dx: (1/r) * Gamma * (B - u u^T / (D r^2)), with B = I for rmsnorm
// and B = I - 11^T/D for layernorm. Writing the rank-1 term with u (not the
// unit vector) keeps it exact for eps > 0 and regular at u = 0.
inline Tensor norm_jacobian(const Tensor& x, const NormParams& p) {
  const int d = x.dim(0);
  if (p.kind == NormKind::None) {
    Tensor j = Tensor::zeros({d, d});
    for (int i = 0; i < d; ++i) j.at2(i, i) = 1.0;
    return j;
  }
  if (x.rank() != 1 || d != p.gamma.dim(0)) throw ShapeError("norm_jacobian: x/gamma mismatch");
  const auto s = detail::norm_scratch(x.raw(), d, p);
  const double inv_r = 1.0 / s.r;
  const double rank1 = 1.0 / (d * s.r * s.r);
  Tensor j = Tensor::zeros({d, d});
  for (int i = 0; i < d; ++i) {
    const double gi = p.gamma.at(static_cast<size_t>(i));
    for (int q = 0; q < d; ++q) {
      double base = (i == q) ? 1.0 : 0.0;
      if (p.kind == NormKind::LayerNorm) base -= 1.0 / d;
      j.at2(i, q) = gi * inv_r * (base - s.u[static_cast<size_t>(i)] * s.u[static_cast<size_t>(q)] * rank1);
    }
  }
  return j;
}

// P with jacobian = (1/r) * Gamma * P exactly, i.e. P = r * Gamma^{-1} * J.
// For rmsnorm with eps = 0 this is the projection I - xhat xhat^T.
inline Tensor norm_projection(const Tensor& x, const NormParams& p) {
  const int d = x.dim(0);
  if (p.kind == NormKind::None) {
    Tensor j = Tensor::zeros({d, d});
    for (int i = 0; i < d; ++i) j.at2(i, i) = 1.0;
    return j;
  }
  for (size_t i = 0; i < p.gamma.numel(); ++i)
    if (p.gamma.at(i) == 0.0) throw ContractError("norm_projection: gamma has zero entries");
  const auto s = detail::norm_scratch(x.raw(), d, p);
  Tensor j = norm_jacobian(x, p);
  Tensor proj = Tensor::zeros({d, d});
  for (int i = 0; i < d; ++i)
    for (int q = 0; q < d; ++q) proj.at2(i, q) = s.r * j.at2(i, q) / p.gamma.at(static_cast<size_t>(i));
  return proj;
}

// The scalar r_A in jacobian = (1/r_A) Gamma P_A.
inline double norm_radius(const Tensor& x, const NormParams& p) {
  if (p.kind == NormKind::None) return 1.0;
  return detail::norm_scratch(x.raw(), x.dim(0), p).r;
}

// ---------------------------------------------------------------------------
// Row-wise fused graph op: each row of x normalized independently.
// Differentiable w.r.t. x, gamma, shift.
// ---------------------------------------------------------------------------

inline Tensor norm_rows(const Tensor& x, const NormParams& p) {
  if (p.kind == NormKind::None) return x;
  if (x.rank() != 2 || x.cols() != p.gamma.dim(0)) throw ShapeError("norm_rows: x/gamma mismatch");
  const int n = x.rows(), d = x.cols();
  const bool ln = p.kind == NormKind::LayerNorm;

  Tape* tape = x.tape;
  if (p.gamma.tape) tape = detail::joint_tape(x, p.gamma);
  if (ln && p.shift.tape) {
    if (tape && p.shift.tape != tape) throw ContractError("norm_rows: mixed tapes");
    tape = tape ? tape : p.shift.tape;
  }

  Tensor out = detail::make_out({n, d}, tape);
  auto centered = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * d);
  auto radii = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int r = 0; r < n; ++r) {
    const auto s = detail::norm_scratch(x.raw() + static_cast<size_t>(r) * d, d, p);
    (*radii)[static_cast<size_t>(r)] = s.r;
    for (int c = 0; c < d; ++c) {
      (*centered)[static_cast<size_t>(r) * d + c] = s.u[static_cast<size_t>(c)];
      double v = p.gamma.at(static_cast<size_t>(c)) * s.u[static_cast<size_t>(c)] / s.r;
      if (ln) v += p.shift.at(static_cast<size_t>(c));
      out.at2(r, c) = v;
    }
  }

  if (tape) {
    const int nx = x.node, ng = p.gamma.node, ns = ln ? p.shift.node : -1, no = out.node;
    BufferPtr pg = p.gamma.data;
    tape->record([=](Tape& t) {
      const Buffer& go = t.grad_buffer(no);
      std::vector<double> w(static_cast<size_t>(d));
      for (int r = 0; r < n; ++r) {
        const size_t row = static_cast<size_t>(r) * d;
        const double rr = (*radii)[static_cast<size_t>(r)];
        if (nx >= 0) {
          // dx = (1/r) [w - mean(w) 1_{ln} - u (u . w) / (D r^2)], w = gamma .* G
          double wmean = 0.0, udotw = 0.0;
          for (int c = 0; c < d; ++c) {
            w[static_cast<size_t>(c)] = (*pg)[static_cast<size_t>(c)] * go[row + c];
            wmean += w[static_cast<size_t>(c)];
            udotw += (*centered)[row + c] * w[static_cast<size_t>(c)];
          }
          wmean /= d;
          const double k = udotw / (d * rr * rr);
          Buffer& gx = t.grad_buffer(nx);
          for (int c = 0; c < d; ++c) {
            double v = w[static_cast<size_t>(c)] - (*centered)[row + c] * k;
            if (ln) v -= wmean;
            gx[row + c] += v / rr;
          }
        }
        if (ng >= 0) {
          Buffer& gg = t.grad_buffer(ng);
          for (int c = 0; c < d; ++c) gg[static_cast<size_t>(c)] += go[row + c] * (*centered)[row + c] / rr;
        }
        if (ns >= 0) {
          Buffer& gs = t.grad_buffer(ns);
          for (int c = 0; c < d; ++c) gs[static_cast<size_t>(c)] += go[row + c];
        }
      }
    });
  }
  return out;
}

}  // namespace nrgpt
