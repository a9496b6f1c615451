#pragma once

// Per-token energy E_A = E^AT_A + E^FF_A with causal masking, its analytic
// gradients, and the batched negative-gradient update used by the dynamics.
//
// Token indices are 0-based here: token 0 has an empty causal window and by
// convention E^AT_0 = 0 with zero gradient.

#include <cmath>
#include <vector>

#include "nrgpt/norm.hpp"
#include "nrgpt/tensor.hpp"

namespace nrgpt {

struct AttentionEnergyParams {
  std::vector<Tensor> J;  // per head, [D, D]
  Tensor alpha;           // [H]
  double beta = 0.0;      // 0 means "use 1/sqrt(D/H)"
  bool include_self = false;

  int heads() const { return static_cast<int>(J.size()); }
  int dim() const { return J.empty() ? 0 : J[0].rows(); }

  double effective_beta() const {
    if (beta > 0.0) return beta;
    const int h = heads(), d = dim();
    if (h == 0 || d % h != 0) throw ContractError("beta default needs H | D");
    return 1.0 / std::sqrt(static_cast<double>(d / h));
  }

  void validate() const {
    if (J.empty()) throw ShapeError("attention: no heads");
    const int d = dim();
    for (const auto& j : J)
      if (j.rank() != 2 || j.rows() != d || j.cols() != d) throw ShapeError("attention: J_h must be DxD");
    if (alpha.rank() != 1 || alpha.dim(0) != heads()) throw ShapeError("attention: alpha size != H");
    for (size_t i = 0; i < alpha.numel(); ++i)
      if (!std::isfinite(alpha.at(i))) throw ContractError("attention: alpha not finite");
  }
};

enum class FFVariant { FF1, FF2W, DamRelu };

inline const char* to_string(FFVariant v) {
  switch (v) {
    case FFVariant::FF1: return "ff1";
    case FFVariant::FF2W: return "ff2w";
    default: return "dam_relu";
  }
}

inline FFVariant ff_variant_from(const std::string& s) {
  if (s == "ff1") return FFVariant::FF1;
  if (s == "ff2w") return FFVariant::FF2W;
  if (s == "dam_relu") return FFVariant::DamRelu;
  throw ConfigError("unknown ff variant: " + s);
}

struct FFEnergyParams {
  FFVariant variant = FFVariant::FF1;
  Tensor W1;  // [M, D]
  Tensor W2;  // [M, D], FF2W only
  Act sigma = Act::Gelu;

  int hidden() const { return W1.rows(); }
  int dim() const { return W1.cols(); }

  void validate() const {
    if (W1.rank() != 2) throw ShapeError("ff: W1 must be 2-D");
    if (variant == FFVariant::FF2W) {
      if (W2.rank() != 2 || W2.rows() != W1.rows() || W2.cols() != W1.cols())
        throw ShapeError("ff2w: W2 must match W1");
    }
    if (variant == FFVariant::DamRelu && sigma != Act::Relu)
      throw ContractError("dam_relu uses relu");
  }
};

// ---------------------------------------------------------------------------
// Per-token energies (graph-recordable when inputs are on a tape).
// ---------------------------------------------------------------------------

// E^AT_A = -(1/beta) sum_h alpha_h log sum_{B<A} exp(beta g_B^T J_h g_A).
inline Tensor attention_energy(const Tensor& g, int a, const AttentionEnergyParams& p) {
  p.validate();
  if (g.rank() != 2 || g.cols() != p.dim()) throw ShapeError("attention_energy: g/J mismatch");
  if (a < 0 || a >= g.rows()) throw ShapeError("attention_energy: token index");
  const int n = g.rows();
  const int window = p.include_self ? a + 1 : a;
  if (window == 0) return Tensor::scalar(0.0);  // empty causal window

  const double beta = p.effective_beta();
  std::vector<bool> mask(static_cast<size_t>(n), false);
  for (int b = 0; b < window; ++b) mask[static_cast<size_t>(b)] = true;

  const Tensor ga = reshape(slice_row(g, a), {p.dim(), 1});
  Tensor total = Tensor::scalar(0.0);
  for (int h = 0; h < p.heads(); ++h) {
    // z_B = beta g_B^T J_h g_A for all B
    Tensor z = scale(reshape(matmul(g, matmul(p.J[h], ga)), {n}), beta);
    Tensor lse = logsumexp(z, mask);
    total = add(total, mul_scalar_node(lse, slice_elem(p.alpha, h)));
  }
  return scale(total, -1.0 / beta);
}

// E^FF for one token state.
//   FF1:      -|sigma(W1 g)|^2
//   FF2W:     -g^T W2^T sigma(W1 g)
//   DamRelu:  -sum_m F((W1 g)_m), F(z) = relu(z)^2 / 2
inline Tensor ff_energy(const Tensor& g_a, const FFEnergyParams& p) {
  p.validate();
  if (g_a.rank() != 1 || g_a.dim(0) != p.dim()) throw ShapeError("ff_energy: g/W1 mismatch");
  const Tensor col = reshape(g_a, {p.dim(), 1});
  const Tensor z = matmul(p.W1, col);
  switch (p.variant) {
    case FFVariant::FF1: {
      Tensor s = activation(z, p.sigma);
      return scale(sum(mul(s, s)), -1.0);
    }
    case FFVariant::FF2W: {
      Tensor s = activation(z, p.sigma);
      return scale(sum(mul(matmul(p.W2, col), s)), -1.0);
    }
    default: {
      Tensor s = activation(z, Act::Relu);
      return scale(sum(mul(s, s)), -0.5);
    }
  }
}

inline Tensor token_energy(const Tensor& g, int a, const AttentionEnergyParams& at,
                           const FFEnergyParams& ff) {
  return add(attention_energy(g, a, at), ff_energy(slice_row(g, a), ff));
}

// ---------------------------------------------------------------------------
// Analytic gradients (plain tensors, no tape).
// ---------------------------------------------------------------------------

namespace detail {

// Causal softmax weights for token a: sm[b] over b in the window.
inline std::vector<double> softmax_window(const Tensor& g, int a, const Tensor& j, double beta,
                                          bool include_self) {
  const int window = include_self ? a + 1 : a;
  const int d = g.cols();
  std::vector<double> z(static_cast<size_t>(window));
  // j . g_a
  std::vector<double> jg(static_cast<size_t>(d), 0.0);
  for (int r = 0; r < d; ++r) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c) acc += j.at2(r, c) * g.at2(a, c);
    jg[static_cast<size_t>(r)] = acc;
  }
  for (int b = 0; b < window; ++b) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c) acc += g.at2(b, c) * jg[static_cast<size_t>(c)];
    z[static_cast<size_t>(b)] = beta * acc;
  }
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    s += v;
  }
  for (double& v : z) v /= s;
  return z;
}

inline void ff_grad_into(const Tensor& g_a, const FFEnergyParams& p, double* out) {
  const int m = p.hidden(), d = p.dim();
  std::vector<double> z(static_cast<size_t>(m));
  for (int r = 0; r < m; ++r) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c) acc += p.W1.at2(r, c) * g_a.at(static_cast<size_t>(c));
    z[static_cast<size_t>(r)] = acc;
  }
  switch (p.variant) {
    case FFVariant::FF1: {
      // dE/dg = -2 W1^T (sigma(z) .* sigma'(z))
      for (int r = 0; r < m; ++r) {
        const double u = 2.0 * act_f(z[static_cast<size_t>(r)], p.sigma) * act_df(z[static_cast<size_t>(r)], p.sigma);
        for (int c = 0; c < d; ++c) out[c] -= u * p.W1.at2(r, c);
      }
      break;
    }
    case FFVariant::FF2W: {
      // dE/dg = -(W2^T sigma(z) + W1^T (sigma'(z) .* W2 g))
      for (int r = 0; r < m; ++r) {
        double w2g = 0.0;
        for (int c = 0; c < d; ++c) w2g += p.W2.at2(r, c) * g_a.at(static_cast<size_t>(c));
        const double s = act_f(z[static_cast<size_t>(r)], p.sigma);
        const double u = act_df(z[static_cast<size_t>(r)], p.sigma) * w2g;
        for (int c = 0; c < d; ++c) out[c] -= s * p.W2.at2(r, c) + u * p.W1.at2(r, c);
      }
      break;
    }
    default: {
      // dE/dg = -W1^T relu(z)
      for (int r = 0; r < m; ++r) {
        const double u = act_f(z[static_cast<size_t>(r)], Act::Relu);
        for (int c = 0; c < d; ++c) out[c] -= u * p.W1.at2(r, c);
      }
      break;
    }
  }
}

}  // namespace detail

// dE_A/dg_A: attention part -sum_h alpha_h J_h^T sum_{B<A} g_B SM_B plus the
// exact FF gradient.
inline Tensor energy_grad(const Tensor& g, int a, const AttentionEnergyParams& at,
                          const FFEnergyParams& ff) {
  at.validate();
  ff.validate();
  const int d = g.cols();
  Tensor out = Tensor::zeros({d});
  const int window = at.include_self ? a + 1 : a;
  if (window > 0) {
    const double beta = at.effective_beta();
    for (int h = 0; h < at.heads(); ++h) {
      const auto sm = detail::softmax_window(g, a, at.J[h], beta, at.include_self);
      std::vector<double> s(static_cast<size_t>(d), 0.0);
      for (int b = 0; b < window; ++b)
        for (int c = 0; c < d; ++c) s[static_cast<size_t>(c)] += sm[static_cast<size_t>(b)] * g.at2(b, c);
      const double ah = at.alpha.at(static_cast<size_t>(h));
      // -alpha_h J_h^T s
      for (int r = 0; r < d; ++r) {
        double acc = 0.0;
        for (int c = 0; c < d; ++c) acc += at.J[h].at2(c, r) * s[static_cast<size_t>(c)];
        out.at(static_cast<size_t>(r)) -= ah * acc;
      }
    }
  }
  detail::ff_grad_into(row(g, a), ff, out.raw());
  return out;
}

// dE_A/dg_B for an earlier token B < A: -sum_h alpha_h SM_{B} J_h g_A.
inline Tensor cross_grad(const Tensor& g, int a, int b, const AttentionEnergyParams& at) {
  at.validate();
  if (b >= a) throw ContractError("cross_grad: needs B < A (causality)");
  if (b < 0 || a >= g.rows()) throw ShapeError("cross_grad: index range");
  const int d = g.cols();
  const double beta = at.effective_beta();
  Tensor out = Tensor::zeros({d});
  for (int h = 0; h < at.heads(); ++h) {
    const auto sm = detail::softmax_window(g, a, at.J[h], beta, at.include_self);
    const double ah = at.alpha.at(static_cast<size_t>(h));
    for (int r = 0; r < d; ++r) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += at.J[h].at2(r, c) * g.at2(a, c);
      out.at(static_cast<size_t>(r)) -= ah * sm[static_cast<size_t>(b)] * acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Boundedness check of the attention energy under the unit-norm convention:
// |L_A - log(A-1)| <= (1 + 2|shift|) |J|_2 with L_A = log sum_{B<A} exp(g_B^T J g_A).
// ---------------------------------------------------------------------------

inline double spectral_norm(const Tensor& m, int iters = 200) {
  const int r = m.rows(), c = m.cols();
  std::vector<double> v(static_cast<size_t>(c), 1.0 / std::sqrt(static_cast<double>(c)));
  std::vector<double> mv(static_cast<size_t>(r)), mtmv(static_cast<size_t>(c));
  double sigma = 0.0;
  for (int it = 0; it < iters; ++it) {
    for (int i = 0; i < r; ++i) {
      double acc = 0.0;
      for (int q = 0; q < c; ++q) acc += m.at2(i, q) * v[static_cast<size_t>(q)];
      mv[static_cast<size_t>(i)] = acc;
    }
    for (int q = 0; q < c; ++q) {
      double acc = 0.0;
      for (int i = 0; i < r; ++i) acc += m.at2(i, q) * mv[static_cast<size_t>(i)];
      mtmv[static_cast<size_t>(q)] = acc;
    }
    double nn = 0.0;
    for (double x : mtmv) nn += x * x;
    nn = std::sqrt(nn);
    if (nn == 0.0) return 0.0;
    double prev = sigma;
    sigma = std::sqrt(nn);
    for (int q = 0; q < c; ++q) v[static_cast<size_t>(q)] = mtmv[static_cast<size_t>(q)] / nn;
    if (it > 4 && std::abs(sigma - prev) <= 1e-14 * std::max(1.0, sigma)) break;
  }
  return sigma;
}

struct BoundCheck {
  bool holds;
  double slack;   // bound - |L_A - log(A-1)|
  double lhs;     // |L_A - log(A-1)|
  double bound;   // (1 + 2|shift|) |J|_2
};

inline BoundCheck energy_bound_check(const Tensor& g, int a, const AttentionEnergyParams& p,
                                     double shift_norm = 0.0) {
  if (p.heads() != 1) throw ContractError("energy_bound_check: single head only");
  if (a < 1) throw ContractError("energy_bound_check: empty window for first token");
  const int d = g.cols();
  double m = -std::numeric_limits<double>::infinity();
  std::vector<double> z(static_cast<size_t>(a));
  for (int b = 0; b < a; ++b) {
    double jg = 0.0;
    for (int r = 0; r < d; ++r) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += p.J[0].at2(r, c) * g.at2(a, c);
      jg += g.at2(b, r) * acc;
    }
    z[static_cast<size_t>(b)] = jg;
    m = std::max(m, jg);
  }
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  BoundCheck out;
  out.lhs = std::abs(lse - std::log(static_cast<double>(a)));
  out.bound = (1.0 + 2.0 * shift_norm) * spectral_norm(p.J[0]);
  out.slack = out.bound - out.lhs;
  out.holds = out.lhs <= out.bound;
  return out;
}

// ---------------------------------------------------------------------------
// Batched update path: -dE_A/dg_A for every token at once, graph-recordable.
// This is the tensorized twin of energy_grad (one gemm chain instead of
// per-token loops); tests pin the two against each other.
// ---------------------------------------------------------------------------

inline Tensor neg_energy_grad_rows(const Tensor& g, const AttentionEnergyParams& at,
                                   const FFEnergyParams& ff) {
  const double beta = at.effective_beta();
  Tensor out;  // sum over heads of alpha_h (SM_h . g) J_h
  for (int h = 0; h < at.heads(); ++h) {
    Tensor scores = scale(matmul_nt(g, matmul(g, at.J[h])), beta);  // [A,B] = beta g_B^T J g_A... see below
    // matmul(g, J)[B,:] = J^T g_B; matmul_nt(g, .)[A,B] = g_A . (J^T g_B) = g_B^T J g_A
    Tensor sm = causal_softmax(scores, at.include_self);
    Tensor head = matmul(matmul(sm, g), at.J[h]);  // rows: J_h^T sum_B SM_AB g_B
    head = mul_scalar_node(head, slice_elem(at.alpha, h));
    out = (h == 0) ? head : add(out, head);
  }
  // FF update rows
  const Tensor z = matmul_nt(g, ff.W1);  // [N, M]
  Tensor ffu;
  switch (ff.variant) {
    case FFVariant::FF1: {
      Tensor s = activation(z, ff.sigma);
      ffu = scale(matmul(mul(s, activation_prime(z, ff.sigma)), ff.W1), 2.0);
      break;
    }
    case FFVariant::FF2W: {
      Tensor s = activation(z, ff.sigma);
      Tensor z2 = matmul_nt(g, ff.W2);
      ffu = add(matmul(s, ff.W2), matmul(mul(activation_prime(z, ff.sigma), z2), ff.W1));
      break;
    }
    default: {
      ffu = matmul(activation(z, Act::Relu), ff.W1);
      break;
    }
  }
  return add(out, ffu);
}

// Per-token E^AT and E^FF at a fixed state, for trajectory recording.
struct TokenEnergies {
  std::vector<double> e_at, e_ff;
};

inline TokenEnergies token_energies_rows(const Tensor& g, const AttentionEnergyParams& at,
                                         const FFEnergyParams& ff) {
  const int n = g.rows();
  TokenEnergies out;
  out.e_at.assign(static_cast<size_t>(n), 0.0);
  out.e_ff.assign(static_cast<size_t>(n), 0.0);
  const double beta = at.effective_beta();
  for (int h = 0; h < at.heads(); ++h) {
    const double ah = at.alpha.at(static_cast<size_t>(h));
    for (int a = 0; a < n; ++a) {
      const int window = at.include_self ? a + 1 : a;
      if (window == 0) continue;
      const auto z = [&] {
        std::vector<double> zz(static_cast<size_t>(window));
        const int d = g.cols();
        std::vector<double> jg(static_cast<size_t>(d), 0.0);
        for (int r = 0; r < d; ++r) {
          double acc = 0.0;
          for (int c = 0; c < d; ++c) acc += at.J[h].at2(r, c) * g.at2(a, c);
          jg[static_cast<size_t>(r)] = acc;
        }
        for (int b = 0; b < window; ++b) {
          double acc = 0.0;
          for (int c = 0; c < d; ++c) acc += g.at2(b, c) * jg[static_cast<size_t>(c)];
          zz[static_cast<size_t>(b)] = beta * acc;
        }
        return zz;
      }();
      double m = -std::numeric_limits<double>::infinity();
      for (double v : z) m = std::max(m, v);
      double s = 0.0;
      for (double v : z) s += std::exp(v - m);
      out.e_at[static_cast<size_t>(a)] -= ah / beta * (m + std::log(s));
    }
  }
  for (int a = 0; a < n; ++a) {
    const int m = ff.hidden(), d = ff.dim();
    double e = 0.0;
    for (int r = 0; r < m; ++r) {
      double z = 0.0;
      for (int c = 0; c < d; ++c) z += ff.W1.at2(r, c) * g.at2(a, c);
      switch (ff.variant) {
        case FFVariant::FF1: {
          const double s = detail::act_f(z, ff.sigma);
          e -= s * s;
          break;
        }
        case FFVariant::FF2W: {
          double w2g = 0.0;
          for (int c = 0; c < d; ++c) w2g += ff.W2.at2(r, c) * g.at2(a, c);
          e -= w2g * detail::act_f(z, ff.sigma);
          break;
        }
        default: {
          const double s = detail::act_f(z, Act::Relu);
          e -= 0.5 * s * s;
          break;
        }
      }
    }
    out.e_ff[static_cast<size_t>(a)] = e;
  }
  return out;
}

}  // namespace nrgpt
