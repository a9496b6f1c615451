#pragma once

// Inference-time dynamics: x^{(t+1)} = x^{(t)} - eta^{(t)} dE/dg^{(t)}, all
// eta parameterizations, trajectory recording, the recurrent baseline block,
// and the descent report used by the stability checks.

#include <iomanip>
#include <ostream>
#include <vector>

#include "nrgpt/energy.hpp"
#include "nrgpt/norm.hpp"

namespace nrgpt {

enum class RateMode { Identity, ScalarGamma, LearnableSymAsym, Unconstrained };

inline const char* to_string(RateMode m) {
  switch (m) {
    case RateMode::Identity: return "identity";
    case RateMode::ScalarGamma: return "scalar_gamma";
    case RateMode::LearnableSymAsym: return "learnable_sym_asym";
    default: return "unconstrained";
  }
}

inline RateMode rate_mode_from(const std::string& s) {
  if (s == "identity") return RateMode::Identity;
  if (s == "scalar_gamma") return RateMode::ScalarGamma;
  if (s == "learnable_sym_asym") return RateMode::LearnableSymAsym;
  if (s == "unconstrained") return RateMode::Unconstrained;
  throw ConfigError("unknown rate mode: " + s);
}

// eta per mode:
//   identity:            eta = I
//   scalar_gamma:        eta = c Gamma, c > 0 (softplus of the raw value when
//                        trained; raw value used directly when softplus_c off)
//   learnable_sym_asym:  eta = U^T U + V - V^T (symmetric part psd by construction)
//   unconstrained:       eta = M, free
// per_step keeps one parameter slot per unroll step.
struct InferenceRate {
  RateMode mode = RateMode::Identity;
  bool per_step = false;
  bool softplus_c = false;
  std::vector<Tensor> c_raw;  // scalar [1] per slot
  std::vector<Tensor> U;      // [D', D] per slot
  std::vector<Tensor> V;      // [D, D] per slot
  std::vector<Tensor> M;      // [D, D] per slot

  static InferenceRate identity() { return {}; }

  static InferenceRate scalar_gamma(double c) {
    InferenceRate r;
    r.mode = RateMode::ScalarGamma;
    if (c <= 0.0) throw ContractError("scalar_gamma needs c > 0");
    r.c_raw.push_back(Tensor::scalar(c));
    return r;
  }

  int slot(int step) const { return per_step ? step : 0; }

  int slots() const {
    switch (mode) {
      case RateMode::Identity: return 0;
      case RateMode::ScalarGamma: return static_cast<int>(c_raw.size());
      case RateMode::LearnableSymAsym: return static_cast<int>(U.size());
      default: return static_cast<int>(M.size());
    }
  }

  // Materialized D x D matrix (identity/scalar_gamma included, for analysis).
  Tensor matrix(int step, const Tensor& gamma, int d) const {
    Tensor eta = Tensor::zeros({d, d});
    switch (mode) {
      case RateMode::Identity:
        for (int i = 0; i < d; ++i) eta.at2(i, i) = 1.0;
        break;
      case RateMode::ScalarGamma: {
        double c = c_raw[static_cast<size_t>(slot(step))].at(0);
        if (softplus_c) c = c > 30.0 ? c : std::log1p(std::exp(c));
        for (int i = 0; i < d; ++i) eta.at2(i, i) = c * gamma.at(static_cast<size_t>(i));
        break;
      }
      case RateMode::LearnableSymAsym: {
        const Tensor& u = U[static_cast<size_t>(slot(step))];
        const Tensor& v = V[static_cast<size_t>(slot(step))];
        Tensor utu = matmul_tn(u, u);
        for (int i = 0; i < d; ++i)
          for (int q = 0; q < d; ++q) eta.at2(i, q) = utu.at2(i, q) + v.at2(i, q) - v.at2(q, i);
        break;
      }
      default:
        eta = M[static_cast<size_t>(slot(step))].detached_copy();
        break;
    }
    return eta;
  }
};

// Applies eta to the (row-per-token) update: rows become (eta v_A)^T.
inline Tensor apply_rate(const Tensor& update, const InferenceRate& rate, int step,
                         const Tensor& gamma) {
  switch (rate.mode) {
    case RateMode::Identity:
      return update;
    case RateMode::ScalarGamma: {
      if (gamma.rank() != 1) throw ConfigError("scalar_gamma requires a normalization with gamma");
      Tensor c = rate.c_raw[static_cast<size_t>(rate.slot(step))];
      if (rate.softplus_c) c = softplus(c);
      return mul_scalar_node(mul_rowvec(update, gamma), c);
    }
    case RateMode::LearnableSymAsym: {
      const Tensor& u = rate.U[static_cast<size_t>(rate.slot(step))];
      const Tensor& v = rate.V[static_cast<size_t>(rate.slot(step))];
      Tensor eta = add(matmul_tn(u, u), sub(v, transpose2d(v)));
      return matmul_nt(update, eta);
    }
    default:
      return matmul_nt(update, rate.M[static_cast<size_t>(rate.slot(step))]);
  }
}

struct EnergyParams {
  AttentionEnergyParams at;
  FFEnergyParams ff;
};

namespace detail {

inline void check_state(const Tensor& x, int step) {
  for (size_t i = 0; i < x.numel(); ++i) {
    const double v = x.at(i);
    if (!std::isfinite(v)) throw DivergedError(step, "non-finite state");
    if (std::abs(v) > 1e6) throw DivergedError(step, "state magnitude exceeded 1e6");
  }
}

}  // namespace detail

// One simultaneous update of all tokens. Gradients are taken at fixed g, as
// in the update rule; the returned state is on the same tape as the inputs.
inline Tensor nrgpt_step(const Tensor& x, const EnergyParams& p, const InferenceRate& rate,
                         const NormParams& norm, int step = 0) {
  Tensor g = norm_rows(x, norm);
  Tensor upd = neg_energy_grad_rows(g, p.at, p.ff);
  if (!all_finite(upd)) throw DivergedError(step, "non-finite energy gradient");
  Tensor next = add(x, apply_rate(upd, rate, step, norm.gamma));
  detail::check_state(next, step);
  return next;
}

// Sequential (Gauss-Seidel) variant: tokens update one at a time, each seeing
// the already-updated states of earlier tokens. Analysis-only path.
inline Tensor nrgpt_step_sequential(const Tensor& x, const EnergyParams& p,
                                    const InferenceRate& rate, const NormParams& norm,
                                    int step = 0) {
  Tensor cur = x.detached_copy();
  const int n = x.rows(), d = x.cols();
  const Tensor eta = rate.matrix(step, norm.gamma, d);
  for (int a = 0; a < n; ++a) {
    Tensor g = Tensor::zeros({n, d});
    for (int b = 0; b < n; ++b) {
      Tensor gb = normalize(row(cur, b), norm);
      for (int c = 0; c < d; ++c) g.at2(b, c) = gb.at(static_cast<size_t>(c));
    }
    Tensor de = energy_grad(g, a, p.at, p.ff);
    if (!all_finite(de)) throw DivergedError(step, "non-finite energy gradient");
    for (int r = 0; r < d; ++r) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += eta.at2(r, c) * de.at(static_cast<size_t>(c));
      cur.at2(a, r) -= acc;
    }
  }
  detail::check_state(cur, step);
  return cur;
}

// ---------------------------------------------------------------------------
// Trajectory: one record per (step, token); step 0 is the initial state, so a
// T-step unroll yields T+1 records per token. Delta columns describe the
// transition into the recorded state (zero at step 0).
// ---------------------------------------------------------------------------

struct Trajectory {
  int tokens = 0;
  std::vector<double> e_total, e_at, e_ff, grad_norm, dg_norm, dx_norm;

  int steps() const {
    return tokens == 0 ? 0 : static_cast<int>(e_total.size()) / tokens - 1;
  }
  size_t idx(int step, int token) const {
    return static_cast<size_t>(step) * tokens + static_cast<size_t>(token);
  }

  void to_csv(std::ostream& os) const {
    os << "step,token,E_total,E_AT,E_FF,grad_norm,dg_norm,dx_norm\n";
    os << std::setprecision(17);
    for (int t = 0; t <= steps(); ++t)
      for (int a = 0; a < tokens; ++a) {
        const size_t i = idx(t, a);
        os << t << ',' << a << ',' << e_total[i] << ',' << e_at[i] << ',' << e_ff[i] << ','
           << grad_norm[i] << ',' << dg_norm[i] << ',' << dx_norm[i] << '\n';
      }
  }
};

namespace detail {

inline void record_state(Trajectory& traj, const Tensor& g, const Tensor& neg_grad,
                         const Tensor* g_prev, const Tensor* x_prev, const Tensor& x,
                         const EnergyParams& p) {
  const int n = g.rows(), d = g.cols();
  const TokenEnergies e = token_energies_rows(g, p.at, p.ff);
  for (int a = 0; a < n; ++a) {
    traj.e_at.push_back(e.e_at[static_cast<size_t>(a)]);
    traj.e_ff.push_back(e.e_ff[static_cast<size_t>(a)]);
    traj.e_total.push_back(e.e_at[static_cast<size_t>(a)] + e.e_ff[static_cast<size_t>(a)]);
    double gn = 0.0, dg = 0.0, dx = 0.0;
    for (int c = 0; c < d; ++c) {
      const double v = neg_grad.at2(a, c);
      gn += v * v;
      if (g_prev) {
        const double w = g.at2(a, c) - g_prev->at2(a, c);
        dg += w * w;
      }
      if (x_prev) {
        const double w = x.at2(a, c) - x_prev->at2(a, c);
        dx += w * w;
      }
    }
    traj.grad_norm.push_back(std::sqrt(gn));
    traj.dg_norm.push_back(std::sqrt(dg));
    traj.dx_norm.push_back(std::sqrt(dx));
  }
}

}  // namespace detail

// Applies nrgpt_step T times. When traj is given, records T+1 states; the
// returned tensor stays on the caller's tape either way.
inline Tensor unroll(const Tensor& x0, int steps, const EnergyParams& p, const InferenceRate& rate,
                     const NormParams& norm, Trajectory* traj = nullptr) {
  if (steps < 1) throw ContractError("unroll: T >= 1");
  if (traj) {
    *traj = Trajectory{};
    traj->tokens = x0.rows();
  }
  Tensor x = x0;
  Tensor g_prev, x_prev;
  for (int t = 0; t <= steps; ++t) {
    Tensor g = norm_rows(x, norm);
    Tensor upd = neg_energy_grad_rows(g, p.at, p.ff);
    if (!all_finite(upd)) throw DivergedError(t, "non-finite energy gradient");
    if (traj)
      detail::record_state(*traj, g, upd, t > 0 ? &g_prev : nullptr, t > 0 ? &x_prev : nullptr, x, p);
    if (t == steps) break;
    if (traj) {
      g_prev = g.detached_copy();
      x_prev = x.detached_copy();
    }
    x = add(x, apply_rate(upd, rate, t, norm.gamma));
    detail::check_state(x, t);
  }
  return x;
}

// ---------------------------------------------------------------------------
// GPT_Rec_parallel baseline: x' = x + AT(g) + FF(g), g = LN(x).
// ---------------------------------------------------------------------------

struct BaselineBlock {
  std::vector<Tensor> Wk, Wq, Wv, Wp;  // per head: [Y, D]
  Tensor W1, W2;                       // [M, D] each; FF(g) = W2^T sigma(W1 g)
  Act sigma = Act::Gelu;
  double beta = 0.0;  // 0 -> 1/sqrt(Y)
  bool include_self = false;

  int heads() const { return static_cast<int>(Wk.size()); }
  double effective_beta() const {
    return beta > 0.0 ? beta : 1.0 / std::sqrt(static_cast<double>(Wk[0].rows()));
  }
};

inline Tensor baseline_parallel_step(const Tensor& x, const BaselineBlock& w,
                                     const NormParams& norm, int step = 0) {
  Tensor g = norm_rows(x, norm);
  const double beta = w.effective_beta();
  Tensor at_out;
  for (int h = 0; h < w.heads(); ++h) {
    Tensor k = matmul_nt(g, w.Wk[static_cast<size_t>(h)]);
    Tensor q = matmul_nt(g, w.Wq[static_cast<size_t>(h)]);
    Tensor v = matmul_nt(g, w.Wv[static_cast<size_t>(h)]);
    Tensor sm = causal_softmax(scale(matmul_nt(q, k), beta), w.include_self);
    Tensor head = matmul(matmul(sm, v), w.Wp[static_cast<size_t>(h)]);
    at_out = (h == 0) ? head : add(at_out, head);
  }
  Tensor ff_out = matmul(activation(matmul_nt(g, w.W1), w.sigma), w.W2);
  Tensor next = add(add(x, at_out), ff_out);
  detail::check_state(next, step);
  return next;
}

// ---------------------------------------------------------------------------
// Descent report over a recorded trajectory. Token 0 must be monotone from
// the start; a later token A is only held to monotonicity once every earlier
// token's g-delta has settled below tol for the rest of the run.
// ---------------------------------------------------------------------------

struct DescentViolation {
  int token;
  int step;        // E rose entering this step
  double increase;
};

struct DescentReport {
  std::vector<DescentViolation> violations;
  std::vector<int> settle_step;  // per token: first step from which all earlier tokens stay settled
  bool clean() const { return violations.empty(); }
};

inline DescentReport descent_report(const Trajectory& traj, double delta_tol = 1e-6,
                                    double slack = 1e-10) {
  DescentReport rep;
  const int T = traj.steps(), n = traj.tokens;
  rep.settle_step.assign(static_cast<size_t>(n), 0);
  // settled_from[b] = earliest step s such that dg_norm[t][b] < tol for all t > s
  std::vector<int> settled_from(static_cast<size_t>(n), 0);
  for (int b = 0; b < n; ++b) {
    int s = 0;
    for (int t = T; t >= 1; --t) {
      if (traj.dg_norm[traj.idx(t, b)] >= delta_tol) {
        s = t;
        break;
      }
    }
    settled_from[static_cast<size_t>(b)] = s;
  }
  for (int a = 0; a < n; ++a) {
    int from = 0;
    for (int b = 0; b < a; ++b) from = std::max(from, settled_from[static_cast<size_t>(b)]);
    rep.settle_step[static_cast<size_t>(a)] = from;
    for (int t = from + 1; t <= T; ++t) {
      const double inc = traj.e_total[traj.idx(t, a)] - traj.e_total[traj.idx(t - 1, a)];
      if (inc > slack) rep.violations.push_back({a, t, inc});
    }
  }
  return rep;
}

}  // namespace nrgpt
