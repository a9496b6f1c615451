#pragma once

// Randomized dual-oracle gradient checks: analytic vs reverse-mode vs central
// finite differences, over small random energy configs, the normalization
// Jacobians, and end-to-end weight gradients of a tiny model.

#include <string>
#include <vector>

#include "nrgpt/model.hpp"

namespace nrgpt {

struct GradCheckOptions {
  int trials = 100;
  uint64_t seed = 90210;
  double tol_analytic = 1e-10;  // analytic vs autodiff, relative
  double tol_fd = 1e-6;         // autodiff vs central differences, relative
  double fd_h = 1e-5;
  bool inject_ff_sign_flip = false;  // test fixture: corrupt the FF analytic gradient
};

struct GradCheckReport {
  int trials_run = 0;
  int failures = 0;
  std::vector<std::string> messages;
  double worst_analytic_rel = 0.0;
  double worst_fd_rel = 0.0;
  bool ok() const { return failures == 0; }
};

namespace gradcheck_detail {

inline double rel_err(const Tensor& a, const Tensor& ref) {
  return max_abs_diff(a, ref) / (norm2(ref) + 1e-8);
}

// d token_energy / d g by central differences over every component of g.
inline Tensor fd_energy_grad(const Tensor& g, int a, const AttentionEnergyParams& at,
                             const FFEnergyParams& ff, double h) {
  Tensor out = Tensor::zeros(g.shape);
  for (size_t i = 0; i < g.numel(); ++i) {
    Tensor gp = g.detached_copy(), gm = g.detached_copy();
    gp.at(i) += h;
    gm.at(i) -= h;
    out.at(i) = (token_energy(gp, a, at, ff).item() - token_energy(gm, a, at, ff).item()) / (2.0 * h);
  }
  return out;
}

}  // namespace gradcheck_detail

inline GradCheckReport run_gradcheck(const GradCheckOptions& opt) {
  using gradcheck_detail::rel_err;
  GradCheckReport rep;
  Rng rng(opt.seed);
  auto fail = [&](const std::string& msg) {
    rep.failures += 1;
    if (rep.messages.size() < 50) rep.messages.push_back(msg);
  };

  // --- energy gradients: analytic vs autodiff vs finite differences --------
  for (int trial = 0; trial < opt.trials; ++trial) {
    const int h = 1 + static_cast<int>(rng.below(2));
    const int d = h * (1 + static_cast<int>(rng.below(static_cast<uint64_t>(8 / h))));
    const int n = 2 + static_cast<int>(rng.below(5));
    const int a = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(n - 1)));
    const FFVariant variant = static_cast<FFVariant>(trial % 3);
    const NormKind nk = (trial / 3) % 2 == 0 ? NormKind::RmsNorm : NormKind::LayerNorm;

    AttentionEnergyParams at;
    for (int i = 0; i < h; ++i) at.J.push_back(randn({d, d}, rng, 0.4));
    at.alpha = rand_uniform({h}, rng, 0.2, 1.0);
    FFEnergyParams ff;
    ff.variant = variant;
    ff.sigma = variant == FFVariant::DamRelu ? Act::Relu : (trial % 2 ? Act::Gelu : Act::Relu);
    if (variant == FFVariant::DamRelu) ff.sigma = Act::Relu;
    const int m = 2 * d;
    ff.W1 = randn({m, d}, rng, 0.4);
    if (variant == FFVariant::FF2W) ff.W2 = randn({m, d}, rng, 0.4);

    // g comes out of the normalization, as it does in the dynamics
    NormParams norm = nk == NormKind::RmsNorm
                          ? NormParams::rmsnorm(rand_uniform({d}, rng, 0.5, 1.5))
                          : NormParams::layernorm(rand_uniform({d}, rng, 0.5, 1.5),
                                                  randn({d}, rng, 0.2));
    Tensor x = randn({n, d}, rng, 1.0);
    Tensor g = Tensor::zeros({n, d});
    for (int r = 0; r < n; ++r) {
      Tensor gr = normalize(row(x, r), norm);
      for (int c = 0; c < d; ++c) g.at2(r, c) = gr.at(static_cast<size_t>(c));
    }

    Tape tape;
    Tensor gl = tape.leaf(g);
    tape.backward(token_energy(gl, a, at, ff));
    Tensor auto_grad = tape.grad(gl);

    Tensor analytic = Tensor::zeros({n, d});
    {
      Tensor ga = energy_grad(g, a, at, ff);
      if (opt.inject_ff_sign_flip) {
        AttentionEnergyParams at_off = at;
        at_off.alpha = Tensor::zeros({h});
        Tensor ff_only = energy_grad(g, a, at_off, ff);
        for (int c = 0; c < d; ++c)
          ga.at(static_cast<size_t>(c)) -= 2.0 * ff_only.at(static_cast<size_t>(c));
      }
      for (int c = 0; c < d; ++c) analytic.at2(a, c) = ga.at(static_cast<size_t>(c));
      for (int b = 0; b < a; ++b) {
        Tensor cb = cross_grad(g, a, b, at);
        for (int c = 0; c < d; ++c) analytic.at2(b, c) = cb.at(static_cast<size_t>(c));
      }
    }

    const double rel_an = rel_err(analytic, auto_grad);
    rep.worst_analytic_rel = std::max(rep.worst_analytic_rel, rel_an);
    if (rel_an > opt.tol_analytic)
      fail("trial " + std::to_string(trial) + ": analytic " + std::string(to_string(variant)) +
           " energy gradient vs autodiff, rel " + std::to_string(rel_an));

    Tensor fd = gradcheck_detail::fd_energy_grad(g, a, at, ff, opt.fd_h);
    const double rel_fd = rel_err(auto_grad, fd);
    rep.worst_fd_rel = std::max(rep.worst_fd_rel, rel_fd);
    if (rel_fd > opt.tol_fd)
      fail("trial " + std::to_string(trial) + ": autodiff vs finite differences (" +
           std::string(to_string(variant)) + "), rel " + std::to_string(rel_fd));
    rep.trials_run += 1;
  }

  // --- normalization Jacobians vs finite differences -----------------------
  for (int trial = 0; trial < std::max(10, opt.trials / 4); ++trial) {
    const int d = 2 + static_cast<int>(rng.below(7));
    const bool ln = trial % 2 == 0;
    NormParams p = ln ? NormParams::layernorm(rand_uniform({d}, rng, 0.5, 1.5), randn({d}, rng, 0.2))
                      : NormParams::rmsnorm(rand_uniform({d}, rng, 0.5, 1.5));
    Tensor x = randn({d}, rng, 1.0);
    if (norm2(x) < 0.1) continue;
    Tensor jac = norm_jacobian(x, p);
    const double h = 1e-6;
    double worst = 0.0;
    for (int q = 0; q < d; ++q) {
      Tensor xp = x.detached_copy(), xm = x.detached_copy();
      xp.at(static_cast<size_t>(q)) += h;
      xm.at(static_cast<size_t>(q)) -= h;
      Tensor gp = normalize(xp, p), gm = normalize(xm, p);
      for (int i = 0; i < d; ++i)
        worst = std::max(worst, std::abs((gp.at(static_cast<size_t>(i)) - gm.at(static_cast<size_t>(i))) / (2 * h) -
                                         jac.at2(i, q)));
    }
    if (worst > 1e-7)
      fail("norm trial " + std::to_string(trial) + ": " + to_string(p.kind) +
           " jacobian vs finite differences, abs " + std::to_string(worst));
  }

  // --- end-to-end weight gradients on a tiny model -------------------------
  for (int round = 0; round < 2; ++round) {
    ModelConfig mc;
    mc.kind = round == 0 ? ModelKind::NrgptFF1 : ModelKind::NrgptFF2W;
    mc.vocab_size = 12;
    mc.context = 6;
    mc.embed_dim = 4;
    mc.heads = 2;
    mc.steps = 2;
    mc.norm_kind = round == 0 ? NormKind::RmsNorm : NormKind::LayerNorm;
    mc.rate_mode = round == 0 ? RateMode::ScalarGamma : RateMode::Unconstrained;
    mc.seed = opt.seed + static_cast<uint64_t>(round);
    Model model(mc);
    std::vector<int> ids = {3, 7, 1, 11, 0, 5};
    std::vector<int> targets = {7, 1, 11, 0, 5, 2};

    Tape tape;
    Weights wl = model.leafed(tape);
    tape.backward(cross_entropy_mean(model.forward(ids, wl), targets));
    auto leafed = nrgpt::parameters(wl, mc);
    auto params = model.parameters();
    for (size_t p = 0; p < params.size(); ++p) {
      Tensor autog = tape.grad(*leafed[p].second);
      Tensor fd = Tensor::zeros(autog.shape);
      Tensor& wt = *params[p].second;
      for (size_t i = 0; i < wt.numel(); ++i) {
        const double keep = wt.at(i);
        wt.at(i) = keep + opt.fd_h;
        const double up = cross_entropy_mean(model.forward(ids, model.w), targets).item();
        wt.at(i) = keep - opt.fd_h;
        const double dn = cross_entropy_mean(model.forward(ids, model.w), targets).item();
        wt.at(i) = keep;
        fd.at(i) = (up - dn) / (2.0 * opt.fd_h);
      }
      const double rel = rel_err(autog, fd);
      if (rel > 1e-5)
        fail("model weight grad (" + params[p].first + ") vs finite differences, rel " +
             std::to_string(rel));
    }
  }

  return rep;
}

}  // namespace nrgpt
