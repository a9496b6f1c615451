#include <catch2/catch_amalgamated.hpp>

#include "nrgpt/norm.hpp"
#include "oracles.hpp"

using namespace nrgpt;

TEST_CASE("rmsnorm forward") {
  NormParams p = NormParams::rmsnorm(Tensor::from({2}, {1, 1}), 0.0);
  Tensor g = normalize(Tensor::from({2}, {3, 4}), p);
  // sqrt(2) * (3,4) / 5
  CHECK_THAT(g.at(0), Catch::Matchers::WithinAbs(std::sqrt(2.0) * 3.0 / 5.0, 1e-15));
  CHECK_THAT(g.at(1), Catch::Matchers::WithinAbs(std::sqrt(2.0) * 4.0 / 5.0, 1e-15));

  CHECK_THROWS_AS(normalize(Tensor::from({2}, {0, 0}), p), ContractError);
}

TEST_CASE("layernorm constant vector collapses to shift") {
  Rng rng(4);
  Tensor gamma = rand_uniform({5}, rng, 0.5, 2.0);
  Tensor shift = rand_uniform({5}, rng, -1, 1);
  NormParams p = NormParams::layernorm(gamma, shift, 1e-5);
  Tensor g = normalize(Tensor::full({5}, 3.25), p);
  for (int i = 0; i < 5; ++i)
    CHECK_THAT(g.at(static_cast<size_t>(i)),
               Catch::Matchers::WithinAbs(shift.at(static_cast<size_t>(i)), 1e-12));
}

TEST_CASE("kind none is the identity") {
  Rng rng(9);
  Tensor x = rand_uniform({7}, rng, -2, 2);
  Tensor g = normalize(x, NormParams::none());
  CHECK(max_abs_diff(x, g) == 0.0);
}

TEST_CASE("rmsnorm jacobian hand case and null direction") {
  NormParams p = NormParams::rmsnorm(Tensor::from({2}, {1, 1}), 0.0);
  Tensor j = norm_jacobian(Tensor::from({2}, {1, 0}), p);
  // d/dx of sqrt(2) x/|x| at (1,0) = sqrt(2) [[0,0],[0,1]]
  CHECK_THAT(j.at2(0, 0), Catch::Matchers::WithinAbs(0.0, 1e-15));
  CHECK_THAT(j.at2(0, 1), Catch::Matchers::WithinAbs(0.0, 1e-15));
  CHECK_THAT(j.at2(1, 0), Catch::Matchers::WithinAbs(0.0, 1e-15));
  CHECK_THAT(j.at2(1, 1), Catch::Matchers::WithinAbs(std::sqrt(2.0), 1e-15));

  // jacobian . xhat = 0 (scale invariance)
  Rng rng(21);
  for (int t = 0; t < 20; ++t) {
    const int d = 3 + static_cast<int>(rng.below(6));
    NormParams pr = NormParams::rmsnorm(rand_uniform({d}, rng, 0.5, 1.5), 0.0);
    Tensor x = randn({d}, rng);
    Tensor jac = norm_jacobian(x, pr);
    const double nx = norm2(x);
    for (int i = 0; i < d; ++i) {
      double acc = 0;
      for (int q = 0; q < d; ++q) acc += jac.at2(i, q) * x.at(static_cast<size_t>(q)) / nx;
      CHECK_THAT(acc, Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
  }
}

TEST_CASE("jacobians match finite differences") {
  Rng rng(31);
  for (int t = 0; t < 100; ++t) {
    const int d = 2 + static_cast<int>(rng.below(7));
    const bool ln = t % 2 == 0;
    NormParams p = ln ? NormParams::layernorm(rand_uniform({d}, rng, 0.5, 1.5),
                                              randn({d}, rng, 0.3), 1e-5)
                      : NormParams::rmsnorm(rand_uniform({d}, rng, 0.5, 1.5), 0.0);
    Tensor x = randn({d}, rng);
    if (norm2(x) < 0.2) continue;
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
    CHECK(worst <= 1e-7);
  }
}

TEST_CASE("projection factor") {
  // rmsnorm at (1,0): P = I - xhat xhat^T = [[0,0],[0,1]]
  NormParams p = NormParams::rmsnorm(Tensor::from({2}, {1, 1}), 0.0);
  Tensor proj = norm_projection(Tensor::from({2}, {1, 0}), p);
  CHECK_THAT(proj.at2(0, 0), Catch::Matchers::WithinAbs(0.0, 1e-15));
  CHECK_THAT(proj.at2(1, 1), Catch::Matchers::WithinAbs(1.0, 1e-15));

  CHECK_THROWS_AS(norm_projection(Tensor::from({2}, {1, 0}),
                                  NormParams{NormKind::RmsNorm, Tensor::from({2}, {1, 0}),
                                             Tensor::zeros({2}), 0.0}),
                  ContractError);

  Rng rng(47);
  for (int t = 0; t < 60; ++t) {
    const int d = 2 + static_cast<int>(rng.below(9));
    const bool ln = t % 2 == 0;
    NormParams np = ln ? NormParams::layernorm(rand_uniform({d}, rng, 0.5, 1.5),
                                               randn({d}, rng, 0.3), 1e-5)
                       : NormParams::rmsnorm(rand_uniform({d}, rng, 0.5, 1.5), 0.0);
    Tensor x = randn({d}, rng);
    if (ln && d < 2) continue;
    Tensor pr = norm_projection(x, np);

    // symmetric
    double asym = 0.0;
    for (int i = 0; i < d; ++i)
      for (int q = 0; q < d; ++q) asym = std::max(asym, std::abs(pr.at2(i, q) - pr.at2(q, i)));
    CHECK(asym <= 1e-12);

    // relation jacobian = (1/r) Gamma P holds exactly
    Tensor jac = norm_jacobian(x, np);
    const double r = norm_radius(x, np);
    double relerr = 0.0;
    for (int i = 0; i < d; ++i)
      for (int q = 0; q < d; ++q)
        relerr = std::max(relerr, std::abs(jac.at2(i, q) - pr.at2(i, q) * np.gamma.at(static_cast<size_t>(i)) / r));
    CHECK(relerr <= 1e-12);

    // positive semi-definite
    CHECK(oracles::min_symmetric_eigenvalue(pr) >= -1e-10);

    // idempotence: exact for rmsnorm (eps 0), O(eps) for layernorm
    Tensor p2 = matmul(pr, pr);
    if (!ln) {
      CHECK(max_abs_diff(p2, pr) <= 1e-12);
    } else if (norm2(x) > 0.5) {
      CHECK(max_abs_diff(p2, pr) <= 1e-3);
    }
  }
}

TEST_CASE("layernorm idempotence defect is order epsilon") {
  // RMS(x - mu) >= 0.1 keeps eps/r^2 <= 1e-3 at eps = 1e-5; include a draw
  // pinned right at the boundary.
  Rng rng(52);
  for (int t = 0; t < 50; ++t) {
    const int d = 3 + static_cast<int>(rng.below(10));
    NormParams np = NormParams::layernorm(Tensor::full({d}, 1.0), Tensor::zeros({d}), 1e-5);
    Tensor x = randn({d}, rng);
    double mu = 0;
    for (int i = 0; i < d; ++i) mu += x.at(static_cast<size_t>(i)) / d;
    double var = 0;
    for (int i = 0; i < d; ++i) {
      const double u = x.at(static_cast<size_t>(i)) - mu;
      var += u * u / d;
    }
    const bool boundary = t == 0;
    if (boundary) {
      // rescale so Var = 0.01 exactly
      const double k = std::sqrt(0.01 / var);
      for (int i = 0; i < d; ++i) x.at(static_cast<size_t>(i)) = mu + (x.at(static_cast<size_t>(i)) - mu) * k;
    } else if (std::sqrt(var) < 0.1) {
      continue;
    }
    Tensor pr = norm_projection(x, np);
    CHECK(max_abs_diff(matmul(pr, pr), pr) <= 1e-3);
  }
}

TEST_CASE("rmsnorm output norm identity") {
  Rng rng(61);
  for (int t = 0; t < 30; ++t) {
    const int d = 2 + static_cast<int>(rng.below(9));
    Tensor gamma = rand_uniform({d}, rng, 0.5, 1.5);
    NormParams p = NormParams::rmsnorm(gamma, 0.0);
    Tensor x = randn({d}, rng);
    if (norm2(x) < 0.1) continue;
    Tensor g = normalize(x, p);
    double gx = 0.0;
    const double nx = norm2(x);
    for (int i = 0; i < d; ++i) {
      const double gxh = gamma.at(static_cast<size_t>(i)) * x.at(static_cast<size_t>(i)) / nx;
      gx += gxh * gxh;
    }
    CHECK_THAT(norm2(g) * norm2(g), Catch::Matchers::WithinRel(d * gx, 1e-12));
    // gamma = 1 gives |g|^2 = D exactly
    Tensor gu = normalize(x, NormParams::rmsnorm(Tensor::full({d}, 1.0), 0.0));
    CHECK_THAT(norm2(gu) * norm2(gu), Catch::Matchers::WithinRel(static_cast<double>(d), 1e-12));
  }
}

TEST_CASE("layernorm boundedness in the unit-norm convention") {
  // rescale the normalized part by 1/sqrt(D); with gamma = 1 the result is a
  // near-unit vector plus shift and must satisfy 1 - 2|shift| <= |g|^2 <= 1 + 2|shift|
  Rng rng(71);
  for (int t = 0; t < 100; ++t) {
    const int d = 4 + static_cast<int>(rng.below(13));
    Tensor shift = randn({d}, rng, 0.08);
    NormParams p = NormParams::layernorm(Tensor::full({d}, 1.0), Tensor::zeros({d}), 1e-5);
    Tensor x = randn({d}, rng);
    Tensor g0 = normalize(x, p);
    Tensor ghat = Tensor::zeros({d});
    for (int i = 0; i < d; ++i)
      ghat.at(static_cast<size_t>(i)) = g0.at(static_cast<size_t>(i)) / std::sqrt(static_cast<double>(d)) +
                                        shift.at(static_cast<size_t>(i));
    const double n2 = norm2(ghat) * norm2(ghat);
    const double s = norm2(shift);
    CHECK(n2 >= 1.0 - 2.0 * s - 1e-9);
    CHECK(n2 <= 1.0 + 2.0 * s + 1e-9);
  }
}

TEST_CASE("norm_rows backward matches finite differences") {
  Rng rng(81);
  for (int t = 0; t < 8; ++t) {
    const int n = 3, d = 5;
    const bool ln = t % 2 == 0;
    Tensor gamma = rand_uniform({d}, rng, 0.5, 1.5);
    Tensor shift = randn({d}, rng, 0.3);
    NormParams p = ln ? NormParams::layernorm(gamma, shift, 1e-5) : NormParams::rmsnorm(gamma, 1e-5);
    Tensor x = randn({n, d}, rng);
    Tensor probe = randn({n, d}, rng);

    auto loss_of = [&](const Tensor& xv, const NormParams& pv) {
      return sum(mul(norm_rows(xv, pv), probe)).item();
    };

    Tape tape;
    Tensor xl = tape.leaf(x);
    NormParams pl = p;
    pl.gamma = tape.leaf(p.gamma);
    if (ln) pl.shift = tape.leaf(p.shift);
    tape.backward(sum(mul(norm_rows(xl, pl), probe)));

    Tensor fdx = oracles::fd_grad([&](const Tensor& v) { return loss_of(v, p); }, x);
    CHECK(max_abs_diff(tape.grad(xl), fdx) / (norm2(fdx) + 1e-8) <= 1e-6);

    Tensor fdg = oracles::fd_grad(
        [&](const Tensor& gv) {
          NormParams pv = p;
          pv.gamma = gv;
          return loss_of(x, pv);
        },
        p.gamma);
    CHECK(max_abs_diff(tape.grad(pl.gamma), fdg) / (norm2(fdg) + 1e-8) <= 1e-6);

    if (ln) {
      Tensor fds = oracles::fd_grad(
          [&](const Tensor& sv) {
            NormParams pv = p;
            pv.shift = sv;
            return loss_of(x, pv);
          },
          p.shift);
      CHECK(max_abs_diff(tape.grad(pl.shift), fds) / (norm2(fds) + 1e-8) <= 1e-6);
    }
  }
}

TEST_CASE("rmsnorm rejects nonzero shift") {
  NormParams p;
  p.kind = NormKind::RmsNorm;
  p.gamma = Tensor::full({3}, 1.0);
  p.shift = Tensor::from({3}, {0, 0.5, 0});
  p.epsilon = 0.0;
  CHECK_THROWS_AS(p.validate(), ContractError);
}
