#include <algorithm>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "fsl/fedsim.hpp"
#include "fsl/metrics.hpp"
#include "fsl/theory.hpp"
#include "testbed.hpp"

using namespace fsl;
using fsl::testing::cross_testbed;
using fsl::testing::vec;

namespace {

double sq(double v) { return v * v; }

TheoryConstants protocol(int n, int s, int k, int k0, double gamma, double lr_global,
                         double effective_step) {
  TheoryConstants tc;
  tc.N = n;
  tc.S = s;
  tc.K = k;
  tc.K0 = k0;
  tc.gamma = gamma;
  tc.lr_global = lr_global;
  tc.lr_local = effective_step / (k * lr_global);
  tc.lr_server = effective_step / k0;
  return tc;
}

// Cross testbed constants (G^2 = 1) with the server at `c0` and full batches.
TheoryConstants testbed_constants(const ParamVector& c0, int s, double gamma, double step) {
  TheoryConstants tc = protocol(4, s, 5, 5, gamma, std::sqrt(static_cast<double>(s)), step);
  const TheoryConstants exact = exact_constants_for_quadratics(
      c0, {vec({1, 0}), vec({-1, 0}), vec({0, 1}), vec({0, -1})});
  tc.L = exact.L;
  tc.G = exact.G;
  tc.xi_bar = exact.xi_bar;
  return tc;
}

FederationConfig engine_config(const TheoryConstants& tc, int rounds) {
  FederationConfig cfg;
  cfg.num_clients = tc.N;
  cfg.clients_per_round = tc.S;
  cfg.local_steps = tc.K;
  cfg.server_steps = tc.K0;
  cfg.lr_local = tc.lr_local;
  cfg.lr_global = tc.lr_global;
  cfg.lr_server = tc.lr_server;
  cfg.gamma = tc.gamma;
  cfg.rounds = rounds;
  return cfg;
}

// Composite optimum of the cross testbed: client mean 0, server c0.
double optimal_gap(const ParamVector& x, const ParamVector& c0, double gamma) {
  const auto tb = cross_testbed(c0);
  const ParamVector x_star = gamma * c0 / (1.0 + gamma);
  return evaluate_objectives(tb.model, x, tb.clients, tb.server, gamma).Ftilde -
         evaluate_objectives(tb.model, x_star, tb.clients, tb.server, gamma).Ftilde;
}

}  // namespace

TEST_CASE("participation factor") {
  TheoryConstants tc;
  tc.N = 10;
  tc.S = 4;
  CHECK(derive_constants(tc).rho_s == doctest::Approx(6.0 / 9.0));
  tc.S = 10;
  CHECK(derive_constants(tc).rho_s == 0.0);
  tc.N = tc.S = 1;
  CHECK(derive_constants(tc).rho_s == 0.0);
}

TEST_CASE("kappa at gamma = 1, lr_global = 1") {
  const TheoryConstants tc = protocol(4, 4, 1, 1, 1.0, 1.0, 0.01);
  CHECK(derive_constants(tc).kappa == 5.0);
}

TEST_CASE("derived constants match a direct evaluation of their definitions") {
  Rng rng = derive_stream(5, StreamTag::kInit);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    TheoryConstants tc = protocol(8, 3, 4, 6, u(rng), u(rng), 0.01 * u(rng));
    tc.L = u(rng);
    tc.G = u(rng);
    tc.xi_bar = u(rng);
    tc.sigma = u(rng);
    tc.sigma0 = u(rng);
    const DerivedConstants dc = derive_constants(tc);
    const double g = tc.gamma;
    const double rho = 5.0 / 7.0;
    const double psi = g * g * sq(tc.sigma0) / 6 + sq(tc.sigma) / 12 + rho * sq(tc.G) / 3;
    const double kappa = std::max(4 * g * g * g, 2 / sq(tc.lr_global) + 3 * g * g);
    const double phi = g * g * psi + 2 * g * g / 3 * (sq(tc.sigma) / 4 + rho * sq(tc.G)) +
                       (2 * sq(tc.G) + sq(tc.sigma) / 4) / sq(tc.lr_global);
    const double a = tc.effective_step() * tc.L;
    const double h = g + 0.5 - a * (1 + g) / 2 * (3 * g + 3 + 16 * kappa * a);
    CHECK(dc.rho_s == doctest::Approx(rho).epsilon(1e-14));
    CHECK(dc.psi == doctest::Approx(psi).epsilon(1e-14));
    CHECK(dc.kappa == doctest::Approx(kappa).epsilon(1e-14));
    CHECK(dc.phi == doctest::Approx(phi).epsilon(1e-14));
    CHECK(dc.h == doctest::Approx(h).epsilon(1e-13));
    CHECK(dc.G3 == doctest::Approx(sq(tc.sigma) / 12 + rho * sq(tc.G) / 3 +
                                   g * g * sq(tc.sigma0) / 18).epsilon(1e-14));
    CHECK(dc.M_sq == doctest::Approx(g * g * sq(tc.sigma0) * 3 + sq(tc.sigma) +
                                     rho * 4 * sq(tc.G)).epsilon(1e-14));
  }
}

TEST_CASE("tight step cap") {
  CHECK(max_effective_step(protocol(4, 4, 1, 1, 1.0, 2.0, 0.1)) == doctest::Approx(2.0 / 9.0));
  CHECK(max_effective_step(protocol(4, 4, 1, 1, 0.0, 1.0, 0.1)) == doctest::Approx(2.0 / 9.0));
  CHECK(max_effective_step(protocol(4, 4, 1, 1, 0.0, 0.5, 0.1)) == doctest::Approx(0.125));
  TheoryConstants tc = protocol(4, 4, 1, 1, 1.0, 2.0, 0.1);
  double previous = max_effective_step(tc);
  for (double L : {2.0, 10.0, 1e3, 1e9}) {
    tc.L = L;
    CHECK(max_effective_step(tc) < previous);
    previous = max_effective_step(tc);
  }
  CHECK(previous < 1e-9);
}

TEST_CASE("conservative step cap and the descent coefficient") {
  const TheoryConstants tc = protocol(4, 4, 1, 1, 1.0, 1.0, 0.01);
  CHECK(derive_constants(tc).kappa == 5.0);
  CHECK(conservative_effective_step(tc) == doctest::Approx(0.025));
  const double cap = conservative_effective_step(tc);
  const TheoryConstants at_cap = protocol(4, 4, 1, 1, 1.0, 1.0, cap);
  CHECK(derive_constants(at_cap).h >= 1.0);
  const TheoryConstants tiny = protocol(4, 4, 1, 1, 1.0, 1.0, 1e-12);
  CHECK(derive_constants(tiny).h == doctest::Approx(1.5));
}

TEST_CASE("descent coefficient stays above (3 gamma + 1) / 4 under the conservative cap") {
  for (double gamma : {0.0, 0.5, 1.0, 1.5, 2.0}) {
    for (double lr_global : {1.0, 2.0, std::sqrt(10.0)}) {
      for (double L : {0.5, 1.0, 2.0}) {
        TheoryConstants tc = protocol(10, 4, 2, 3, gamma, lr_global, 1.0);
        tc.L = L;
        const double cap = conservative_effective_step(tc);
        tc.lr_local = cap / (tc.K * lr_global);
        tc.lr_server = cap / tc.K0;
        CHECK(derive_constants(tc).h >= (3 * gamma + 1) / 4 - 1e-12);
      }
    }
  }
}

TEST_CASE("step-size report") {
  TheoryConstants tc = protocol(4, 4, 5, 5, 1.0, 2.0, 0.1);
  CHECK(check_step_sizes(tc).ok());
  tc.lr_server *= 1.5;
  CHECK_FALSE(check_step_sizes(tc).balanced);
  CHECK_THROWS_AS(descent_bound(tc, derive_constants(tc), 1.0, 1.0, 0.0), ContractError);
  tc = protocol(4, 4, 5, 5, 1.0, 2.0, 0.3);
  CHECK_FALSE(check_step_sizes(tc).within_cap);
}

TEST_CASE("descent bound special cases") {
  TheoryConstants tc = protocol(4, 4, 5, 5, 0.0, 2.0, 0.05);
  tc.G = 0.8;
  const DerivedConstants dc = derive_constants(tc);
  const double step = 0.05;
  const double phi = 2 * sq(0.8) / 4.0;
  CHECK(dc.phi == doctest::Approx(phi));
  CHECK(descent_bound(tc, dc, 3.0, 2.0, 0.0) ==
        doctest::Approx(3.0 - step * dc.h * 2.0 + 8 * step * step * step * phi).epsilon(1e-14));

  TheoryConstants still = protocol(4, 4, 5, 5, 1.0, 2.0, 0.05);
  CHECK(descent_bound(still, derive_constants(still), 1.75, 0.0, 0.0) == 1.75);
}

TEST_CASE("descent inequality holds at every round with full participation") {
  for (const ParamVector& c0 : {vec({0.0, 0.0}), vec({0.5, 0.0})}) {
    for (double gamma : {0.5, 1.0, 2.0}) {
      const TheoryConstants base = testbed_constants(c0, 4, gamma, 1.0);
      for (double step : {conservative_effective_step(base), 0.5 * max_effective_step(base),
                          max_effective_step(base)}) {
        const TheoryConstants tc = testbed_constants(c0, 4, gamma, step);
        const DerivedConstants dc = derive_constants(tc);
        const auto tb = cross_testbed(c0);
        const Federation fed{tb.clients, tb.server, LabeledDataset::empty_like(1, 5)};
        RunOptions opts;
        opts.initial_params = vec({5.0, 5.0});
        const auto trace = run(engine_config(tc, 200), fed, tb.model, opts).trace;
        for (std::size_t t = 0; t + 1 < trace.size(); ++t) {
          const double bound = descent_bound(tc, dc, trace[t].Ftilde,
                                             sq(trace[t].grad_norm_Ftilde), trace[t].xi_sq);
          CHECK(trace[t + 1].Ftilde <= bound + 1e-12 * std::abs(bound));
        }
      }
    }
  }
}

TEST_CASE("descent inequality holds in expectation with half participation") {
  const ParamVector c0 = vec({0.5, 0.0});
  const TheoryConstants base = testbed_constants(c0, 2, 1.0, 1.0);
  const TheoryConstants tc = testbed_constants(c0, 2, 1.0, conservative_effective_step(base));
  const DerivedConstants dc = derive_constants(tc);
  const auto tb = cross_testbed(c0);
  const FederationConfig cfg = engine_config(tc, 1);
  for (const ParamVector& x : {vec({5.0, 5.0}), vec({1.0, -0.5}), vec({0.25, 0.0})}) {
    const auto snap = evaluate_objectives(tb.model, x, tb.clients, tb.server, tc.gamma);
    const double bound = descent_bound(tc, dc, snap.Ftilde, snap.grad_Ftilde.squaredNorm(), snap.xi_sq);
    double sum = 0.0;
    double sum_sq = 0.0;
    const int draws = 1000;
    for (int r = 0; r < draws; ++r) {
      const auto out = fsl_round(x, tb.clients, tb.server, cfg, tb.model,
                                 {static_cast<std::uint64_t>(r), 0});
      const double f = evaluate_objectives(tb.model, out.next, tb.clients, tb.server, tc.gamma).Ftilde;
      sum += f;
      sum_sq += f * f;
    }
    const double mean = sum / draws;
    const double se = std::sqrt(std::max(0.0, sum_sq / draws - mean * mean) / draws);
    CHECK(mean <= bound + 3.0 * se);
  }
}

TEST_CASE("stationarity bound dominates the observed minimum gradient") {
  for (const ParamVector& c0 : {vec({0.0, 0.0}), vec({0.5, 0.0})}) {
    const TheoryConstants base = testbed_constants(c0, 4, 1.0, 1.0);
    const TheoryConstants tc = testbed_constants(c0, 4, 1.0, conservative_effective_step(base));
    const DerivedConstants dc = derive_constants(tc);
    const auto tb = cross_testbed(c0);
    const Federation fed{tb.clients, tb.server, LabeledDataset::empty_like(1, 5)};
    RunOptions opts;
    opts.initial_params = vec({5.0, 5.0});
    const double gap = optimal_gap(*opts.initial_params, c0, 1.0);
    for (int T : {10, 50, 200}) {
      const auto trace = run(engine_config(tc, T), fed, tb.model, opts).trace;
      double observed = std::numeric_limits<double>::infinity();
      for (const auto& row : trace) observed = std::min(observed, sq(row.grad_norm_Ftilde));
      CHECK(observed <= stationarity_bound(tc, dc, gap, T));
    }
  }
}

TEST_CASE("stationarity bound limits") {
  TheoryConstants tc = protocol(4, 2, 5, 5, 1.0, std::sqrt(2.0), 0.01);
  tc.G = 1.0;
  tc.xi_bar = 0.5;
  tc.sigma = 0.3;
  const DerivedConstants dc = derive_constants(tc);
  const double step = 0.01;
  const double floor = (5 * step * dc.psi +
                        8 * step * step * (tc.gamma * dc.kappa * 0.25 / 2 + dc.phi)) / dc.h;
  CHECK(stationarity_bound(tc, dc, 10.0, 1000000000) == doctest::Approx(floor).epsilon(1e-6));
  CHECK_THROWS_AS(stationarity_bound(tc, dc, 1.0, 0), ContractError);
}

TEST_CASE("at the optimum without noise or heterogeneity the bound is zero and nothing moves") {
  const auto tb = fsl::testing::quad_testbed(vec({1.0, 2.0}), {vec({1.0, 2.0}), vec({1.0, 2.0})});
  TheoryConstants tc = protocol(2, 2, 3, 3, 1.0, std::sqrt(2.0), 0.02);
  const DerivedConstants dc = derive_constants(tc);
  CHECK(stationarity_bound(tc, dc, 0.0, 50) == 0.0);
  const Federation fed{tb.clients, tb.server, LabeledDataset::empty_like(1, 3)};
  RunOptions opts;
  opts.initial_params = vec({1.0, 2.0});
  for (const auto& row : run(engine_config(tc, 50), fed, tb.model, opts).trace) {
    CHECK(row.grad_norm_Ftilde == 0.0);
  }
}

TEST_CASE("order-of-magnitude error") {
  TheoryConstants tc = protocol(10, 4, 3, 3, 0.0, 2.0, 0.01);
  tc.G = 1.5;
  tc.sigma = 0.7;
  tc.sigma0 = 0.4;
  CHECK(noise_heterogeneity(tc) == doctest::Approx(sq(0.7) + 6.0 / 9.0 * 3 * sq(1.5)));

  tc.gamma = 1.0;
  const double e1 = convergence_error_order(tc, 2.0, 100);
  const double e2 = convergence_error_order(tc, 2.0, 200);
  const double e4 = convergence_error_order(tc, 2.0, 400);
  // e(T) = a + b with a ~ 1/sqrt(T) and b ~ 1/T.
  const double a = (e1 - 2 * e2) / (1 - std::sqrt(2.0));
  const double b = e1 - a;
  CHECK(a > 0.0);
  CHECK(e2 == doctest::Approx(a / std::sqrt(2.0) + b / 2).epsilon(1e-12));
  CHECK(e4 == doctest::Approx(a / 2 + b / 4).epsilon(1e-12));

  tc.sigma = tc.sigma0 = 0.0;
  tc.xi_bar = 0.0;
  double previous = std::numeric_limits<double>::infinity();
  for (double gamma : {1.0, 10.0, 100.0, 1e4, 1e6}) {
    tc.gamma = gamma;
    const double heterogeneity = convergence_error_order(tc, 0.0, 100);
    CHECK(heterogeneity < previous);
    previous = heterogeneity;
  }
  CHECK(previous < 1e-6);
}

TEST_CASE("exact constants for quadratic centers") {
  const auto same = exact_constants_for_quadratics(vec({1, 1}), {vec({1, 1}), vec({1, 1})});
  CHECK(same.G == 0.0);
  CHECK(same.xi_bar == 0.0);
  const auto pair = exact_constants_for_quadratics(vec({0, 0}), {vec({1, 0}), vec({-1, 0})});
  CHECK(sq(pair.G) == doctest::Approx(1.0));
  CHECK(pair.xi_bar == 0.0);
  CHECK(pair.L == 1.0);
  const auto shifted = exact_constants_for_quadratics(vec({0, 1}), {vec({1, 0}), vec({-1, 0})});
  CHECK(sq(shifted.xi_bar) == doctest::Approx(1.0));
}

TEST_CASE("gradient norm relation between the client and composite objectives") {
  const ParamVector c0 = vec({0.5, -0.25});
  const auto tb = cross_testbed(c0);
  Rng rng = derive_stream(8, StreamTag::kInit);
  std::normal_distribution<double> normal(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    const ParamVector x = vec({normal(rng), normal(rng)});
    for (double gamma : {0.0, 0.5, 2.0}) {
      const auto s = evaluate_objectives(tb.model, x, tb.clients, tb.server, gamma);
      const double lhs = s.grad_F.squaredNorm() + gamma * s.grad_f0.squaredNorm();
      const double rhs = (1 + gamma) * s.grad_Ftilde.squaredNorm() + gamma / (1 + gamma) * s.xi_sq;
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
      CHECK(s.grad_F.squaredNorm() <= rhs * (1 + 1e-12));
    }
  }
}

TEST_CASE("server-step descent condition in both forms") {
  Rng rng = derive_stream(3, StreamTag::kInit);
  std::normal_distribution<double> normal(0.0, 1.0);
  int agree = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const ParamVector a = vec({normal(rng), normal(rng), normal(rng)});
    const ParamVector b = vec({normal(rng), normal(rng), normal(rng)});
    const double eta = 0.5 + 0.5 * normal(rng);
    agree += server_step_descends(a, b, 1.0, eta) == server_step_descends_norm_form(a, b, 1.0, eta);
  }
  CHECK(agree == 200);
  CHECK(server_step_descends(vec({1, 0}), vec({1, 0}), 1.0, 0.5));
  CHECK_FALSE(server_step_descends(vec({1, 0}), vec({-1, 0}), 1.0, 0.5));
}
