#include "fsl/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fsl {
namespace {

constexpr double kRoundingSlack = 1e-12;

double sq(double v) { return v * v; }

void require_valid_steps(const TheoryConstants& tc) {
  const StepSizeReport report = check_step_sizes(tc);
  if (!report.balanced) {
    throw ContractError("step sizes are unbalanced: K*lr_local*lr_global=" +
                        format_double(report.client_effective) +
                        " but K0*lr_server=" + format_double(report.server_effective));
  }
  if (!report.within_cap) {
    throw ContractError("K0*lr_server=" + format_double(report.server_effective) +
                        " exceeds the cap " + format_double(report.cap));
  }
}

}  // namespace

DerivedConstants derive_constants(const TheoryConstants& tc) {
  if (!(tc.L > 0.0)) throw ContractError("L must be positive");
  if (tc.S < 1 || tc.S > tc.N) throw ContractError("S must lie in [1, N]");
  DerivedConstants dc;
  const double g = tc.gamma;
  const double G2 = sq(tc.G);
  const double sigma2 = sq(tc.sigma);
  const double sigma02 = sq(tc.sigma0);
  const double inv_lr_global2 = 1.0 / sq(tc.lr_global);
  const double step = tc.effective_step();

  dc.rho_s = tc.N == 1 ? 0.0 : static_cast<double>(tc.N - tc.S) / (tc.N - 1);
  dc.psi = sq(g) * sigma02 / tc.K0 + sigma2 / (static_cast<double>(tc.K) * tc.S) +
           dc.rho_s * G2 / tc.S;
  dc.kappa = std::max(4.0 * g * g * g, 2.0 * inv_lr_global2 + 3.0 * sq(g));
  dc.phi = sq(g) * dc.psi + (2.0 * sq(g) / tc.S) * (sigma2 / tc.K + dc.rho_s * G2) +
           inv_lr_global2 * (2.0 * G2 + sigma2 / tc.K);
  dc.h = g + 0.5 -
         step * tc.L * ((1.0 + g) / 2.0) * (3.0 * g + 3.0 + 16.0 * dc.kappa * step * tc.L);
  dc.G3 = sigma2 / (static_cast<double>(tc.K) * tc.S) + dc.rho_s * G2 / tc.S +
          sq(g) * sigma02 / (3.0 * tc.K0);
  dc.M_sq = noise_heterogeneity(tc);
  return dc;
}

double noise_heterogeneity(const TheoryConstants& tc) {
  const double rho_s = tc.N == 1 ? 0.0 : static_cast<double>(tc.N - tc.S) / (tc.N - 1);
  return sq(tc.gamma) * sq(tc.sigma0) * tc.S + sq(tc.sigma) + rho_s * tc.K * sq(tc.G);
}

double max_effective_step(const TheoryConstants& tc) {
  if (!(tc.L > 0.0)) throw ContractError("L must be positive");
  const double inv_gamma =
      tc.gamma > 0.0 ? 1.0 / tc.gamma : std::numeric_limits<double>::infinity();
  return std::min({tc.lr_global, inv_gamma, 8.0 / 9.0}) / (4.0 * tc.L);
}

double conservative_effective_step(const TheoryConstants& tc) {
  if (!(tc.L > 0.0)) throw ContractError("L must be positive");
  const double g1 = tc.gamma + 1.0;
  const double kappa =
      std::max(4.0 * tc.gamma * tc.gamma * tc.gamma, 2.0 / sq(tc.lr_global) + 3.0 * sq(tc.gamma));
  return std::min(1.0, sq(g1) / (2.0 * kappa)) / (8.0 * tc.L * g1);
}

StepSizeReport check_step_sizes(const TheoryConstants& tc) {
  StepSizeReport report;
  report.client_effective = tc.K * tc.lr_local * tc.lr_global;
  report.server_effective = tc.effective_step();
  report.cap = max_effective_step(tc);
  const double scale = std::max(std::abs(report.client_effective),
                                std::abs(report.server_effective));
  report.balanced = std::abs(report.client_effective - report.server_effective) <=
                    kRoundingSlack * scale;
  report.within_cap = report.server_effective <= report.cap * (1.0 + kRoundingSlack);
  return report;
}

double descent_bound(const TheoryConstants& tc, const DerivedConstants& dc, double Ftilde,
                     double grad_Ftilde_sq, double xi_sq) {
  require_valid_steps(tc);
  const double step = tc.effective_step();
  const double g = tc.gamma;
  return Ftilde - step * dc.h * grad_Ftilde_sq + 5.0 * sq(step) * tc.L * dc.psi +
         8.0 * step * sq(step) * sq(tc.L) * (g * dc.kappa * xi_sq / (1.0 + g) + dc.phi);
}

double stationarity_bound(const TheoryConstants& tc, const DerivedConstants& dc,
                          double initial_gap, int T) {
  require_valid_steps(tc);
  if (T < 1) throw ContractError("T must be >= 1");
  if (!(dc.h > 0.0)) {
    throw ContractError("descent coefficient h=" + format_double(dc.h) +
                        " is not positive; the bound is vacuous");
  }
  const double step = tc.effective_step();
  const double g = tc.gamma;
  const double rhs = initial_gap / (T * step) + 5.0 * step * tc.L * dc.psi +
                     8.0 * sq(step) * sq(tc.L) *
                         (g * dc.kappa * sq(tc.xi_bar) / (1.0 + g) + dc.phi);
  return rhs / dc.h;
}

double convergence_error_order(const TheoryConstants& tc, double initial_gap, int T) {
  if (T < 1) throw ContractError("T must be >= 1");
  TheoryConstants bound = tc;
  bound.lr_global = std::sqrt(static_cast<double>(tc.S));
  bound.K0 = tc.K;
  const double g1 = tc.gamma + 1.0;
  const double kappa = std::max(4.0 * tc.gamma * tc.gamma * tc.gamma,
                                2.0 / sq(bound.lr_global) + 3.0 * sq(tc.gamma));
  const double m2 = noise_heterogeneity(bound);
  const double KS = static_cast<double>(tc.K) * tc.S;
  return std::sqrt(tc.L) / std::sqrt(KS * T) * (initial_gap + m2 / sq(g1)) +
         (tc.L / T) * (m2 / g1 + tc.gamma * kappa * KS * sq(tc.xi_bar) / sq(sq(g1)));
}

double client_drift_bound(const TheoryConstants& tc, double grad_F_sq) {
  return 4.0 * sq(tc.K * tc.lr_local) *
         (grad_F_sq + sq(tc.sigma) / (2.0 * tc.K) + sq(tc.G));
}

double server_drift_bound(const TheoryConstants& tc, const DerivedConstants& dc,
                          double client_drift, double grad_F_sq, double grad_f0_sq) {
  return 12.0 * sq(tc.effective_step()) *
         (sq(tc.L) * client_drift + grad_F_sq + (4.0 / 3.0) * sq(tc.gamma) * grad_f0_sq +
          dc.G3);
}

TheoryConstants exact_constants_for_quadratics(const ParamVector& server_center,
                                               const std::vector<ParamVector>& client_centers) {
  if (client_centers.empty()) throw ContractError("need at least one client center");
  ParamVector mean = ParamVector::Zero(server_center.size());
  for (const auto& c : client_centers) {
    if (c.size() != server_center.size()) throw ContractError("center dimension mismatch");
    mean += c;
  }
  mean /= static_cast<double>(client_centers.size());
  double g2 = 0.0;
  for (const auto& c : client_centers) g2 += (mean - c).squaredNorm();
  g2 /= static_cast<double>(client_centers.size());

  TheoryConstants tc;
  tc.L = 1.0;
  tc.G = std::sqrt(g2);
  tc.xi_bar = (server_center - mean).norm();
  tc.sigma = 0.0;
  tc.sigma0 = 0.0;
  tc.N = static_cast<int>(client_centers.size());
  tc.S = tc.N;
  return tc;
}

bool server_step_descends(const ParamVector& grad_F, const ParamVector& grad_f0, double L,
                          double eta0) {
  return 2.0 * grad_F.dot(grad_f0) > L * eta0 * grad_f0.squaredNorm();
}

bool server_step_descends_norm_form(const ParamVector& grad_F, const ParamVector& grad_f0,
                                    double L, double eta0) {
  return grad_F.squaredNorm() + (1.0 - L * eta0) * grad_f0.squaredNorm() >
         (grad_F - grad_f0).squaredNorm();
}

}  // namespace fsl
