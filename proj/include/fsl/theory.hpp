#pragma once

#include <vector>

#include "fsl/common.hpp"

namespace fsl {

/// Problem constants (smoothness L, client dissimilarity G, server
/// dissimilarity xi_bar, gradient noise sigma / sigma0) together with the
/// protocol they are evaluated for.
struct TheoryConstants {
  double L = 1.0;
  double G = 0.0;
  double xi_bar = 0.0;
  double sigma = 0.0;
  double sigma0 = 0.0;

  int N = 1;
  int S = 1;
  int K = 1;
  int K0 = 1;
  double gamma = 0.0;
  double lr_local = 0.0;
  double lr_global = 1.0;
  double lr_server = 0.0;

  /// K0 * lr_server, the per-round effective server step.
  double effective_step() const { return K0 * lr_server; }
};

struct DerivedConstants {
  double rho_s = 0.0;  // (N - S) / (N - 1), 0 when N = 1
  double psi = 0.0;
  double kappa = 0.0;
  double phi = 0.0;
  double h = 0.0;
  double G3 = 0.0;
  double M_sq = 0.0;
};

DerivedConstants derive_constants(const TheoryConstants& tc);

/// (1 / 4L) * min{lr_global, 1/gamma, 8/9}; 1/gamma is +inf at gamma = 0.
double max_effective_step(const TheoryConstants& tc);

/// (1 / (8 L (gamma + 1))) * min{1, (gamma + 1)^2 / (2 kappa)}. Under this cap
/// the descent coefficient h is at least (3 gamma + 1) / 4.
double conservative_effective_step(const TheoryConstants& tc);

struct StepSizeReport {
  double client_effective = 0.0;  // K * lr_local * lr_global
  double server_effective = 0.0;  // K0 * lr_server
  double cap = 0.0;
  bool balanced = false;          // client_effective == server_effective (rel 1e-12)
  bool within_cap = false;
  bool ok() const { return balanced && within_cap; }
};

StepSizeReport check_step_sizes(const TheoryConstants& tc);

/// Expected next-round value bound
///   Ftilde - K0 eta0 h ||grad Ftilde||^2 + 5 (K0 eta0)^2 L psi
///          + 8 (K0 eta0)^3 L^2 (gamma kappa xi_sq / (1 + gamma) + phi).
/// `xi_sq` may be the pointwise ||grad f0 - grad F||^2 or xi_bar^2.
/// Throws ContractError when the step sizes violate check_step_sizes.
double descent_bound(const TheoryConstants& tc, const DerivedConstants& dc, double Ftilde,
                     double grad_Ftilde_sq, double xi_sq);

/// Upper bound on min_{t < T} E||grad Ftilde(x_t)||^2 given the initial gap
/// Ftilde(x0) - Ftilde*. Requires valid step sizes, T >= 1 and h > 0.
double stationarity_bound(const TheoryConstants& tc, const DerivedConstants& dc,
                          double initial_gap, int T);

/// Order-of-magnitude error with unit hidden constants, evaluated under the
/// bindings lr_global = sqrt(S), K0 = K and K0 eta0 = sqrt(KS) / (sqrt(LT)(gamma+1)).
/// Only meaningful for trends.
double convergence_error_order(const TheoryConstants& tc, double initial_gap, int T);

/// M^2 = gamma^2 sigma0^2 S + sigma^2 + rho_s K G^2.
double noise_heterogeneity(const TheoryConstants& tc);

/// Client-drift bound 4 K^2 lr_local^2 (||grad F||^2 + sigma^2 / 2K + G^2).
double client_drift_bound(const TheoryConstants& tc, double grad_F_sq);

/// Server-drift bound 12 (K0 eta0)^2 (L^2 Ec + ||grad F||^2 + 4/3 gamma^2 ||grad f0||^2 + G3).
double server_drift_bound(const TheoryConstants& tc, const DerivedConstants& dc,
                          double client_drift, double grad_F_sq, double grad_f0_sq);

/// Quadratic testbed with f_i(x) = 0.5 ||x - c_i||^2: returns L = 1,
/// G^2 = (1/N) sum ||c_bar - c_i||^2, xi_bar^2 = ||c0 - c_bar||^2 and zero noise
/// (full batches). Protocol fields are left at their defaults.
TheoryConstants exact_constants_for_quadratics(const ParamVector& server_center,
                                               const std::vector<ParamVector>& client_centers);

/// One server gradient step from w0 decreases the upper model of F when
/// 2 <grad F, grad f0> > L eta0 ||grad f0||^2.
bool server_step_descends(const ParamVector& grad_F, const ParamVector& grad_f0, double L,
                          double eta0);

/// The same condition written as
/// ||grad F||^2 + (1 - L eta0) ||grad f0||^2 > ||grad F - grad f0||^2.
bool server_step_descends_norm_form(const ParamVector& grad_F, const ParamVector& grad_f0,
                                    double L, double eta0);

}  // namespace fsl
