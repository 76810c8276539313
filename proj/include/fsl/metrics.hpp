#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsl/dataset.hpp"
#include "fsl/model.hpp"
#include "fsl/theory.hpp"

namespace fsl {

struct RoundResult;

/// One row of a run trace. Gradient diagnostics (train_loss, norms, xi_sq,
/// G_sq, Ftilde) are taken at the round's starting model x_t and are NaN on
/// rounds skipped by the metrics stride; test_acc is measured on x_{t+1};
/// the drifts are those of round t.
struct RoundTrace {
  int round = 0;
  double train_loss = 0.0;
  double test_acc = 0.0;
  double rolling_acc = 0.0;
  double grad_norm_F = 0.0;
  double grad_norm_Ftilde = 0.0;
  double xi_sq = 0.0;
  double G_sq = 0.0;
  double client_drift = 0.0;
  double server_drift = 0.0;
  double Ftilde = 0.0;
  // In-memory only; not part of the CSV schema.
  double grad_norm_f0 = 0.0;
  bool client_drift_is_estimate = false;
};

inline constexpr std::string_view kTraceCsvHeader =
    "round,train_loss,test_acc,rolling_acc,grad_norm_F,grad_norm_Ftilde,xi_sq,G_sq,"
    "Ec_drift,E0_drift,Ftilde";

std::string trace_csv_row(const RoundTrace& row);
void write_trace_csv(const std::filesystem::path& path, std::span<const RoundTrace> trace);
std::vector<RoundTrace> read_trace_csv(const std::filesystem::path& path);

/// F, f0 and Ftilde = (F + gamma f0) / (1 + gamma) with their gradients at x.
/// F weights client losses by n_i / n. With no server data f0 is NaN.
struct ObjectiveSnapshot {
  double F = 0.0;
  double f0 = 0.0;
  double Ftilde = 0.0;
  ParamVector grad_F;
  ParamVector grad_f0;
  ParamVector grad_Ftilde;
  double G_sq = 0.0;
  double xi_sq = 0.0;
};

ObjectiveSnapshot evaluate_objectives(const LossModel& model, const ParamVector& x,
                                      std::span<const LabeledDataset> clients,
                                      const LabeledDataset& server, double gamma);

struct Dissimilarity {
  double G_sq = 0.0;   // (1/N) sum ||grad f_i - grad F||^2
  double xi_sq = 0.0;  // ||grad f0 - grad F||^2
};

Dissimilarity grad_dissimilarity(const LossModel& model, const ParamVector& x,
                                 std::span<const LabeledDataset> clients,
                                 const LabeledDataset& server);

struct DriftTerms {
  double client = 0.0;
  double server = 0.0;
  bool client_is_estimate = false;
};

/// Throws std::logic_error when the round ran without drift recording.
DriftTerms drift_terms(const RoundResult& round);

/// Trailing mean over `window` entries (shorter prefix at the start).
std::vector<double> rolling_accuracy(std::span<const double> series, int window);

/// First index whose value reaches 90% of the last value.
std::optional<int> rise_time(std::span<const double> series);

/// Client and server drift compared against their bounds for one round.
struct DriftBoundCheck {
  double client_bound = 0.0;
  double server_bound = 0.0;
  bool client_ok = false;
  bool server_ok = false;
  bool client_premise = false;  // 4 K lr_local L <= 1
  bool server_premise = false;  // 4 K0 lr_server gamma L <= 1
};

DriftBoundCheck check_drift_bounds(const RoundTrace& row, const TheoryConstants& tc);

}  // namespace fsl
