#include "fsl/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "fsl/fedsim.hpp"

namespace fsl {

std::string trace_csv_row(const RoundTrace& row) {
  std::string out = std::to_string(row.round);
  for (double v : {row.train_loss, row.test_acc, row.rolling_acc, row.grad_norm_F,
                   row.grad_norm_Ftilde, row.xi_sq, row.G_sq, row.client_drift,
                   row.server_drift, row.Ftilde}) {
    out += ',';
    out += format_double(v);
  }
  return out;
}

void write_trace_csv(const std::filesystem::path& path, std::span<const RoundTrace> trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kTraceCsvHeader << '\n';
  for (const auto& row : trace) out << trace_csv_row(row) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<RoundTrace> read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kTraceCsvHeader) {
    throw std::runtime_error(path.string() + ": unexpected trace header");
  }
  std::vector<RoundTrace> trace;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> cells;
    while (std::getline(ss, cell, ',')) {
      cells.push_back(cell == "nan" ? std::numeric_limits<double>::quiet_NaN()
                                    : std::stod(cell));
    }
    if (cells.size() != 11) throw std::runtime_error(path.string() + ": malformed row");
    RoundTrace row;
    row.round = static_cast<int>(cells[0]);
    row.train_loss = cells[1];
    row.test_acc = cells[2];
    row.rolling_acc = cells[3];
    row.grad_norm_F = cells[4];
    row.grad_norm_Ftilde = cells[5];
    row.xi_sq = cells[6];
    row.G_sq = cells[7];
    row.client_drift = cells[8];
    row.server_drift = cells[9];
    row.Ftilde = cells[10];
    row.grad_norm_f0 = std::numeric_limits<double>::quiet_NaN();
    trace.push_back(row);
  }
  return trace;
}

ObjectiveSnapshot evaluate_objectives(const LossModel& model, const ParamVector& x,
                                      std::span<const LabeledDataset> clients,
                                      const LabeledDataset& server, double gamma) {
  if (clients.empty()) throw ContractError("need at least one client");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::size_t n = 0;
  for (const auto& c : clients) n += c.size();

  ObjectiveSnapshot snap;
  snap.grad_F = ParamVector::Zero(x.size());
  std::vector<ParamVector> client_grads;
  client_grads.reserve(clients.size());
  for (const auto& c : clients) {
    const double weight = static_cast<double>(c.size()) / static_cast<double>(n);
    snap.F += weight * loss(model, x, c);
    client_grads.push_back(full_grad(model, x, c).grad);
    snap.grad_F += weight * client_grads.back();
  }
  for (const auto& g : client_grads) snap.G_sq += (g - snap.grad_F).squaredNorm();
  snap.G_sq /= static_cast<double>(clients.size());

  if (server.empty()) {
    snap.f0 = nan;
    snap.grad_f0 = ParamVector::Constant(x.size(), nan);
    snap.xi_sq = nan;
  } else {
    snap.f0 = loss(model, x, server);
    snap.grad_f0 = full_grad(model, x, server).grad;
    snap.xi_sq = (snap.grad_f0 - snap.grad_F).squaredNorm();
  }
  if (gamma == 0.0) {
    snap.Ftilde = snap.F;
    snap.grad_Ftilde = snap.grad_F;
  } else {
    snap.Ftilde = (snap.F + gamma * snap.f0) / (1.0 + gamma);
    snap.grad_Ftilde = (snap.grad_F + gamma * snap.grad_f0) / (1.0 + gamma);
  }
  return snap;
}

Dissimilarity grad_dissimilarity(const LossModel& model, const ParamVector& x,
                                 std::span<const LabeledDataset> clients,
                                 const LabeledDataset& server) {
  const ObjectiveSnapshot snap = evaluate_objectives(model, x, clients, server, 0.0);
  return {snap.G_sq, snap.xi_sq};
}

DriftTerms drift_terms(const RoundResult& round) {
  if (!round.client_drift || !round.server_drift) {
    throw std::logic_error("drift diagnostics were not recorded for round " +
                           std::to_string(round.round));
  }
  return {*round.client_drift, *round.server_drift, round.client_drift_is_estimate};
}

std::vector<double> rolling_accuracy(std::span<const double> series, int window) {
  if (window < 1) throw ContractError("rolling window must be >= 1");
  std::vector<double> out(series.size());
  const auto w = static_cast<std::size_t>(window);
  for (std::size_t t = 0; t < series.size(); ++t) {
    const std::size_t first = t + 1 >= w ? t + 1 - w : 0;
    double sum = 0.0;
    for (std::size_t j = first; j <= t; ++j) sum += series[j];
    out[t] = sum / static_cast<double>(t + 1 - first);
  }
  return out;
}

std::optional<int> rise_time(std::span<const double> series) {
  if (series.empty()) return std::nullopt;
  const double target = 0.9 * series.back();
  for (std::size_t t = 0; t < series.size(); ++t) {
    if (series[t] >= target) return static_cast<int>(t);
  }
  return static_cast<int>(series.size() - 1);
}

DriftBoundCheck check_drift_bounds(const RoundTrace& row, const TheoryConstants& tc) {
  const DerivedConstants dc = derive_constants(tc);
  DriftBoundCheck check;
  const double grad_F_sq = row.grad_norm_F * row.grad_norm_F;
  const double grad_f0_sq = row.grad_norm_f0 * row.grad_norm_f0;
  check.client_bound = client_drift_bound(tc, grad_F_sq);
  check.server_bound = server_drift_bound(tc, dc, row.client_drift, grad_F_sq, grad_f0_sq);
  check.client_premise = 4.0 * tc.K * tc.lr_local * tc.L <= 1.0;
  check.server_premise = 4.0 * tc.effective_step() * tc.gamma * tc.L <= 1.0;
  check.client_ok = row.client_drift <= check.client_bound;
  check.server_ok = row.server_drift <= check.server_bound;
  return check;
}

}  // namespace fsl
