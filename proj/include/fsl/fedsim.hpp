#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsl/dataset.hpp"
#include "fsl/metrics.hpp"
#include "fsl/model.hpp"

namespace fsl {

enum class Algorithm { kFsl, kFedAvg, kDataSharing, kFslParallel };

std::string algorithm_name(Algorithm algorithm);
Algorithm parse_algorithm(const std::string& name);

struct PretrainConfig {
  int epochs = 0;
  double lr = 0.01;
};

/// Protocol hyperparameters. Unset learning rates resolve to the defaults
/// lr_global = sqrt(S) and lr_server = sqrt(S) * lr_local * K / K0, which make
/// K * lr_local * lr_global == K0 * lr_server.
struct FederationConfig {
  Algorithm algorithm = Algorithm::kFsl;
  int num_clients = 1;         // N
  int clients_per_round = 1;   // S
  int local_steps = 1;         // K
  int server_steps = 1;        // K0
  double lr_local = 0.01;
  std::optional<double> lr_global;
  std::optional<double> lr_server;
  double gamma = 1.0;
  int rounds = 0;
  std::optional<std::size_t> batch;         // unset: full batch
  std::optional<std::size_t> server_batch;  // unset: full batch
  PretrainConfig pretrain;
  std::uint64_t master_seed = 0;
  std::optional<double> fslp_server_weight;

  double global_lr() const;
  double server_lr() const;
  /// gamma as used by the round engine (0 for FedAvg and DS).
  double effective_gamma() const;
  double server_weight() const;
  /// Throws ContractError naming the offending field.
  void validate() const;
};

/// Epoch-to-step mapping: ceil(epochs * n / batch).
int steps_for_epochs(double epochs, std::size_t n, std::size_t batch);

/// Server epochs that match one client pass: ceil(n / (N * n0) * client_epochs).
int server_epochs_for(std::size_t n, int num_clients, std::size_t n0, double client_epochs);

/// Accumulates mean squared distance of visited iterates from an anchor point.
struct DriftProbe {
  ParamVector anchor;
  double sum = 0.0;
  std::size_t count = 0;

  void observe(const ParamVector& iterate) {
    sum += (anchor - iterate).squaredNorm();
    ++count;
  }
  double mean() const { return count == 0 ? 0.0 : sum / static_cast<double>(count); }
};

/// K steps of y <- y - lr * g(y) from y = x. If `probe` is set, every iterate
/// before a step (y_0 .. y_{K-1}) is reported to it.
ParamVector local_sgd(const ParamVector& x, double lr, int steps,
                      const LabeledDataset& data, const LossModel& model,
                      std::optional<std::size_t> batch, Rng& rng,
                      DriftProbe* probe = nullptr);

/// Uniform S-subset of [0, N), sorted ascending.
std::vector<int> sample_clients(int num_clients, int clients_per_round, Rng& rng);

/// Identifies the randomness of one round: every stream the round uses is
/// derived from (seed, round) and the party it belongs to.
struct RoundKey {
  std::uint64_t seed = 0;
  int round = 0;
};

struct RoundOptions {
  bool record_drift = true;
  /// Simulate every client (not only the sampled ones) for the client drift.
  bool exact_client_drift = false;
  /// Worker threads for client updates; results do not depend on it.
  int threads = 1;
};

struct RoundResult {
  int round = 0;
  std::uint64_t digest = 0;  // of x_{t+1}
  double delta_norm = 0.0;   // ||Delta_t||
  std::vector<int> sampled;
  std::optional<double> client_drift;
  std::optional<double> server_drift;
  bool client_drift_is_estimate = false;
};

struct RoundOutput {
  ParamVector next;
  RoundResult result;
};

/// One round of federated learning with server learning:
/// sample S clients, x_bar = x + lr_global * mean(LocalSGD(x, lr_local, K, D_i) - x),
/// then x_next = LocalSGD(x_bar, gamma * lr_server, K0, D_0).
RoundOutput fsl_round(const ParamVector& x, std::span<const LabeledDataset> clients,
                      const LabeledDataset& server_data, const FederationConfig& cfg,
                      const LossModel& model, RoundKey key, const RoundOptions& opts = {});

/// fsl_round without the server step.
RoundOutput fedavg_round(const ParamVector& x, std::span<const LabeledDataset> clients,
                         const FederationConfig& cfg, const LossModel& model,
                         RoundKey key, const RoundOptions& opts = {});

/// Clients augmented once with the shared data (see augment_clients), then a
/// FedAvg round over them.
RoundOutput ds_round(const ParamVector& x, std::span<const LabeledDataset> augmented_clients,
                     const FederationConfig& cfg, const LossModel& model, RoundKey key,
                     const RoundOptions& opts = {});

/// D'_i = D_i united with D_0 for every client.
std::vector<LabeledDataset> augment_clients(std::span<const LabeledDataset> clients,
                                            const LabeledDataset& shared);

/// The server as one more participant: it runs LocalSGD(x, gamma * lr_server, K0,
/// D_0) alongside the clients and x_next = x + lr_global * ((1 - w) * mean client
/// update + w * server update).
RoundOutput fslp_round(const ParamVector& x, std::span<const LabeledDataset> clients,
                       const LabeledDataset& server_data, const FederationConfig& cfg,
                       const LossModel& model, RoundKey key, const RoundOptions& opts = {});

/// `epochs` SGD passes over the server data, ceil(n0 / batch) steps each.
ParamVector pretrain_server(const ParamVector& x0, const LabeledDataset& server_data,
                            int epochs, double lr, std::optional<std::size_t> batch,
                            const LossModel& model, Rng& rng);

struct Federation {
  std::vector<LabeledDataset> clients;
  LabeledDataset server;
  LabeledDataset test;
};

struct RunOptions {
  int metrics_stride = 1;
  int rolling_window = 20;
  bool exact_client_drift = false;
  int threads = 1;
  /// Overrides the seeded uniform initialization.
  std::optional<ParamVector> initial_params;
};

struct RunOutput {
  std::vector<RoundTrace> trace;
  ParamVector initial_params;  // after pretraining
  ParamVector final_params;
  std::vector<RoundResult> rounds;
};

/// Runs cfg.rounds rounds of cfg.algorithm and records the diagnostics of every
/// round (gradient diagnostics every metrics_stride rounds).
RunOutput run(const FederationConfig& cfg, const Federation& federation,
              const LossModel& model, const RunOptions& opts = {});

}  // namespace fsl
