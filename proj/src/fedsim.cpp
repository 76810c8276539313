#include "fsl/fedsim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <thread>

namespace fsl {
namespace {

struct ClientUpdate {
  ParamVector delta;
  DriftProbe probe;
};

struct ClientPhase {
  ParamVector mean_delta;
  std::vector<int> sampled;
  std::optional<double> drift;
  bool drift_is_estimate = false;
};

ClientUpdate run_client(const ParamVector& x, int id, std::span<const LabeledDataset> clients,
                        const FederationConfig& cfg, const LossModel& model, RoundKey key,
                        bool record) {
  Rng rng = derive_stream(key.seed, StreamTag::kClientUpdate,
                          static_cast<std::uint64_t>(key.round), static_cast<std::uint64_t>(id));
  ClientUpdate update{ParamVector(), DriftProbe{x}};
  const ParamVector y = local_sgd(x, cfg.lr_local, cfg.local_steps,
                                  clients[static_cast<std::size_t>(id)], model, cfg.batch, rng,
                                  record ? &update.probe : nullptr);
  update.delta = y - x;
  return update;
}

std::vector<ClientUpdate> run_clients(const ParamVector& x, const std::vector<int>& ids,
                                      std::span<const LabeledDataset> clients,
                                      const FederationConfig& cfg, const LossModel& model,
                                      RoundKey key, const RoundOptions& opts) {
  std::vector<ClientUpdate> out(ids.size());
  const auto workers = static_cast<std::size_t>(
      std::clamp<int>(opts.threads, 1, static_cast<int>(std::max<std::size_t>(ids.size(), 1))));
  if (workers <= 1) {
    for (std::size_t j = 0; j < ids.size(); ++j) {
      out[j] = run_client(x, ids[j], clients, cfg, model, key, opts.record_drift);
    }
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t j = next++; j < ids.size(); j = next++) {
        try {
          out[j] = run_client(x, ids[j], clients, cfg, model, key, opts.record_drift);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

ClientPhase client_phase(const ParamVector& x, std::span<const LabeledDataset> clients,
                         const FederationConfig& cfg, const LossModel& model, RoundKey key,
                         const RoundOptions& opts) {
  if (clients.size() != static_cast<std::size_t>(cfg.num_clients)) {
    throw ContractError("config has N=" + std::to_string(cfg.num_clients) + " but " +
                        std::to_string(clients.size()) + " client datasets were given");
  }
  ClientPhase phase;
  Rng sampler = derive_stream(key.seed, StreamTag::kClientSampling,
                              static_cast<std::uint64_t>(key.round));
  phase.sampled = sample_clients(cfg.num_clients, cfg.clients_per_round, sampler);

  std::vector<int> ids = phase.sampled;
  const bool all_clients = opts.record_drift && opts.exact_client_drift;
  if (all_clients) {
    ids.resize(clients.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  }
  const auto updates = run_clients(x, ids, clients, cfg, model, key, opts);

  phase.mean_delta = ParamVector::Zero(x.size());
  std::size_t pos = 0;
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (pos < phase.sampled.size() && ids[j] == phase.sampled[pos]) {
      phase.mean_delta += updates[j].delta;
      ++pos;
    }
  }
  phase.mean_delta /= static_cast<double>(phase.sampled.size());

  if (opts.record_drift) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& u : updates) {
      sum += u.probe.sum;
      count += u.probe.count;
    }
    phase.drift = count == 0 ? 0.0 : sum / static_cast<double>(count);
    phase.drift_is_estimate = !all_clients && cfg.clients_per_round < cfg.num_clients;
  }
  return phase;
}

RoundResult make_result(RoundKey key, const ParamVector& next, ClientPhase& phase,
                        std::optional<double> server_drift) {
  RoundResult result;
  result.round = key.round;
  result.digest = digest(next);
  result.delta_norm = phase.mean_delta.norm();
  result.sampled = std::move(phase.sampled);
  result.client_drift = phase.drift;
  result.server_drift = server_drift;
  result.client_drift_is_estimate = phase.drift_is_estimate;
  return result;
}

// Server drift when the server takes K0 zero-length steps from x_bar.
double identity_server_drift(const ParamVector& x, const ParamVector& x_bar, int steps) {
  DriftProbe probe{x};
  for (int k = 0; k < steps; ++k) probe.observe(x_bar);
  return probe.mean();
}

}  // namespace

std::string algorithm_name(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::kFsl: return "fsl";
    case Algorithm::kFedAvg: return "fedavg";
    case Algorithm::kDataSharing: return "ds";
    case Algorithm::kFslParallel: return "fslp";
  }
  return "unknown";
}

Algorithm parse_algorithm(const std::string& name) {
  if (name == "fsl") return Algorithm::kFsl;
  if (name == "fedavg") return Algorithm::kFedAvg;
  if (name == "ds") return Algorithm::kDataSharing;
  if (name == "fslp") return Algorithm::kFslParallel;
  throw ContractError("unknown algorithm '" + name + "' (expected fsl, fedavg, ds or fslp)");
}

double FederationConfig::global_lr() const {
  return lr_global.value_or(std::sqrt(static_cast<double>(clients_per_round)));
}

double FederationConfig::server_lr() const {
  if (lr_server) return *lr_server;
  return std::sqrt(static_cast<double>(clients_per_round)) * lr_local * local_steps /
         server_steps;
}

double FederationConfig::effective_gamma() const {
  return algorithm == Algorithm::kFedAvg || algorithm == Algorithm::kDataSharing ? 0.0 : gamma;
}

double FederationConfig::server_weight() const {
  return fslp_server_weight.value_or(1.0 / (clients_per_round + 1.0));
}

void FederationConfig::validate() const {
  const auto fail = [](const std::string& field, const std::string& why) {
    throw ContractError(field + ": " + why);
  };
  if (num_clients < 1) fail("N", "must be >= 1");
  if (clients_per_round < 1 || clients_per_round > num_clients) {
    fail("S", "must lie in [1, N=" + std::to_string(num_clients) + "], got " +
                  std::to_string(clients_per_round));
  }
  if (local_steps < 1) fail("K", "must be >= 1");
  if (server_steps < 1) fail("K0", "must be >= 1");
  if (!(lr_local >= 0.0)) fail("lr_local", "must be >= 0");
  if (lr_global && !(*lr_global > 0.0)) fail("lr_global", "must be > 0");
  if (lr_server && !(*lr_server >= 0.0)) fail("lr_server", "must be >= 0");
  if (!(gamma >= 0.0)) fail("gamma", "must be >= 0");
  if (rounds < 0) fail("rounds", "must be >= 0");
  if (batch && *batch < 1) fail("batch", "must be >= 1");
  if (server_batch && *server_batch < 1) fail("server_batch", "must be >= 1");
  if (pretrain.epochs < 0) fail("pretrain_epochs", "must be >= 0");
  if (!(pretrain.lr >= 0.0)) fail("pretrain_lr", "must be >= 0");
  if (fslp_server_weight && !(*fslp_server_weight > 0.0 && *fslp_server_weight <= 1.0)) {
    fail("fslp_server_weight", "must lie in (0, 1]");
  }
}

int steps_for_epochs(double epochs, std::size_t n, std::size_t batch) {
  if (batch < 1) throw ContractError("batch must be >= 1");
  if (epochs == std::floor(epochs) && epochs >= 0.0) {
    const auto total = static_cast<std::size_t>(epochs) * n;
    return static_cast<int>((total + batch - 1) / batch);
  }
  return static_cast<int>(std::ceil(epochs * static_cast<double>(n) / static_cast<double>(batch)));
}

int server_epochs_for(std::size_t n, int num_clients, std::size_t n0, double client_epochs) {
  if (n0 < 1 || num_clients < 1) throw ContractError("server epochs need n0 >= 1 and N >= 1");
  const std::size_t denom = static_cast<std::size_t>(num_clients) * n0;
  if (client_epochs == std::floor(client_epochs) && client_epochs >= 0.0) {
    const std::size_t numer = n * static_cast<std::size_t>(client_epochs);
    return static_cast<int>((numer + denom - 1) / denom);
  }
  return static_cast<int>(
      std::ceil(static_cast<double>(n) / static_cast<double>(denom) * client_epochs));
}

ParamVector local_sgd(const ParamVector& x, double lr, int steps, const LabeledDataset& data,
                      const LossModel& model, std::optional<std::size_t> batch, Rng& rng,
                      DriftProbe* probe) {
  if (steps < 0) throw ContractError("local_sgd: steps must be >= 0");
  if (!(lr >= 0.0)) throw ContractError("local_sgd: learning rate must be >= 0");
  ParamVector y = x;
  const std::size_t b = batch.value_or(data.size());
  for (int k = 0; k < steps; ++k) {
    if (probe != nullptr) probe->observe(y);
    const GradEstimate g = stochastic_grad(model, y, data, std::min(b, data.size()), rng);
    y -= lr * g.grad;
  }
  require_finite(y, "local_sgd result");
  return y;
}

std::vector<int> sample_clients(int num_clients, int clients_per_round, Rng& rng) {
  if (clients_per_round < 1 || clients_per_round > num_clients) {
    throw ContractError("sample_clients: S=" + std::to_string(clients_per_round) +
                        " outside [1, N=" + std::to_string(num_clients) + "]");
  }
  const auto picked = draw_without_replacement(static_cast<std::size_t>(num_clients),
                                               static_cast<std::size_t>(clients_per_round), rng);
  std::vector<int> ids(picked.begin(), picked.end());
  std::sort(ids.begin(), ids.end());
  return ids;
}

RoundOutput fsl_round(const ParamVector& x, std::span<const LabeledDataset> clients,
                      const LabeledDataset& server_data, const FederationConfig& cfg,
                      const LossModel& model, RoundKey key, const RoundOptions& opts) {
  ClientPhase phase = client_phase(x, clients, cfg, model, key, opts);
  const ParamVector x_bar = x + cfg.global_lr() * phase.mean_delta;

  RoundOutput out;
  std::optional<double> server_drift;
  if (server_data.empty()) {
    if (cfg.gamma != 0.0) throw ContractError("server learning with gamma > 0 needs server data");
    out.next = x_bar;
    if (opts.record_drift) server_drift = identity_server_drift(x, x_bar, cfg.server_steps);
  } else {
    Rng rng = derive_stream(key.seed, StreamTag::kServerUpdate,
                            static_cast<std::uint64_t>(key.round));
    DriftProbe probe{x};
    out.next = local_sgd(x_bar, cfg.gamma * cfg.server_lr(), cfg.server_steps, server_data,
                         model, cfg.server_batch, rng, opts.record_drift ? &probe : nullptr);
    if (opts.record_drift) server_drift = probe.mean();
  }
  out.result = make_result(key, out.next, phase, server_drift);
  return out;
}

RoundOutput fedavg_round(const ParamVector& x, std::span<const LabeledDataset> clients,
                         const FederationConfig& cfg, const LossModel& model, RoundKey key,
                         const RoundOptions& opts) {
  ClientPhase phase = client_phase(x, clients, cfg, model, key, opts);
  RoundOutput out;
  out.next = x + cfg.global_lr() * phase.mean_delta;
  std::optional<double> server_drift;
  if (opts.record_drift) server_drift = identity_server_drift(x, out.next, cfg.server_steps);
  out.result = make_result(key, out.next, phase, server_drift);
  return out;
}

RoundOutput ds_round(const ParamVector& x, std::span<const LabeledDataset> augmented_clients,
                     const FederationConfig& cfg, const LossModel& model, RoundKey key,
                     const RoundOptions& opts) {
  return fedavg_round(x, augmented_clients, cfg, model, key, opts);
}

std::vector<LabeledDataset> augment_clients(std::span<const LabeledDataset> clients,
                                            const LabeledDataset& shared) {
  std::vector<LabeledDataset> out;
  out.reserve(clients.size());
  for (const auto& c : clients) {
    out.push_back(shared.empty() ? c : LabeledDataset::concat(c, shared));
  }
  return out;
}

RoundOutput fslp_round(const ParamVector& x, std::span<const LabeledDataset> clients,
                       const LabeledDataset& server_data, const FederationConfig& cfg,
                       const LossModel& model, RoundKey key, const RoundOptions& opts) {
  if (server_data.empty()) throw ContractError("fslp_round needs server data");
  ClientPhase phase = client_phase(x, clients, cfg, model, key, opts);
  Rng rng = derive_stream(key.seed, StreamTag::kServerUpdate, static_cast<std::uint64_t>(key.round));
  DriftProbe probe{x};
  const ParamVector server_delta =
      local_sgd(x, cfg.gamma * cfg.server_lr(), cfg.server_steps, server_data, model,
                cfg.server_batch, rng, opts.record_drift ? &probe : nullptr) -
      x;
  const double w = cfg.server_weight();
  RoundOutput out;
  out.next = x + cfg.global_lr() * ((1.0 - w) * phase.mean_delta + w * server_delta);
  std::optional<double> server_drift;
  if (opts.record_drift) server_drift = probe.mean();
  out.result = make_result(key, out.next, phase, server_drift);
  return out;
}

ParamVector pretrain_server(const ParamVector& x0, const LabeledDataset& server_data, int epochs,
                            double lr, std::optional<std::size_t> batch, const LossModel& model,
                            Rng& rng) {
  if (epochs < 0) throw ContractError("pretrain epochs must be >= 0");
  if (epochs == 0) return x0;
  if (server_data.empty()) throw ContractError("pretraining needs server data");
  const std::size_t b = std::min(batch.value_or(server_data.size()), server_data.size());
  const int steps = steps_for_epochs(1.0, server_data.size(), b);
  ParamVector x = x0;
  for (int e = 0; e < epochs; ++e) x = local_sgd(x, lr, steps, server_data, model, b, rng);
  return x;
}

RunOutput run(const FederationConfig& cfg, const Federation& federation, const LossModel& model,
              const RunOptions& opts) {
  cfg.validate();
  if (opts.metrics_stride < 1) throw ContractError("metrics stride must be >= 1");
  const double nan = std::numeric_limits<double>::quiet_NaN();

  RunOutput output;
  ParamVector x;
  if (opts.initial_params) {
    x = *opts.initial_params;
    if (static_cast<std::size_t>(x.size()) != param_dim(model)) {
      throw ContractError("initial parameters have the wrong dimension");
    }
  } else {
    Rng init_rng = derive_stream(cfg.master_seed, StreamTag::kInit);
    x = init_params(model, init_rng);
  }

  std::vector<LabeledDataset> augmented;
  std::span<const LabeledDataset> training = federation.clients;
  if (cfg.algorithm == Algorithm::kDataSharing) {
    augmented = augment_clients(federation.clients, federation.server);
    training = augmented;
  }
  if (cfg.pretrain.epochs > 0 && cfg.algorithm != Algorithm::kFedAvg) {
    Rng pre_rng = derive_stream(cfg.master_seed, StreamTag::kPretrain);
    x = pretrain_server(x, federation.server, cfg.pretrain.epochs, cfg.pretrain.lr,
                        cfg.server_batch, model, pre_rng);
  }
  output.initial_params = x;

  const double gamma = cfg.effective_gamma();
  const RoundOptions round_opts{true, opts.exact_client_drift, opts.threads};
  std::vector<double> accuracies;
  for (int t = 0; t < cfg.rounds; ++t) {
    RoundTrace row;
    row.round = t;
    if (t % opts.metrics_stride == 0) {
      const ObjectiveSnapshot snap =
          evaluate_objectives(model, x, federation.clients, federation.server, gamma);
      row.train_loss = snap.F;
      row.grad_norm_F = snap.grad_F.norm();
      row.grad_norm_Ftilde = snap.grad_Ftilde.norm();
      row.grad_norm_f0 = snap.grad_f0.norm();
      row.xi_sq = snap.xi_sq;
      row.G_sq = snap.G_sq;
      row.Ftilde = snap.Ftilde;
    } else {
      row.train_loss = row.grad_norm_F = row.grad_norm_Ftilde = row.grad_norm_f0 = nan;
      row.xi_sq = row.G_sq = row.Ftilde = nan;
    }

    const RoundKey key{cfg.master_seed, t};
    RoundOutput step;
    switch (cfg.algorithm) {
      case Algorithm::kFsl:
        step = fsl_round(x, training, federation.server, cfg, model, key, round_opts);
        break;
      case Algorithm::kFedAvg:
        step = fedavg_round(x, training, cfg, model, key, round_opts);
        break;
      case Algorithm::kDataSharing:
        step = ds_round(x, training, cfg, model, key, round_opts);
        break;
      case Algorithm::kFslParallel:
        step = fslp_round(x, training, federation.server, cfg, model, key, round_opts);
        break;
    }
    const DriftTerms drift = drift_terms(step.result);
    row.client_drift = drift.client;
    row.server_drift = drift.server;
    row.client_drift_is_estimate = drift.client_is_estimate;
    row.test_acc = federation.test.empty() ? nan : accuracy(model, step.next, federation.test);
    accuracies.push_back(row.test_acc);
    output.trace.push_back(row);
    output.rounds.push_back(std::move(step.result));
    x = std::move(step.next);
  }
  const auto rolling = rolling_accuracy(accuracies, opts.rolling_window);
  for (std::size_t t = 0; t < rolling.size(); ++t) output.trace[t].rolling_acc = rolling[t];
  output.final_params = x;
  return output;
}

}  // namespace fsl
