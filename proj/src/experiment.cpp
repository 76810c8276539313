#include "fsl/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/lexical_cast.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"

namespace fsl {
namespace {

using boost::property_tree::ptree;
using Json = nlohmann::ordered_json;

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"data", {"source", "classes", "per_class", "dim", "spread", "separation",
                "test_per_class",
                "train_csv", "test_csv"}},
      {"partition", {"clients", "classes_per_client"}},
      {"server", {"kind", "n0", "clients", "per_client", "shift_sd", "dropped_class"}},
      {"model", {"kind", "hidden", "centers"}},
      {"federation", {"algorithms", "S", "K", "K0", "local_epochs", "server_epochs", "lr_local",
                      "lr_global", "lr_server", "gamma", "rounds", "batch", "server_batch",
                      "pretrain_epochs", "pretrain_lr", "fslp_weight"}},
      {"run", {"seeds", "stride", "window", "threads", "exact_client_drift", "init", "out"}},
      {"theory", {"exact", "L", "G", "xi_bar", "sigma", "sigma0", "initial_gap"}},
  };
  return keys;
}

class Fields {
 public:
  explicit Fields(const ptree& tree) : tree_(tree) {
    for (const auto& [section, body] : tree) {
      const auto it = known_keys().find(section);
      if (it == known_keys().end()) throw ContractError("unknown section [" + section + "]");
      if (body.empty() && !body.data().empty()) {
        throw ContractError(section + ": key outside of a section");
      }
      for (const auto& [key, value] : body) {
        if (!it->second.contains(key)) throw ContractError("unknown field " + section + "." + key);
      }
    }
  }

  bool has_section(const std::string& section) const {
    return tree_.get_child_optional(section).has_value();
  }

  std::optional<std::string> text(const std::string& key) const {
    const auto node = tree_.get_optional<std::string>(ptree::path_type(key, '.'));
    if (!node) return std::nullopt;
    std::string value = *node;
    const auto comment = value.find_first_of(";#");
    if (comment != std::string::npos) value.erase(comment);
    boost::algorithm::trim(value);
    if (value.empty()) throw ContractError(key + ": empty value");
    return value;
  }

  template <class T>
  std::optional<T> get(const std::string& key) const {
    const auto value = text(key);
    if (!value) return std::nullopt;
    return convert<T>(key, *value);
  }

  template <class T>
  T get_or(const std::string& key, T fallback) const {
    return get<T>(key).value_or(fallback);
  }

  template <class T>
  std::optional<std::vector<T>> list(const std::string& key) const {
    const auto value = text(key);
    if (!value) return std::nullopt;
    std::vector<std::string> parts;
    boost::algorithm::split(parts, *value, boost::is_any_of(", "), boost::token_compress_on);
    std::vector<T> out;
    for (auto& p : parts) {
      if (!p.empty()) out.push_back(convert<T>(key, p));
    }
    if (out.empty()) throw ContractError(key + ": empty list");
    return out;
  }

  template <class T>
  static T convert(const std::string& key, const std::string& value) {
    if constexpr (std::is_same_v<T, bool>) {
      const std::string v = boost::algorithm::to_lower_copy(value);
      if (v == "true" || v == "yes" || v == "1") return true;
      if (v == "false" || v == "no" || v == "0") return false;
      throw ContractError(key + ": expected true or false, got '" + value + "'");
    } else if constexpr (std::is_same_v<T, std::string>) {
      return value;
    } else {
      try {
        return boost::lexical_cast<T>(value);
      } catch (const boost::bad_lexical_cast&) {
        throw ContractError(key + ": cannot parse '" + value + "'");
      }
    }
  }

 private:
  const ptree& tree_;
};

ParamVector parse_vector(const std::string& key, const std::string& text) {
  std::vector<std::string> parts;
  const std::string trimmed = boost::algorithm::trim_copy(text);
  boost::algorithm::split(parts, trimmed, boost::is_any_of(" \t"), boost::token_compress_on);
  ParamVector v(static_cast<Eigen::Index>(parts.size()));
  for (std::size_t i = 0; i < parts.size(); ++i) {
    v[static_cast<Eigen::Index>(i)] = Fields::convert<double>(key, parts[i]);
  }
  require_finite(v, key.c_str());
  return v;
}

std::string format_gamma(double gamma) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", gamma);
  return buf;
}

// Mean center and center variance of a dataset under a quadratic model.
std::pair<ParamVector, double> center_stats(const QuadraticConsensus& model,
                                            const LabeledDataset& data) {
  ParamVector mean = ParamVector::Zero(model.centers.front().size());
  for (std::size_t i : data.canonical_order()) mean += model.center_for(data.label(i));
  mean /= static_cast<double>(data.size());
  double var = 0.0;
  for (std::size_t i : data.canonical_order()) {
    var += (model.center_for(data.label(i)) - mean).squaredNorm();
  }
  return {mean, var / static_cast<double>(data.size())};
}

// Variance of a size-b mean drawn without replacement from n items of variance var.
double minibatch_variance(double var, std::size_t n, std::optional<std::size_t> batch) {
  const std::size_t b = std::min(batch.value_or(n), n);
  if (b >= n || n < 2) return 0.0;
  return var * static_cast<double>(n - b) / (static_cast<double>(b) * static_cast<double>(n - 1));
}

std::size_t default_n0(const ExperimentSpec& spec, std::size_t n) {
  return spec.server.n0 > 0 ? spec.server.n0 : std::max<std::size_t>(1, n / 20);
}

ReportTable aggregate(const std::map<std::string, std::vector<std::vector<RoundTrace>>>& traces) {
  ReportTable table;
  std::optional<std::pair<std::string, std::size_t>> reference;
  for (const auto& [label, runs] : traces) {
    ReportRow row;
    row.label = label;
    row.runs = runs.size();
    for (const auto& trace : runs) {
      if (!reference) reference = std::make_pair(label, trace.size());
      if (trace.size() != reference->second) {
        throw ContractError("mismatched round counts: " + reference->first + " has " +
                            std::to_string(reference->second) + " rounds, " + label + " has " +
                            std::to_string(trace.size()));
      }
    }
    if (runs.empty() || runs.front().empty()) {
      table.rows.push_back(row);
      continue;
    }
    row.rounds = static_cast<int>(runs.front().size());
    row.mean_rolling_curve.assign(runs.front().size(), 0.0);
    for (const auto& trace : runs) {
      row.final_rolling_per_run.push_back(trace.back().rolling_acc);
      for (std::size_t t = 0; t < trace.size(); ++t) {
        row.mean_rolling_curve[t] += trace[t].rolling_acc;
      }
    }
    for (double& v : row.mean_rolling_curve) v /= static_cast<double>(runs.size());
    row.final_rolling_acc =
        std::accumulate(row.final_rolling_per_run.begin(), row.final_rolling_per_run.end(), 0.0) /
        static_cast<double>(runs.size());
    row.rise_time = rise_time(row.mean_rolling_curve);
    table.rows.push_back(std::move(row));
  }
  for (const auto& a : table.rows) {
    for (const auto& b : table.rows) {
      if (a.label == b.label) continue;
      ReportDelta d{a.label, b.label, a.final_rolling_acc - b.final_rolling_acc, std::nullopt};
      if (a.rise_time && b.rise_time) d.rise_delta = *a.rise_time - *b.rise_time;
      table.deltas.push_back(d);
    }
  }
  return table;
}

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }
Json optional_json(const std::optional<int>& v) { return v ? Json(*v) : Json(nullptr); }

bool is_quadratic(const ExperimentSpec& spec) { return spec.model.kind == "quadratic"; }

std::optional<double> quadratic_gap(const std::vector<RoundTrace>& trace) {
  if (trace.empty() || !std::isfinite(trace.front().grad_norm_Ftilde)) return std::nullopt;
  // Unit-Hessian quadratic: Ftilde(x) - Ftilde* = 0.5 ||grad Ftilde(x)||^2.
  return 0.5 * trace.front().grad_norm_Ftilde * trace.front().grad_norm_Ftilde;
}

Json theory_json(const ExperimentSpec& spec, const SeededSetup& setup, const RunVariant& variant,
                 std::uint64_t seed, const std::vector<std::vector<RoundTrace>>& runs) {
  const FederationConfig cfg = resolve_config(spec, variant, setup.federation, seed);
  const TheoryConstants tc = theory_constants(spec, cfg, setup.federation);
  const DerivedConstants dc = derive_constants(tc);
  const StepSizeReport steps = check_step_sizes(tc);
  Json j;
  j["L"] = tc.L;
  j["G"] = tc.G;
  j["xi_bar"] = tc.xi_bar;
  j["sigma"] = tc.sigma;
  j["sigma0"] = tc.sigma0;
  j["rho_s"] = dc.rho_s;
  j["psi"] = dc.psi;
  j["kappa"] = dc.kappa;
  j["phi"] = dc.phi;
  j["h"] = dc.h;
  j["M_sq"] = dc.M_sq;
  j["effective_step"] = tc.effective_step();
  j["tight_cap"] = max_effective_step(tc);
  j["conservative_cap"] = conservative_effective_step(tc);
  j["steps_balanced"] = steps.balanced;
  j["steps_within_cap"] = steps.within_cap;
  std::optional<double> gap = spec.theory->initial_gap;
  if (!gap && is_quadratic(spec)) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& trace : runs) {
      if (const auto g = quadratic_gap(trace)) {
        sum += *g;
        ++count;
      }
    }
    if (count > 0) gap = sum / static_cast<double>(count);
  }
  j["initial_gap"] = optional_json(gap);
  std::optional<double> bound;
  if (gap && steps.ok() && dc.h > 0.0 && cfg.rounds >= 1) {
    bound = stationarity_bound(tc, dc, *gap, cfg.rounds);
  }
  j["stationarity_bound"] = optional_json(bound);
  return j;
}

}  // namespace

ExperimentSpec parse_config_text(const std::string& text, const std::filesystem::path& base_dir) {
  ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ContractError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  const Fields f(tree);
  ExperimentSpec spec;

  const std::string source = f.get_or<std::string>("data.source", "blobs");
  if (source == "blobs") {
    spec.data.source = DataBlock::Source::kBlobs;
  } else if (source == "csv") {
    spec.data.source = DataBlock::Source::kCsv;
  } else {
    throw ContractError("data.source: expected blobs or csv, got '" + source + "'");
  }
  spec.data.blobs.num_classes = f.get_or("data.classes", 5);
  spec.data.blobs.per_class = f.get_or("data.per_class", 100);
  spec.data.blobs.dim = f.get_or("data.dim", 10);
  spec.data.blobs.spread = f.get_or("data.spread", 1.0);
  spec.data.blobs.separation = f.get_or("data.separation", 1.0);
  spec.data.test_per_class = f.get_or("data.test_per_class", spec.data.blobs.per_class / 4);
  if (spec.data.source == DataBlock::Source::kCsv) {
    const auto train = f.get<std::string>("data.train_csv");
    if (!train) throw ContractError("data.train_csv: required when data.source = csv");
    spec.data.train_csv = base_dir / *train;
    if (const auto test = f.get<std::string>("data.test_csv")) spec.data.test_csv = base_dir / *test;
  } else {
    if (spec.data.blobs.num_classes < 1) throw ContractError("data.classes: must be >= 1");
    if (spec.data.blobs.per_class < 1) throw ContractError("data.per_class: must be >= 1");
    if (spec.data.blobs.dim < 1) throw ContractError("data.dim: must be >= 1");
    if (!(spec.data.blobs.spread >= 0.0)) throw ContractError("data.spread: must be >= 0");
    if (!(spec.data.blobs.separation >= 0.0)) {
      throw ContractError("data.separation: must be >= 0");
    }
    if (spec.data.test_per_class < 0) throw ContractError("data.test_per_class: must be >= 0");
  }

  spec.num_clients = f.get_or("partition.clients", 10);
  spec.classes_per_client = f.get_or("partition.classes_per_client", 1);
  if (spec.num_clients < 1) throw ContractError("N: partition.clients must be >= 1");
  if (spec.classes_per_client < 1) throw ContractError("C: partition.classes_per_client must be >= 1");

  const std::string kind = f.get_or<std::string>("server.kind", "iid");
  if (kind == "none") {
    spec.server.kind = ServerBlock::Kind::kNone;
  } else if (kind == "iid") {
    spec.server.kind = ServerBlock::Kind::kIid;
  } else if (kind == "from_clients") {
    spec.server.kind = ServerBlock::Kind::kFromClients;
  } else if (kind == "shifted") {
    spec.server.kind = ServerBlock::Kind::kShifted;
  } else if (kind == "own_label") {
    spec.server.kind = ServerBlock::Kind::kOwnLabel;
  } else {
    throw ContractError("server.kind: expected none, iid, from_clients, shifted or own_label");
  }
  spec.server.n0 = f.get_or<std::size_t>("server.n0", 0);
  spec.server.from_clients = f.get_or("server.clients", 0);
  spec.server.per_client = f.get_or<std::size_t>("server.per_client", 0);
  spec.server.shift = f.get_or("server.shift_sd", 0.0);
  spec.server.dropped_class = f.get<int>("server.dropped_class");
  if (spec.server.kind == ServerBlock::Kind::kFromClients &&
      (spec.server.from_clients < 1 || spec.server.per_client < 1)) {
    throw ContractError("server.clients and server.per_client: required for from_clients");
  }
  if (spec.server.kind == ServerBlock::Kind::kShifted &&
      spec.data.source != DataBlock::Source::kBlobs) {
    throw ContractError("server.kind: shifted server data needs data.source = blobs");
  }

  spec.model.kind = f.get_or<std::string>("model.kind", "softmax");
  if (spec.model.kind != "softmax" && spec.model.kind != "mlp" && spec.model.kind != "quadratic") {
    throw ContractError("model.kind: expected softmax, mlp or quadratic");
  }
  spec.model.hidden = f.get_or("model.hidden", 16);
  if (spec.model.hidden < 1) throw ContractError("model.hidden: must be >= 1");
  if (const auto centers = f.text("model.centers")) {
    std::vector<std::string> rows;
    boost::algorithm::split(rows, *centers, boost::is_any_of(","));
    for (const auto& row : rows) spec.model.centers.push_back(parse_vector("model.centers", row));
    for (const auto& c : spec.model.centers) {
      if (c.size() != spec.model.centers.front().size()) {
        throw ContractError("model.centers: rows differ in dimension");
      }
    }
  }
  if (is_quadratic(spec) && spec.model.centers.empty()) {
    throw ContractError("model.centers: required for the quadratic model");
  }

  FederationConfig& cfg = spec.base;
  cfg.num_clients = spec.num_clients;
  const auto algorithms = f.list<std::string>("federation.algorithms");
  if (!algorithms) throw ContractError("federation.algorithms: required");
  for (const auto& name : *algorithms) spec.algorithms.push_back(parse_algorithm(name));
  cfg.clients_per_round = f.get_or("federation.S", std::min(spec.num_clients, 5));
  spec.local_epochs = f.get<double>("federation.local_epochs");
  cfg.local_steps = f.get_or("federation.K", 5);
  if (spec.local_epochs && f.text("federation.K")) {
    throw ContractError("federation.K: conflicts with federation.local_epochs");
  }
  const auto server_epochs = f.text("federation.server_epochs");
  if (server_epochs && f.text("federation.K0")) {
    throw ContractError("federation.K0: conflicts with federation.server_epochs");
  }
  if (server_epochs == std::optional<std::string>("auto")) {
    if (!spec.local_epochs) throw ContractError("federation.server_epochs: auto needs local_epochs");
    spec.server_epochs_auto = true;
  } else if (server_epochs) {
    spec.server_epochs = Fields::convert<double>("federation.server_epochs", *server_epochs);
  } else if (const auto k0 = f.get<int>("federation.K0")) {
    cfg.server_steps = *k0;
  } else if (spec.local_epochs) {
    spec.server_epochs_auto = true;
  } else {
    cfg.server_steps = cfg.local_steps;
  }
  if (spec.local_epochs && !(*spec.local_epochs > 0.0)) {
    throw ContractError("federation.local_epochs: must be > 0");
  }
  if (spec.server_epochs && !(*spec.server_epochs > 0.0)) {
    throw ContractError("federation.server_epochs: must be > 0");
  }
  cfg.lr_local = f.get_or("federation.lr_local", 0.05);
  cfg.lr_global = f.get<double>("federation.lr_global");
  cfg.lr_server = f.get<double>("federation.lr_server");
  spec.gammas = f.list<double>("federation.gamma").value_or(std::vector<double>{1.0});
  cfg.rounds = f.get_or("federation.rounds", 100);
  const auto batch_of = [&](const std::string& key) -> std::optional<std::size_t> {
    const auto v = f.text(key);
    if (!v || *v == "full") return std::nullopt;
    return Fields::convert<std::size_t>(key, *v);
  };
  cfg.batch = batch_of("federation.batch");
  cfg.server_batch = f.text("federation.server_batch") ? batch_of("federation.server_batch")
                                                        : cfg.batch;
  cfg.pretrain.epochs = f.get_or("federation.pretrain_epochs", 0);
  cfg.pretrain.lr = f.get_or("federation.pretrain_lr", cfg.lr_local);
  cfg.fslp_server_weight = f.get<double>("federation.fslp_weight");

  spec.seeds = f.list<std::uint64_t>("run.seeds").value_or(std::vector<std::uint64_t>{0});
  spec.metrics_stride = f.get_or("run.stride", is_quadratic(spec) ? 1 : 10);
  spec.rolling_window = f.get_or("run.window", 20);
  spec.threads = f.get_or("run.threads", 1);
  spec.exact_client_drift = f.get_or("run.exact_client_drift", false);
  if (const auto init = f.text("run.init")) spec.initial_params = parse_vector("run.init", *init);
  spec.out_dir = base_dir / f.get_or<std::string>("run.out", "out");
  if (spec.metrics_stride < 1) throw ContractError("run.stride: must be >= 1");
  if (spec.rolling_window < 1) throw ContractError("run.window: must be >= 1");
  if (spec.threads < 1) throw ContractError("run.threads: must be >= 1");

  if (f.has_section("theory")) {
    TheoryBlock th;
    th.exact = f.get_or("theory.exact", false);
    th.L = f.get_or("theory.L", 1.0);
    th.G = f.get_or("theory.G", 0.0);
    th.xi_bar = f.get_or("theory.xi_bar", 0.0);
    th.sigma = f.get_or("theory.sigma", 0.0);
    th.sigma0 = f.get_or("theory.sigma0", 0.0);
    th.initial_gap = f.get<double>("theory.initial_gap");
    if (th.exact && !is_quadratic(spec)) {
      throw ContractError("theory.exact: only available for the quadratic model");
    }
    if (!(th.L > 0.0)) throw ContractError("theory.L: must be > 0");
    spec.theory = th;
  }

  for (double g : spec.gammas) {
    FederationConfig probe = cfg;
    probe.gamma = g;
    probe.validate();
  }
  return spec;
}

ExperimentSpec parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  ExperimentSpec spec = parse_config_text(buffer.str(), path.parent_path());
  for (const auto& p : {spec.data.train_csv, spec.data.test_csv}) {
    if (!p.empty() && !std::filesystem::exists(p)) {
      throw ContractError("data file does not exist: " + p.string());
    }
  }
  return spec;
}

LossModel build_model(const ExperimentSpec& spec, const LabeledDataset& train) {
  if (spec.model.kind == "softmax") return SoftmaxRegression{train.dim(), train.num_classes()};
  if (spec.model.kind == "mlp") return Mlp1{train.dim(), spec.model.hidden, train.num_classes()};
  if (spec.model.centers.size() == 1) return QuadraticConsensus(spec.model.centers.front());
  return QuadraticConsensus(spec.model.centers);
}

SeededSetup build_setup(const ExperimentSpec& spec, std::uint64_t seed) {
  const BlobSpec& blobs = spec.data.blobs;
  std::optional<LabeledDataset> train;
  LabeledDataset test = LabeledDataset::empty_like(1, 1);
  if (spec.data.source == DataBlock::Source::kBlobs) {
    BlobSpec train_spec = blobs;
    train_spec.seed = seed;
    train = gen_blobs(train_spec);
    if (spec.data.test_per_class > 0) {
      Rng test_rng = derive_stream(seed, StreamTag::kTestData);
      BlobSpec test_spec = blobs;
      test_spec.per_class = spec.data.test_per_class;
      test_spec.seed = test_rng();
      test = gen_blobs(test_spec);
    } else {
      test = LabeledDataset::empty_like(train->dim(), train->num_classes());
    }
  } else {
    train = read_csv(spec.data.train_csv);
    test = spec.data.test_csv.empty()
               ? LabeledDataset::empty_like(train->dim(), train->num_classes())
               : read_csv(spec.data.test_csv, train->num_classes());
  }

  std::vector<LabeledDataset> clients =
      partition_by_class(*train, {spec.num_clients, spec.classes_per_client, seed});
  const std::size_t n0 = default_n0(spec, train->size());
  LabeledDataset server = LabeledDataset::empty_like(train->dim(), train->num_classes());
  switch (spec.server.kind) {
    case ServerBlock::Kind::kNone:
      break;
    case ServerBlock::Kind::kIid:
      server = build_server_data(*train, clients, IidSubsample{n0}, seed);
      break;
    case ServerBlock::Kind::kFromClients:
      server = build_server_data(*train, clients,
                                 FromClients{spec.server.from_clients, spec.server.per_client},
                                 seed);
      break;
    case ServerBlock::Kind::kShifted: {
      BlobSpec gen = blobs;
      gen.seed = seed;
      server = build_server_data(
          *train, clients, Shifted{gen, n0, spec.server.shift * blobs.spread, spec.server.dropped_class},
          seed);
      break;
    }
    case ServerBlock::Kind::kOwnLabel: {
      const LabeledDataset picked = build_server_data(*train, clients, IidSubsample{n0}, seed);
      const int label = train->num_classes();
      server = LabeledDataset(picked.features(), std::vector<int>(picked.size(), label), label + 1);
      break;
    }
  }
  LossModel model = build_model(spec, *train);
  return SeededSetup{std::move(*train), Federation{std::move(clients), std::move(server), std::move(test)},
                     std::move(model)};
}

std::vector<RunVariant> expand_variants(const ExperimentSpec& spec) {
  std::vector<RunVariant> out;
  for (Algorithm a : spec.algorithms) {
    if (a == Algorithm::kFedAvg || a == Algorithm::kDataSharing) {
      out.push_back({algorithm_name(a), a, 0.0});
      continue;
    }
    for (double g : spec.gammas) {
      out.push_back({algorithm_name(a) + "_gamma" + format_gamma(g), a, g});
    }
  }
  std::set<std::string> seen;
  for (const auto& v : out) {
    if (!seen.insert(v.label).second) throw ContractError("federation.algorithms: duplicate " + v.label);
  }
  return out;
}

FederationConfig resolve_config(const ExperimentSpec& spec, const RunVariant& variant,
                                const Federation& federation, std::uint64_t seed) {
  FederationConfig cfg = spec.base;
  cfg.algorithm = variant.algorithm;
  cfg.gamma = variant.gamma;
  cfg.master_seed = seed;
  cfg.num_clients = static_cast<int>(federation.clients.size());
  if (federation.clients.empty()) throw ContractError("no clients");
  std::size_t client_n = federation.clients.front().size();
  if (variant.algorithm == Algorithm::kDataSharing) client_n += federation.server.size();
  const std::size_t n0 = federation.server.size();
  if (spec.local_epochs) {
    cfg.local_steps =
        std::max(1, steps_for_epochs(*spec.local_epochs, client_n,
                                     std::min(cfg.batch.value_or(client_n), client_n)));
  }
  if (n0 > 0 && (spec.server_epochs_auto || spec.server_epochs)) {
    std::size_t n = 0;
    for (const auto& c : federation.clients) n += c.size();
    const double epochs =
        spec.server_epochs_auto
            ? static_cast<double>(server_epochs_for(n, cfg.num_clients, n0, *spec.local_epochs))
            : *spec.server_epochs;
    cfg.server_steps = std::max(
        1, steps_for_epochs(epochs, n0, std::min(cfg.server_batch.value_or(n0), n0)));
  } else if (spec.server_epochs_auto || spec.server_epochs) {
    cfg.server_steps = cfg.local_steps;
  }
  cfg.validate();
  return cfg;
}

RunOutput run_variant(const ExperimentSpec& spec, const RunVariant& variant,
                      const SeededSetup& setup, std::uint64_t seed) {
  const FederationConfig cfg = resolve_config(spec, variant, setup.federation, seed);
  RunOptions opts;
  opts.metrics_stride = spec.metrics_stride;
  opts.rolling_window = spec.rolling_window;
  opts.exact_client_drift = spec.exact_client_drift;
  opts.threads = spec.threads;
  opts.initial_params = spec.initial_params;
  return run(cfg, setup.federation, setup.model, opts);
}

std::string trace_file_name(const std::string& label, std::uint64_t seed) {
  return label + "_seed" + std::to_string(seed) + ".csv";
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  if (spec.seeds.empty()) throw ContractError("run.seeds: must not be empty");
  std::error_code ec;
  std::filesystem::create_directories(spec.out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + spec.out_dir.string() + ": " + ec.message());

  const auto variants = expand_variants(spec);
  ExperimentResult result;
  std::map<std::string, std::vector<std::vector<RoundTrace>>> traces;
  std::optional<SeededSetup> first_setup;
  for (std::uint64_t seed : spec.seeds) {
    SeededSetup setup = build_setup(spec, seed);
    for (const auto& variant : variants) {
      RunOutput out = run_variant(spec, variant, setup, seed);
      const auto path = spec.out_dir / trace_file_name(variant.label, seed);
      write_trace_csv(path, out.trace);
      result.traces.push_back(path);
      traces[variant.label].push_back(std::move(out.trace));
    }
    if (!first_setup) first_setup = std::move(setup);
  }

  const ReportTable table = aggregate(traces);
  Json summary;
  summary["rounds"] = spec.base.rounds;
  summary["seeds"] = spec.seeds;
  summary["rolling_window"] = spec.rolling_window;
  Json runs = Json::object();
  for (const auto& row : table.rows) {
    Json r;
    r["runs"] = row.runs;
    r["final_rolling_acc_mean"] = row.final_rolling_acc;
    r["final_rolling_acc"] = row.final_rolling_per_run;
    r["rise_time"] = optional_json(row.rise_time);
    Json files = Json::array();
    for (std::uint64_t seed : spec.seeds) files.push_back(trace_file_name(row.label, seed));
    r["traces"] = files;
    if (spec.theory) {
      const auto v = std::find_if(variants.begin(), variants.end(),
                                  [&](const RunVariant& x) { return x.label == row.label; });
      r["theory"] = theory_json(spec, *first_setup, *v, spec.seeds.front(), traces.at(row.label));
    }
    runs[row.label] = r;
  }
  summary["runs"] = runs;
  Json deltas = Json::array();
  for (const auto& d : table.deltas) {
    deltas.push_back({{"a", d.a}, {"b", d.b}, {"acc_delta", d.acc_delta},
                      {"rise_delta", optional_json(d.rise_delta)}});
  }
  summary["deltas"] = deltas;

  result.summary = spec.out_dir / "summary.json";
  std::ofstream out(result.summary, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + result.summary.string());
  out << summary.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + result.summary.string());
  return result;
}

const ReportRow& ReportTable::row(const std::string& label) const {
  for (const auto& r : rows) {
    if (r.label == label) return r;
  }
  throw ContractError("no traces labeled " + label);
}

ReportTable compare_report(
    const std::map<std::string, std::vector<std::vector<RoundTrace>>>& traces) {
  std::size_t count = 0;
  for (const auto& [label, runs] : traces) count += runs.size();
  if (count < 2) throw ContractError("a comparison needs at least two traces");
  return aggregate(traces);
}

ReportTable compare_report(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ContractError("not a directory: " + dir.string());
  static const std::regex pattern(R"((.+)_seed(\d+)\.csv)");
  std::vector<std::pair<std::string, std::filesystem::path>> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    std::smatch m;
    if (entry.is_regular_file() && std::regex_match(name, m, pattern)) {
      files.emplace_back(name, entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::map<std::string, std::vector<std::vector<RoundTrace>>> traces;
  for (const auto& [name, path] : files) {
    std::smatch m;
    std::regex_match(name, m, pattern);
    traces[m[1].str()].push_back(read_trace_csv(path));
  }
  return compare_report(traces);
}

std::string format_report(const ReportTable& table) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-20s %5s %7s %18s %10s\n", "label", "runs", "rounds",
                "final_rolling_acc", "rise_time");
  out << line;
  for (const auto& r : table.rows) {
    const std::string rise = r.rise_time ? std::to_string(*r.rise_time) : "-";
    std::snprintf(line, sizeof line, "%-20s %5zu %7d %18.4f %10s\n", r.label.c_str(), r.runs,
                  r.rounds, r.final_rolling_acc, rise.c_str());
    out << line;
  }
  out << "\npairwise deltas (a - b)\n";
  for (const auto& d : table.deltas) {
    if (d.a > d.b) continue;
    const std::string rise = d.rise_delta ? std::to_string(*d.rise_delta) : "-";
    std::snprintf(line, sizeof line, "%-20s %-20s acc %+8.4f  rise %s\n", d.a.c_str(),
                  d.b.c_str(), d.acc_delta, rise.c_str());
    out << line;
  }
  return out.str();
}

TheoryConstants theory_constants(const ExperimentSpec& spec, const FederationConfig& cfg,
                                 const Federation& federation) {
  TheoryConstants tc;
  TheoryBlock block;
  if (spec.theory) {
    block = *spec.theory;
  } else {
    block.exact = is_quadratic(spec);
  }
  if (block.exact) {
    if (!is_quadratic(spec)) throw ContractError("exact constants need the quadratic model");
    const QuadraticConsensus model = spec.model.centers.size() == 1
                                         ? QuadraticConsensus(spec.model.centers.front())
                                         : QuadraticConsensus(spec.model.centers);
    std::vector<ParamVector> client_centers;
    double sigma_sq = 0.0;
    for (const auto& c : federation.clients) {
      const auto [mean, var] = center_stats(model, c);
      client_centers.push_back(mean);
      sigma_sq = std::max(sigma_sq, minibatch_variance(var, c.size(), cfg.batch));
    }
    if (federation.server.empty()) throw ContractError("exact constants need server data");
    const auto [server_mean, server_var] = center_stats(model, federation.server);
    tc = exact_constants_for_quadratics(server_mean, client_centers);
    tc.sigma = std::sqrt(sigma_sq);
    tc.sigma0 = std::sqrt(minibatch_variance(server_var, federation.server.size(), cfg.server_batch));
  } else {
    tc.L = block.L;
    tc.G = block.G;
    tc.xi_bar = block.xi_bar;
    tc.sigma = block.sigma;
    tc.sigma0 = block.sigma0;
  }
  tc.N = cfg.num_clients;
  tc.S = cfg.clients_per_round;
  tc.K = cfg.local_steps;
  tc.K0 = cfg.server_steps;
  tc.gamma = cfg.effective_gamma();
  tc.lr_local = cfg.lr_local;
  tc.lr_global = cfg.global_lr();
  tc.lr_server = cfg.server_lr();
  return tc;
}

bool TheoryRunReport::ok() const {
  if (!steps.balanced) return false;
  if (descent_is_pointwise && descent_violations > 0) return false;
  if (drift_premises && (client_drift_violations > 0 || server_drift_violations > 0)) return false;
  if (stationarity_bound && *stationarity_bound < min_grad_Ftilde_sq) return false;
  return true;
}

std::vector<TheoryRunReport> check_theory(const ExperimentSpec& spec) {
  if (!spec.theory && !is_quadratic(spec)) {
    throw ContractError("check-theory needs a [theory] section for non-quadratic models");
  }
  ExperimentSpec run_spec = spec;
  run_spec.metrics_stride = 1;
  run_spec.exact_client_drift = true;
  std::vector<TheoryRunReport> reports;
  for (std::uint64_t seed : spec.seeds) {
    const SeededSetup setup = build_setup(run_spec, seed);
    for (const auto& variant : expand_variants(run_spec)) {
      const FederationConfig cfg = resolve_config(run_spec, variant, setup.federation, seed);
      TheoryRunReport rep;
      rep.label = variant.label;
      rep.seed = seed;
      rep.constants = theory_constants(run_spec, cfg, setup.federation);
      rep.derived = derive_constants(rep.constants);
      rep.steps = check_step_sizes(rep.constants);
      rep.tight_cap = max_effective_step(rep.constants);
      rep.conservative_cap = conservative_effective_step(rep.constants);
      rep.rounds = cfg.rounds;
      rep.descent_is_pointwise = cfg.clients_per_round == cfg.num_clients && !cfg.batch &&
                                 (!cfg.server_batch || cfg.effective_gamma() == 0.0);

      const RunOutput out = run_variant(run_spec, variant, setup, seed);
      const auto& trace = out.trace;
      if (rep.steps.ok()) {
        for (std::size_t t = 0; t + 1 < trace.size(); ++t) {
          const double bound =
              descent_bound(rep.constants, rep.derived, trace[t].Ftilde,
                            trace[t].grad_norm_Ftilde * trace[t].grad_norm_Ftilde, trace[t].xi_sq);
          ++rep.descent_checked;
          if (trace[t + 1].Ftilde > bound + 1e-12 * std::max(1.0, std::abs(bound))) {
            ++rep.descent_violations;
          }
        }
      }
      rep.drift_premises = true;
      for (const auto& row : trace) {
        const DriftBoundCheck check = check_drift_bounds(row, rep.constants);
        rep.drift_premises = rep.drift_premises && check.client_premise && check.server_premise;
        ++rep.drift_checked;
        if (!check.client_ok) ++rep.client_drift_violations;
        if (!check.server_ok) ++rep.server_drift_violations;
      }
      rep.min_grad_Ftilde_sq = std::numeric_limits<double>::infinity();
      for (const auto& row : trace) {
        rep.min_grad_Ftilde_sq =
            std::min(rep.min_grad_Ftilde_sq, row.grad_norm_Ftilde * row.grad_norm_Ftilde);
      }
      rep.initial_gap = spec.theory ? spec.theory->initial_gap : std::nullopt;
      if (!rep.initial_gap && is_quadratic(spec)) rep.initial_gap = quadratic_gap(trace);
      if (rep.initial_gap && rep.steps.ok() && rep.derived.h > 0.0 && cfg.rounds >= 1) {
        rep.stationarity_bound =
            stationarity_bound(rep.constants, rep.derived, *rep.initial_gap, cfg.rounds);
      }
      reports.push_back(std::move(rep));
    }
  }
  return reports;
}

std::string theory_report_json(const std::vector<TheoryRunReport>& reports) {
  Json arr = Json::array();
  for (const auto& r : reports) {
    Json j;
    j["label"] = r.label;
    j["seed"] = r.seed;
    j["ok"] = r.ok();
    j["constants"] = {{"L", r.constants.L},       {"G", r.constants.G},
                      {"xi_bar", r.constants.xi_bar}, {"sigma", r.constants.sigma},
                      {"sigma0", r.constants.sigma0}, {"N", r.constants.N},
                      {"S", r.constants.S},       {"K", r.constants.K},
                      {"K0", r.constants.K0},     {"gamma", r.constants.gamma},
                      {"lr_local", r.constants.lr_local}, {"lr_global", r.constants.lr_global},
                      {"lr_server", r.constants.lr_server}};
    j["derived"] = {{"rho_s", r.derived.rho_s}, {"psi", r.derived.psi},
                    {"kappa", r.derived.kappa}, {"phi", r.derived.phi},
                    {"h", r.derived.h},         {"G3", r.derived.G3},
                    {"M_sq", r.derived.M_sq}};
    j["step_sizes"] = {{"client_effective", r.steps.client_effective},
                       {"server_effective", r.steps.server_effective},
                       {"balanced", r.steps.balanced},
                       {"within_tight_cap", r.steps.within_cap},
                       {"tight_cap", r.tight_cap},
                       {"conservative_cap", r.conservative_cap}};
    j["descent"] = {{"checked", r.descent_checked},
                    {"violations", r.descent_violations},
                    {"pointwise", r.descent_is_pointwise}};
    j["drift"] = {{"checked", r.drift_checked},
                  {"premises_hold", r.drift_premises},
                  {"client_violations", r.client_drift_violations},
                  {"server_violations", r.server_drift_violations}};
    j["stationarity"] = {{"rounds", r.rounds},
                         {"initial_gap", optional_json(r.initial_gap)},
                         {"bound", optional_json(r.stationarity_bound)},
                         {"observed_min_grad_sq", r.min_grad_Ftilde_sq}};
    arr.push_back(j);
  }
  return arr.dump(2);
}

}  // namespace fsl
