#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fsl/data.hpp"
#include "fsl/fedsim.hpp"
#include "fsl/metrics.hpp"
#include "fsl/theory.hpp"

namespace fsl {

/// Where the training and test samples come from.
struct DataBlock {
  enum class Source { kBlobs, kCsv } source = Source::kBlobs;
  BlobSpec blobs;          // seed is replaced by the run seed
  int test_per_class = 0;  // blobs only; 0 disables the test set
  std::filesystem::path train_csv;
  std::filesystem::path test_csv;
};

/// Server data regime. `own_label` takes an IID subsample and moves it to a
/// label of its own (num_classes), for quadratic testbeds whose server center
/// differs from every client center.
struct ServerBlock {
  enum class Kind { kNone, kIid, kFromClients, kShifted, kOwnLabel } kind = Kind::kIid;
  std::size_t n0 = 0;
  int from_clients = 0;
  std::size_t per_client = 0;
  double shift = 0.0;
  std::optional<int> dropped_class;
};

struct ModelBlock {
  std::string kind = "softmax";  // softmax | mlp | quadratic
  int hidden = 16;
  std::vector<ParamVector> centers;  // quadratic: one row per label, or one shared row
};

/// Constants supplied for the bound evaluations. `exact` derives L, G, xi_bar
/// and the noise levels from a quadratic testbed instead.
struct TheoryBlock {
  bool exact = false;
  double L = 1.0;
  double G = 0.0;
  double xi_bar = 0.0;
  double sigma = 0.0;
  double sigma0 = 0.0;
  std::optional<double> initial_gap;
};

struct ExperimentSpec {
  DataBlock data;
  int num_clients = 10;
  int classes_per_client = 1;
  ServerBlock server;
  ModelBlock model;

  /// Shared protocol fields; algorithm, gamma and seed vary per run.
  FederationConfig base;
  std::optional<double> local_epochs;   // overrides K
  std::optional<double> server_epochs;  // overrides K0
  bool server_epochs_auto = false;      // K0 from ceil(n / (N n0) * local_epochs)
  std::vector<Algorithm> algorithms;
  std::vector<double> gammas;

  std::vector<std::uint64_t> seeds;
  int metrics_stride = 1;
  int rolling_window = 20;
  int threads = 1;
  bool exact_client_drift = false;
  std::optional<ParamVector> initial_params;
  std::filesystem::path out_dir = "out";
  std::optional<TheoryBlock> theory;
};

/// INI-style text: `key = value` lines grouped in [data], [partition],
/// [server], [model], [federation], [run] and [theory] sections. Paths are
/// resolved against `base_dir`. Throws ContractError naming the field.
ExperimentSpec parse_config_text(const std::string& text,
                                 const std::filesystem::path& base_dir = ".");
ExperimentSpec parse_config(const std::filesystem::path& path);

LossModel build_model(const ExperimentSpec& spec, const LabeledDataset& train);

/// Train/test data, client partition and server data for one seed.
struct SeededSetup {
  LabeledDataset train;
  Federation federation;
  LossModel model;
};
SeededSetup build_setup(const ExperimentSpec& spec, std::uint64_t seed);

/// One (algorithm, gamma) combination. The label names the trace files:
/// `fedavg`, `ds`, `fsl_gamma1`, `fslp_gamma0.5`, ...
struct RunVariant {
  std::string label;
  Algorithm algorithm = Algorithm::kFsl;
  double gamma = 0.0;
};
std::vector<RunVariant> expand_variants(const ExperimentSpec& spec);

/// Resolves K and K0 (epoch settings), the algorithm, gamma and seed.
FederationConfig resolve_config(const ExperimentSpec& spec, const RunVariant& variant,
                                const Federation& federation, std::uint64_t seed);

RunOutput run_variant(const ExperimentSpec& spec, const RunVariant& variant,
                      const SeededSetup& setup, std::uint64_t seed);

std::string trace_file_name(const std::string& label, std::uint64_t seed);

struct ExperimentResult {
  std::vector<std::filesystem::path> traces;
  std::filesystem::path summary;
};

/// Runs every variant for every seed, writes `<label>_seed<s>.csv` traces and
/// summary.json into spec.out_dir.
ExperimentResult run_experiment(const ExperimentSpec& spec);

/// Per-label aggregate over seeds.
struct ReportRow {
  std::string label;
  std::size_t runs = 0;
  int rounds = 0;
  double final_rolling_acc = 0.0;            // mean over runs
  std::vector<double> final_rolling_per_run;
  std::optional<int> rise_time;              // of the seed-averaged rolling curve
  std::vector<double> mean_rolling_curve;
};

struct ReportDelta {
  std::string a;
  std::string b;
  double acc_delta = 0.0;           // a - b
  std::optional<int> rise_delta;    // a - b
};

struct ReportTable {
  std::vector<ReportRow> rows;
  std::vector<ReportDelta> deltas;
  const ReportRow& row(const std::string& label) const;
};

/// Traces grouped by label. Throws ContractError on mismatched round counts
/// or fewer than two traces.
ReportTable compare_report(const std::map<std::string, std::vector<std::vector<RoundTrace>>>& traces);
/// Reads every `<label>_seed<s>.csv` in `dir`.
ReportTable compare_report(const std::filesystem::path& dir);
std::string format_report(const ReportTable& table);

/// Constants used by the bound checks for one run.
TheoryConstants theory_constants(const ExperimentSpec& spec, const FederationConfig& cfg,
                                 const Federation& federation);

struct TheoryRunReport {
  std::string label;
  std::uint64_t seed = 0;
  TheoryConstants constants;
  DerivedConstants derived;
  StepSizeReport steps;
  double tight_cap = 0.0;         // max_effective_step
  double conservative_cap = 0.0;  // conservative_effective_step
  int rounds = 0;
  int descent_checked = 0;
  int descent_violations = 0;
  bool descent_is_pointwise = false;  // S == N and full batches
  int drift_checked = 0;
  int client_drift_violations = 0;
  int server_drift_violations = 0;
  bool drift_premises = false;
  std::optional<double> initial_gap;
  std::optional<double> stationarity_bound;
  double min_grad_Ftilde_sq = 0.0;
  bool ok() const;
};

/// Runs the FSL variants of `spec` and compares their traces with the bounds.
std::vector<TheoryRunReport> check_theory(const ExperimentSpec& spec);
std::string theory_report_json(const std::vector<TheoryRunReport>& reports);

}  // namespace fsl
