// Command-line front end: run experiments, check bounds, compare traces and
// verify model gradients.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fsl/data.hpp"
#include "fsl/experiment.hpp"
#include "fsl/model.hpp"

namespace {

void apply_overrides(fsl::ExperimentSpec& spec, const std::vector<std::uint64_t>& seeds,
                     const std::string& out) {
  if (!seeds.empty()) spec.seeds = seeds;
  if (!out.empty()) spec.out_dir = out;
}

int cmd_run(const std::string& config, const std::vector<std::uint64_t>& seeds,
            const std::string& out) {
  fsl::ExperimentSpec spec = fsl::parse_config(config);
  apply_overrides(spec, seeds, out);
  const fsl::ExperimentResult result = fsl::run_experiment(spec);
  for (const auto& p : result.traces) std::cout << "wrote " << p.string() << '\n';
  std::cout << "wrote " << result.summary.string() << '\n';
  return 0;
}

int cmd_check_theory(const std::string& config, const std::vector<std::uint64_t>& seeds,
                     const std::string& out) {
  fsl::ExperimentSpec spec = fsl::parse_config(config);
  apply_overrides(spec, seeds, out);
  const auto reports = fsl::check_theory(spec);
  const std::string json = fsl::theory_report_json(reports);
  std::filesystem::create_directories(spec.out_dir);
  const auto path = spec.out_dir / "theory.json";
  std::ofstream file(path, std::ios::binary);
  file << json << '\n';
  if (!file) throw std::runtime_error("cannot write " + path.string());

  bool all_ok = true;
  for (const auto& r : reports) {
    all_ok = all_ok && r.ok();
    std::printf("%-16s seed %-4llu %s  step %.6g (tight cap %.6g, conservative cap %.6g) h=%.6g\n",
                r.label.c_str(), static_cast<unsigned long long>(r.seed),
                r.ok() ? "ok  " : "FAIL", r.constants.effective_step(), r.tight_cap,
                r.conservative_cap, r.derived.h);
    std::printf("    descent: %d/%d violations%s; drift: %d client, %d server violations%s\n",
                r.descent_violations, r.descent_checked,
                r.descent_is_pointwise ? "" : " (expectation bound, informational)",
                r.client_drift_violations, r.server_drift_violations,
                r.drift_premises ? "" : " (premises not met)");
    if (r.stationarity_bound) {
      std::printf("    stationarity: bound %.6g vs observed min %.6g\n", *r.stationarity_bound,
                  r.min_grad_Ftilde_sq);
    }
  }
  std::cout << "wrote " << path.string() << '\n';
  return all_ok ? 0 : 2;
}

int cmd_report(const std::string& dir) {
  std::cout << fsl::format_report(fsl::compare_report(dir));
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  const fsl::LabeledDataset data = fsl::gen_blobs(3, 4, 5, 1.0, seed);
  const std::vector<fsl::LossModel> models = {
      fsl::QuadraticConsensus(std::vector<fsl::ParamVector>{
          fsl::ParamVector::Constant(4, 1.0), fsl::ParamVector::Constant(4, -1.0),
          fsl::ParamVector::LinSpaced(4, 0.0, 1.0)}),
      fsl::SoftmaxRegression{5, 3},
      fsl::Mlp1{5, 6, 3},
  };
  bool ok = true;
  fsl::Rng rng = fsl::derive_stream(seed, fsl::StreamTag::kInit);
  for (const auto& model : models) {
    const double tol = std::holds_alternative<fsl::QuadraticConsensus>(model) ? 1e-10 : 1e-5;
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      fsl::ParamVector x = fsl::init_params(model, rng) * 20.0;
      worst = std::max(worst, fsl::finite_diff_check(model, x, data, 1e-4));
    }
    const bool pass = worst <= tol;
    ok = ok && pass;
    std::printf("%-10s max relative error %.3e (tolerance %.0e) %s\n",
                fsl::kind_name(model).c_str(), worst, tol, pass ? "PASS" : "FAIL");
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning with server learning: simulator and checks"};
  app.require_subcommand(1);
  std::vector<std::uint64_t> seeds;
  std::string out;
  app.add_option("--seed", seeds, "Override the seed list")->delimiter(',');
  app.add_option("--out", out, "Override the output directory");

  std::string config;
  std::string dir;
  auto* run = app.add_subcommand("run", "Run every algorithm and seed of a config");
  run->add_option("config", config, "Config file")->required()->check(CLI::ExistingFile);
  auto* theory = app.add_subcommand("check-theory", "Evaluate step-size caps and bounds");
  theory->add_option("config", config, "Config file")->required()->check(CLI::ExistingFile);
  auto* report = app.add_subcommand("report", "Compare the traces in a directory");
  report->add_option("dir", dir, "Trace directory")->required()->check(CLI::ExistingDirectory);
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every model");

  for (auto* sub : {run, theory, report, grad}) {
    sub->fallthrough();
  }
  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config, seeds, out);
    if (*theory) return cmd_check_theory(config, seeds, out);
    if (*report) return cmd_report(dir);
    if (*grad) return cmd_gradcheck(seeds.empty() ? 0 : seeds.front());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
