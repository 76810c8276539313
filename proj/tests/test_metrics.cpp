#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "fsl/data.hpp"
#include "fsl/fedsim.hpp"
#include "fsl/metrics.hpp"
#include "testbed.hpp"

using namespace fsl;
using fsl::testing::cross_testbed;
using fsl::testing::quad_testbed;
using fsl::testing::vec;

namespace {

FederationConfig testbed_config(double lr_local, double gamma) {
  FederationConfig cfg;
  cfg.num_clients = 4;
  cfg.clients_per_round = 4;
  cfg.local_steps = 5;
  cfg.server_steps = 5;
  cfg.lr_local = lr_local;
  cfg.gamma = gamma;
  cfg.rounds = 100;
  return cfg;
}

TheoryConstants testbed_constants(const FederationConfig& cfg, const ParamVector& c0) {
  TheoryConstants tc = exact_constants_for_quadratics(
      c0, {vec({1, 0}), vec({-1, 0}), vec({0, 1}), vec({0, -1})});
  tc.K = cfg.local_steps;
  tc.K0 = cfg.server_steps;
  tc.gamma = cfg.effective_gamma();
  tc.lr_local = cfg.lr_local;
  tc.lr_global = cfg.global_lr();
  tc.lr_server = cfg.server_lr();
  return tc;
}

}  // namespace

TEST_CASE("dissimilarity is zero when every client holds the same data") {
  const auto data = gen_blobs(3, 6, 2, 1.0, 2);
  const std::vector<LabeledDataset> clients(4, data);
  const SoftmaxRegression model{2, 3};
  const auto d = grad_dissimilarity(model, ParamVector::Constant(9, 0.3), clients, data);
  CHECK(d.G_sq == 0.0);
  CHECK(d.xi_sq == 0.0);
}

TEST_CASE("server data equal to the union of client data gives zero server dissimilarity") {
  const auto data = gen_blobs(3, 8, 2, 1.0, 2);
  const auto clients = partition_by_class(data, {3, 1, 2});
  const SoftmaxRegression model{2, 3};
  Rng rng = derive_stream(1, StreamTag::kInit);
  const auto d = grad_dissimilarity(model, init_params(model, rng) * 10.0, clients, data);
  CHECK(d.xi_sq < 1e-28);
  CHECK(d.G_sq > 0.0);
}

TEST_CASE("quadratic dissimilarities equal their closed forms at every x") {
  const std::vector<ParamVector> centers{vec({1, 2}), vec({-3, 0}), vec({0.5, -1})};
  const ParamVector c0 = vec({2.0, 2.0});
  const auto tb = quad_testbed(c0, centers);
  const ParamVector c_bar = (centers[0] + centers[1] + centers[2]) / 3.0;
  double g_sq = 0.0;
  for (const auto& c : centers) g_sq += (c_bar - c).squaredNorm() / 3.0;
  const double xi_sq = (c0 - c_bar).squaredNorm();
  for (const ParamVector& x : {vec({0, 0}), vec({10, -4}), vec({-1e3, 7})}) {
    const auto d = grad_dissimilarity(tb.model, x, tb.clients, tb.server);
    CHECK(std::abs(d.G_sq - g_sq) <= 1e-12 * g_sq);
    CHECK(std::abs(d.xi_sq - xi_sq) <= 1e-12 * xi_sq);
  }
}

TEST_CASE("composite objective mixes client and server objectives") {
  const auto tb = cross_testbed(vec({1.0, 1.0}));
  const ParamVector x = vec({0.5, -2.0});
  const auto plain = evaluate_objectives(tb.model, x, tb.clients, tb.server, 0.0);
  CHECK(plain.Ftilde == plain.F);
  CHECK(plain.grad_Ftilde == plain.grad_F);
  const auto mixed = evaluate_objectives(tb.model, x, tb.clients, tb.server, 2.0);
  CHECK(mixed.Ftilde == doctest::Approx((mixed.F + 2.0 * mixed.f0) / 3.0));
  CHECK((mixed.grad_Ftilde - (mixed.grad_F + 2.0 * mixed.grad_f0) / 3.0).norm() < 1e-15);
  const auto no_server =
      evaluate_objectives(tb.model, x, tb.clients, LabeledDataset::empty_like(1, 5), 0.0);
  CHECK(std::isnan(no_server.xi_sq));
}

TEST_CASE("client drift vanishes with one local step or a zero local rate") {
  const auto tb = cross_testbed(vec({0.0, 0.0}));
  FederationConfig cfg = testbed_config(0.05, 1.0);
  cfg.local_steps = 1;
  const ParamVector x = vec({3.0, -1.0});
  CHECK(drift_terms(fsl_round(x, tb.clients, tb.server, cfg, tb.model, {0, 0}).result).client == 0.0);
  cfg.local_steps = 5;
  cfg.lr_local = 0.0;
  CHECK(drift_terms(fsl_round(x, tb.clients, tb.server, cfg, tb.model, {0, 0}).result).client == 0.0);
}

TEST_CASE("drift terms match a hand computation") {
  // One client at c1 = 0, x = 1, lr 0.5: iterates 1, 0.5 -> E^c = (0 + 0.25) / 2.
  const auto tb = quad_testbed(vec({0.0}), {vec({0.0})});
  FederationConfig cfg;
  cfg.local_steps = 2;
  cfg.server_steps = 2;
  cfg.lr_local = 0.5;
  cfg.lr_global = 1.0;
  cfg.lr_server = 0.5;
  cfg.gamma = 1.0;
  const auto out = fsl_round(vec({1.0}), tb.clients, tb.server, cfg, tb.model, {0, 0});
  const DriftTerms d = drift_terms(out.result);
  CHECK(d.client == doctest::Approx(0.125));
  // x_bar = 0.25, server iterates 0.25, 0.125 -> E^0 = (0.5625 + 0.765625) / 2.
  CHECK(d.server == doctest::Approx((0.5625 + 0.765625) / 2.0));
  RoundResult missing;
  CHECK_THROWS_AS(drift_terms(missing), std::logic_error);
}

TEST_CASE("drift bounds hold at every round of the noiseless testbed") {
  for (const ParamVector& c0 : {vec({0.0, 0.0}), vec({0.5, 0.0})}) {
    const auto tb = cross_testbed(c0);
    const FederationConfig cfg = testbed_config(0.003125, 1.0);
    const Federation fed{tb.clients, tb.server, LabeledDataset::empty_like(1, 5)};
    RunOptions opts;
    opts.initial_params = vec({5.0, 5.0});
    const auto out = run(cfg, fed, tb.model, opts);
    const TheoryConstants tc = testbed_constants(cfg, c0);
    for (const auto& row : out.trace) {
      const DriftBoundCheck check = check_drift_bounds(row, tc);
      CHECK(check.client_premise);
      CHECK(check.server_premise);
      CHECK(check.client_ok);
      CHECK(check.server_ok);
      CHECK_FALSE(row.client_drift_is_estimate);
    }
  }
}

TEST_CASE("testbed dissimilarities stay constant along a run") {
  const auto tb = cross_testbed(vec({0.5, 0.0}));
  const FederationConfig cfg = testbed_config(0.01, 1.0);
  const Federation fed{tb.clients, tb.server, LabeledDataset::empty_like(1, 5)};
  RunOptions opts;
  opts.initial_params = vec({5.0, 5.0});
  for (const auto& row : run(cfg, fed, tb.model, opts).trace) {
    CHECK(std::abs(row.G_sq - 1.0) <= 1e-12);
    CHECK(std::abs(row.xi_sq - 0.25) <= 1e-12);
  }
}

TEST_CASE("rolling accuracy") {
  const std::vector<double> s{0, 1, 1, 1};
  CHECK(rolling_accuracy(s, 2) == std::vector<double>{0, 0.5, 1, 1});
  CHECK(rolling_accuracy(s, 1) == s);
  const std::vector<double> constant(7, 0.625);
  CHECK(rolling_accuracy(constant, 3) == constant);
  const std::vector<double> noisy{0.2, 0.9, 0.4, 0.7, 0.1};
  CHECK(rolling_accuracy(rolling_accuracy(noisy, 1), 1) == rolling_accuracy(noisy, 1));
  CHECK_THROWS(rolling_accuracy(s, 0));
}

TEST_CASE("rise time") {
  CHECK(rise_time(std::vector<double>{0.4, 0.4, 0.4}) == 0);
  CHECK(rise_time(std::vector<double>{0.1, 0.5, 0.89, 0.95, 1.0}) == 3);
  CHECK(rise_time(std::vector<double>{0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) == 5);
  CHECK(rise_time(std::vector<double>{0.0, 0.3, 0.6, 0.85, 0.95}) == 4);
  CHECK_FALSE(rise_time(std::vector<double>{}).has_value());
}

TEST_CASE("trace CSV: fixed header, 17 significant digits, round trip") {
  RoundTrace row;
  row.round = 3;
  row.train_loss = 0.1;
  row.test_acc = 2.0 / 3.0;
  row.rolling_acc = std::numeric_limits<double>::quiet_NaN();
  row.Ftilde = -1e-300;
  const auto path = std::filesystem::temp_directory_path() / "fsl_trace_roundtrip.csv";
  write_trace_csv(path, std::vector<RoundTrace>{row});
  std::ifstream in(path);
  std::string header;
  std::string line;
  std::getline(in, header);
  std::getline(in, line);
  CHECK(header == kTraceCsvHeader);
  CHECK(line.rfind("3,0.10000000000000001,0.66666666666666663,nan,", 0) == 0);
  const auto back = read_trace_csv(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].test_acc == row.test_acc);
  CHECK(back[0].Ftilde == row.Ftilde);
  CHECK(std::isnan(back[0].rolling_acc));
  std::filesystem::remove(path);
}
