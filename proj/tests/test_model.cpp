#include <cmath>

#include "doctest.h"
#include "fsl/data.hpp"
#include "fsl/model.hpp"
#include "testbed.hpp"

using namespace fsl;
using fsl::testing::label_data;
using fsl::testing::vec;

namespace {

LabeledDataset small_blobs(std::uint64_t seed = 3) { return gen_blobs(3, 5, 4, 1.0, seed); }

}  // namespace

TEST_CASE("quadratic loss at the minimizer and at a hand-computed point") {
  const auto data = label_data({0, 0, 0}, 1);
  CHECK(loss(QuadraticConsensus(vec({1, 1})), vec({1, 1}), data) == 0.0);
  CHECK(loss(QuadraticConsensus(vec({0, 0})), vec({3, 4}), data) == doctest::Approx(12.5));
}

TEST_CASE("softmax with zero parameters has loss ln k") {
  const auto data = small_blobs();
  const SoftmaxRegression model{4, 3};
  CHECK(loss(model, ParamVector::Zero(static_cast<Eigen::Index>(param_dim(model))), data) ==
        doctest::Approx(std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("quadratic gradient is x - c") {
  const auto data = label_data({0, 0}, 1);
  const QuadraticConsensus model(vec({0.5, -2.0}));
  const GradEstimate g = full_grad(model, vec({1.5, 1.0}), data);
  CHECK(g.is_exact);
  CHECK((g.grad - vec({1.0, 3.0})).norm() == 0.0);
}

TEST_CASE("per-label quadratic averages the pulls of its labels") {
  const QuadraticConsensus model(std::vector<ParamVector>{vec({1, 0}), vec({-1, 2})});
  const auto data = label_data({0, 1, 1, 1}, 2);
  const ParamVector x = vec({0.25, 0.5});
  const ParamVector mean_center = (vec({1, 0}) + 3.0 * vec({-1, 2})) / 4.0;
  CHECK((full_grad(model, x, data).grad - (x - mean_center)).norm() < 1e-15);
}

TEST_CASE("finite differences agree with analytic gradients") {
  const auto data = small_blobs();
  Rng rng = derive_stream(11, StreamTag::kInit);
  const QuadraticConsensus quad(std::vector<ParamVector>{vec({1, 2, 3}), vec({0, -1, 4}),
                                                         vec({2, 2, -2})});
  const SoftmaxRegression soft{4, 3};
  const Mlp1 mlp{4, 5, 3};
  for (int trial = 0; trial < 10; ++trial) {
    CHECK(finite_diff_check(quad, ParamVector::Random(3) * 5.0, data, 1e-4) <= 1e-10);
    CHECK(finite_diff_check(soft, init_params(soft, rng) * 40.0, data, 1e-4) <= 1e-5);
    CHECK(finite_diff_check(mlp, init_params(mlp, rng) * 40.0, data, 1e-4) <= 1e-5);
  }
}

TEST_CASE("cross-entropy losses are non-negative") {
  const auto data = small_blobs();
  Rng rng = derive_stream(5, StreamTag::kInit);
  for (int trial = 0; trial < 20; ++trial) {
    CHECK(loss(SoftmaxRegression{4, 3}, init_params(SoftmaxRegression{4, 3}, rng) * 100.0, data) >= 0.0);
    CHECK(loss(Mlp1{4, 3, 3}, init_params(Mlp1{4, 3, 3}, rng) * 100.0, data) >= 0.0);
  }
}

TEST_CASE("full-size batch equals the full gradient bit for bit") {
  const auto data = small_blobs();
  const Mlp1 model{4, 6, 3};
  Rng init = derive_stream(2, StreamTag::kInit);
  const ParamVector x = init_params(model, init);
  Rng rng = derive_stream(9, StreamTag::kClientUpdate);
  const GradEstimate g = stochastic_grad(model, x, data, data.size(), rng);
  CHECK(g.grad == full_grad(model, x, data).grad);
}

TEST_CASE("stochastic gradient is unbiased: Monte-Carlo mean inside a 3 sigma band") {
  const QuadraticConsensus model(std::vector<ParamVector>{vec({4, 0}), vec({0, -3}),
                                                          vec({-2, 5}), vec({1, 1})});
  const auto data = label_data({0, 0, 1, 2, 2, 2, 3, 1, 0, 3}, 4);
  const ParamVector x = vec({0.3, -0.7});
  const ParamVector truth = full_grad(model, x, data).grad;
  Rng rng = derive_stream(42, StreamTag::kClientUpdate);
  const int draws = 10000;
  ParamVector sum = ParamVector::Zero(2);
  ParamVector sum_sq = ParamVector::Zero(2);
  for (int i = 0; i < draws; ++i) {
    const ParamVector g = stochastic_grad(model, x, data, 3, rng).grad;
    sum += g;
    sum_sq += g.cwiseProduct(g);
  }
  const ParamVector mean = sum / draws;
  const ParamVector var = sum_sq / draws - mean.cwiseProduct(mean);
  for (Eigen::Index j = 0; j < 2; ++j) {
    CHECK(std::abs(mean[j] - truth[j]) <= 3.0 * std::sqrt(var[j] / draws));
  }
}

TEST_CASE("stochastic gradient is deterministic in its stream") {
  const auto data = small_blobs();
  const SoftmaxRegression model{4, 3};
  const ParamVector x = ParamVector::Constant(static_cast<Eigen::Index>(param_dim(model)), 0.1);
  Rng a = derive_stream(1, StreamTag::kClientUpdate, 2, 3);
  Rng b = derive_stream(1, StreamTag::kClientUpdate, 2, 3);
  const auto ga = stochastic_grad(model, x, data, 4, a);
  const auto gb = stochastic_grad(model, x, data, 4, b);
  CHECK(ga.grad == gb.grad);
  CHECK(ga.batch_indices == gb.batch_indices);
  CHECK_FALSE(ga.is_exact);
}

TEST_CASE("reductions do not depend on sample order") {
  const auto data = small_blobs();
  std::vector<std::size_t> reversed(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) reversed[i] = data.size() - 1 - i;
  const auto shuffled = data.subset(reversed);
  const Mlp1 model{4, 3, 3};
  Rng rng = derive_stream(4, StreamTag::kInit);
  const ParamVector x = init_params(model, rng);
  CHECK(loss(model, x, data) == loss(model, x, shuffled));
  CHECK(full_grad(model, x, data).grad == full_grad(model, x, shuffled).grad);
}

TEST_CASE("accuracy counts argmax hits and is undefined for the quadratic model") {
  Eigen::MatrixXd f(2, 2);
  f << 1, 0, 0, 1;
  const LabeledDataset data(f, {0, 1}, 2);
  // Logits equal the features: perfect prediction.
  const ParamVector identity = vec({1, 0, 0, 1, 0, 0});
  CHECK(accuracy(SoftmaxRegression{2, 2}, identity, data) == 1.0);
  CHECK(accuracy(SoftmaxRegression{2, 2}, -identity, data) == 0.0);
  CHECK(std::isnan(accuracy(QuadraticConsensus(vec({0.0})), vec({0.0}), data)));
}

TEST_CASE("contract violations throw") {
  const auto data = small_blobs();
  const SoftmaxRegression model{4, 3};
  const ParamVector x = ParamVector::Zero(static_cast<Eigen::Index>(param_dim(model)));
  Rng rng = derive_stream(0, StreamTag::kInit);
  CHECK_THROWS_AS(stochastic_grad(model, x, data, 0, rng), ContractError);
  CHECK_THROWS_AS(stochastic_grad(model, x, data, data.size() + 1, rng), ContractError);
  CHECK_THROWS_AS(loss(model, ParamVector::Zero(3), data), ContractError);
  CHECK_THROWS_AS(loss(SoftmaxRegression{5, 3}, ParamVector::Zero(18), data), ContractError);
  CHECK_THROWS_AS(loss(model, x, LabeledDataset::empty_like(4, 3)), ContractError);
  CHECK_THROWS_AS(LabeledDataset(Eigen::MatrixXd::Zero(1, 2), {0, 3}, 2), ContractError);
}

TEST_CASE("parameter counts") {
  CHECK(param_dim(SoftmaxRegression{10, 5}) == 55);
  CHECK(param_dim(Mlp1{10, 8, 5}) == 8 * 10 + 8 + 5 * 8 + 5);
  CHECK(param_dim(QuadraticConsensus(vec({1, 2, 3}))) == 3);
}
