#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fsl/common.hpp"
#include "fsl/dataset.hpp"

namespace fsl {

/// Per-sample loss 0.5 * ||x - c(label)||^2. Features are ignored; a sample only
/// selects its center. With a single center every sample shares it, so the
/// empirical loss is 0.5 * ||x - c||^2 for any data. Smoothness constant is 1.
struct QuadraticConsensus {
  std::vector<ParamVector> centers;

  explicit QuadraticConsensus(ParamVector center) : centers{std::move(center)} {}
  explicit QuadraticConsensus(std::vector<ParamVector> per_label)
      : centers(std::move(per_label)) {}

  const ParamVector& center_for(int label) const;
};

/// Multinomial logistic regression. Parameters: weights (classes x input_dim,
/// row-major) followed by the class biases.
struct SoftmaxRegression {
  int input_dim = 0;
  int num_classes = 0;
};

/// One tanh hidden layer followed by a softmax output. Parameters: W1 (hidden x
/// input_dim, row-major), b1, W2 (classes x hidden, row-major), b2.
struct Mlp1 {
  int input_dim = 0;
  int hidden = 0;
  int num_classes = 0;
};

using LossModel = std::variant<QuadraticConsensus, SoftmaxRegression, Mlp1>;

std::size_t param_dim(const LossModel& model);
std::string kind_name(const LossModel& model);
bool is_classifier(const LossModel& model);

/// Deterministic uniform[-0.05, 0.05] initialization.
ParamVector init_params(const LossModel& model, Rng& rng);

struct GradEstimate {
  ParamVector grad;
  std::vector<std::size_t> batch_indices;
  bool is_exact = false;
};

/// Mean per-sample loss over the dataset.
double loss(const LossModel& model, const ParamVector& params,
            const LabeledDataset& data);

/// Exact gradient of loss(); is_exact is set.
GradEstimate full_grad(const LossModel& model, const ParamVector& params,
                       const LabeledDataset& data);

/// Mean gradient over a batch drawn uniformly without replacement. A batch the
/// size of the dataset reproduces full_grad bit for bit.
GradEstimate stochastic_grad(const LossModel& model, const ParamVector& params,
                             const LabeledDataset& data, std::size_t batch_size,
                             Rng& rng);

/// Mean gradient over the given sample indices.
ParamVector batch_grad(const LossModel& model, const ParamVector& params,
                       const LabeledDataset& data,
                       std::span<const std::size_t> indices);

/// Gradient of the loss of a single sample.
ParamVector sample_grad(const LossModel& model, const ParamVector& params,
                        const LabeledDataset& data, std::size_t index);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|,
/// |central difference|).
double finite_diff_check(const LossModel& model, const ParamVector& params,
                         const LabeledDataset& data, double h);

/// Fraction of samples whose arg-max class equals the label. NaN for models
/// that are not classifiers.
double accuracy(const LossModel& model, const ParamVector& params,
                const LabeledDataset& data);

/// `count` distinct indices drawn uniformly from [0, n).
std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t count,
                                                  Rng& rng);

}  // namespace fsl
