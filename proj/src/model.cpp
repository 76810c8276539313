#include "fsl/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fsl {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

// Loss of one sample; adds its gradient into `grad` when non-null.
double quadratic_sample(const QuadraticConsensus& m, const ParamVector& x, int label,
                        ParamVector* grad) {
  const ParamVector& c = m.center_for(label);
  const ParamVector diff = x - c;
  if (grad != nullptr) *grad += diff;
  return 0.5 * diff.squaredNorm();
}

// Softmax cross-entropy on logits z for class y; writes dL/dz into z.
double softmax_xent_inplace(Eigen::VectorXd& z, int y) {
  const double zmax = z.maxCoeff();
  const double zy = z[y];
  z = (z.array() - zmax).exp();
  const double total = z.sum();
  z /= total;
  z[y] -= 1.0;
  return zmax + std::log(total) - zy;
}

double softmax_sample(const SoftmaxRegression& m, const ParamVector& params,
                      const Eigen::Ref<const Eigen::VectorXd>& x, int y,
                      ParamVector* grad) {
  const Eigen::Index k = m.num_classes;
  const Eigen::Index p = m.input_dim;
  Eigen::Map<const RowMajor> w(params.data(), k, p);
  Eigen::VectorXd z = w * x + params.segment(k * p, k);
  const double value = softmax_xent_inplace(z, y);
  if (grad != nullptr) {
    Eigen::Map<RowMajor> gw(grad->data(), k, p);
    gw.noalias() += z * x.transpose();
    grad->segment(k * p, k) += z;
  }
  return value;
}

double mlp_sample(const Mlp1& m, const ParamVector& params,
                  const Eigen::Ref<const Eigen::VectorXd>& x, int y, ParamVector* grad) {
  const Eigen::Index p = m.input_dim;
  const Eigen::Index h = m.hidden;
  const Eigen::Index k = m.num_classes;
  const Eigen::Index off_b1 = h * p;
  const Eigen::Index off_w2 = off_b1 + h;
  const Eigen::Index off_b2 = off_w2 + k * h;
  Eigen::Map<const RowMajor> w1(params.data(), h, p);
  Eigen::Map<const RowMajor> w2(params.data() + off_w2, k, h);
  const Eigen::VectorXd a = (w1 * x + params.segment(off_b1, h)).array().tanh().matrix();
  Eigen::VectorXd z = w2 * a + params.segment(off_b2, k);
  const double value = softmax_xent_inplace(z, y);
  if (grad != nullptr) {
    const Eigen::VectorXd delta_hidden =
        ((w2.transpose() * z).array() * (1.0 - a.array().square())).matrix();
    Eigen::Map<RowMajor> gw1(grad->data(), h, p);
    Eigen::Map<RowMajor> gw2(grad->data() + off_w2, k, h);
    gw1.noalias() += delta_hidden * x.transpose();
    grad->segment(off_b1, h) += delta_hidden;
    gw2.noalias() += z * a.transpose();
    grad->segment(off_b2, k) += z;
  }
  return value;
}

double sample_loss(const LossModel& model, const ParamVector& params,
                   const LabeledDataset& data, std::size_t i, ParamVector* grad) {
  return std::visit(
      Overloaded{
          [&](const QuadraticConsensus& m) {
            return quadratic_sample(m, params, data.label(i), grad);
          },
          [&](const SoftmaxRegression& m) {
            return softmax_sample(m, params, data.feature(i), data.label(i), grad);
          },
          [&](const Mlp1& m) {
            return mlp_sample(m, params, data.feature(i), data.label(i), grad);
          }},
      model);
}

void check_inputs(const LossModel& model, const ParamVector& params,
                  const LabeledDataset& data) {
  if (static_cast<std::size_t>(params.size()) != param_dim(model)) {
    throw ContractError("parameter length " + std::to_string(params.size()) +
                        " does not match model dimension " +
                        std::to_string(param_dim(model)));
  }
  if (data.empty()) throw ContractError("dataset is empty");
  const bool features_used = !std::holds_alternative<QuadraticConsensus>(model);
  if (features_used) {
    const int expected = std::visit(
        Overloaded{[](const QuadraticConsensus&) { return 0; },
                   [](const SoftmaxRegression& m) { return m.input_dim; },
                   [](const Mlp1& m) { return m.input_dim; }},
        model);
    if (data.dim() != expected) {
      throw ContractError("feature dimension " + std::to_string(data.dim()) +
                          " does not match model input " + std::to_string(expected));
    }
  }
  if (const auto* q = std::get_if<QuadraticConsensus>(&model);
      q != nullptr && q->centers.size() > 1 &&
      q->centers.size() < static_cast<std::size_t>(data.num_classes())) {
    throw ContractError("quadratic model has fewer centers than the dataset has classes");
  }
}

// Sums loss (and gradient) over `indices`, visited in canonical order so the
// result is independent of how the indices or the dataset were ordered.
double reduce(const LossModel& model, const ParamVector& params,
              const LabeledDataset& data, std::vector<std::size_t> indices,
              ParamVector* grad) {
  std::sort(indices.begin(), indices.end(), [&](std::size_t a, std::size_t b) {
    return data.canonical_rank(a) < data.canonical_rank(b);
  });
  if (grad != nullptr) grad->setZero(params.size());
  double total = 0.0;
  for (std::size_t i : indices) total += sample_loss(model, params, data, i, grad);
  const double scale = 1.0 / static_cast<double>(indices.size());
  if (grad != nullptr) *grad *= scale;
  return total * scale;
}

std::vector<std::size_t> all_indices(const LabeledDataset& data) {
  return data.canonical_order();
}

}  // namespace

const ParamVector& QuadraticConsensus::center_for(int label) const {
  if (centers.empty()) throw ContractError("quadratic model has no centers");
  if (centers.size() == 1) return centers.front();
  if (label < 0 || static_cast<std::size_t>(label) >= centers.size()) {
    throw ContractError("no quadratic center for label " + std::to_string(label));
  }
  return centers[static_cast<std::size_t>(label)];
}

std::size_t param_dim(const LossModel& model) {
  return std::visit(
      Overloaded{
          [](const QuadraticConsensus& m) {
            return static_cast<std::size_t>(m.centers.empty() ? 0 : m.centers.front().size());
          },
          [](const SoftmaxRegression& m) {
            return static_cast<std::size_t>(m.num_classes) * (m.input_dim + 1);
          },
          [](const Mlp1& m) {
            return static_cast<std::size_t>(m.hidden) * (m.input_dim + 1) +
                   static_cast<std::size_t>(m.num_classes) * (m.hidden + 1);
          }},
      model);
}

std::string kind_name(const LossModel& model) {
  return std::visit(Overloaded{[](const QuadraticConsensus&) { return "quadratic"; },
                               [](const SoftmaxRegression&) { return "softmax"; },
                               [](const Mlp1&) { return "mlp"; }},
                    model);
}

bool is_classifier(const LossModel& model) {
  return !std::holds_alternative<QuadraticConsensus>(model);
}

ParamVector init_params(const LossModel& model, Rng& rng) {
  std::uniform_real_distribution<double> dist(-0.05, 0.05);
  ParamVector params(static_cast<Eigen::Index>(param_dim(model)));
  for (Eigen::Index i = 0; i < params.size(); ++i) params[i] = dist(rng);
  return params;
}

double loss(const LossModel& model, const ParamVector& params,
            const LabeledDataset& data) {
  check_inputs(model, params, data);
  return reduce(model, params, data, all_indices(data), nullptr);
}

GradEstimate full_grad(const LossModel& model, const ParamVector& params,
                       const LabeledDataset& data) {
  check_inputs(model, params, data);
  GradEstimate out;
  out.batch_indices = all_indices(data);
  reduce(model, params, data, out.batch_indices, &out.grad);
  out.is_exact = true;
  return out;
}

GradEstimate stochastic_grad(const LossModel& model, const ParamVector& params,
                             const LabeledDataset& data, std::size_t batch_size,
                             Rng& rng) {
  check_inputs(model, params, data);
  if (batch_size < 1 || batch_size > data.size()) {
    throw ContractError("batch size " + std::to_string(batch_size) +
                        " outside [1, " + std::to_string(data.size()) + "]");
  }
  GradEstimate out;
  out.batch_indices = draw_without_replacement(data.size(), batch_size, rng);
  reduce(model, params, data, out.batch_indices, &out.grad);
  out.is_exact = batch_size == data.size();
  return out;
}

ParamVector batch_grad(const LossModel& model, const ParamVector& params,
                       const LabeledDataset& data,
                       std::span<const std::size_t> indices) {
  check_inputs(model, params, data);
  if (indices.empty()) throw ContractError("empty batch");
  ParamVector grad;
  reduce(model, params, data, {indices.begin(), indices.end()}, &grad);
  return grad;
}

ParamVector sample_grad(const LossModel& model, const ParamVector& params,
                        const LabeledDataset& data, std::size_t index) {
  check_inputs(model, params, data);
  ParamVector grad = ParamVector::Zero(params.size());
  sample_loss(model, params, data, index, &grad);
  return grad;
}

double finite_diff_check(const LossModel& model, const ParamVector& params,
                         const LabeledDataset& data, double h) {
  if (!(h > 0.0)) throw ContractError("finite-difference step must be positive");
  const ParamVector analytic = full_grad(model, params, data).grad;
  ParamVector probe = params;
  double worst = 0.0;
  for (Eigen::Index j = 0; j < params.size(); ++j) {
    probe[j] = params[j] + h;
    const double up = loss(model, probe, data);
    probe[j] = params[j] - h;
    const double down = loss(model, probe, data);
    probe[j] = params[j];
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max({1.0, std::abs(analytic[j]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[j] - numeric) / scale);
  }
  return worst;
}

double accuracy(const LossModel& model, const ParamVector& params,
                const LabeledDataset& data) {
  if (!is_classifier(model)) return std::numeric_limits<double>::quiet_NaN();
  check_inputs(model, params, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Eigen::VectorXd logits = std::visit(
        Overloaded{
            [&](const QuadraticConsensus&) { return Eigen::VectorXd(); },
            [&](const SoftmaxRegression& m) {
              const Eigen::Index k = m.num_classes;
              Eigen::Map<const RowMajor> w(params.data(), k, m.input_dim);
              return Eigen::VectorXd(w * data.feature(i) + params.segment(k * m.input_dim, k));
            },
            [&](const Mlp1& m) {
              const Eigen::Index p = m.input_dim, h = m.hidden, k = m.num_classes;
              Eigen::Map<const RowMajor> w1(params.data(), h, p);
              Eigen::Map<const RowMajor> w2(params.data() + h * p + h, k, h);
              const Eigen::VectorXd a =
                  (w1 * data.feature(i) + params.segment(h * p, h)).array().tanh().matrix();
              return Eigen::VectorXd(w2 * a + params.segment(h * p + h + k * h, k));
            }},
        model);
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    if (best == data.label(i)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t count,
                                                  Rng& rng) {
  if (count > n) throw ContractError("cannot draw more items than available");
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + uniform_index(rng, n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace fsl
