#include "fsl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fsl/common.hpp"

namespace fsl {

LabeledDataset::LabeledDataset(Eigen::MatrixXd features, std::vector<int> labels,
                               int num_classes)
    : features_(std::move(features)),
      labels_(std::move(labels)),
      num_classes_(num_classes) {
  if (num_classes_ <= 0) throw ContractError("num_classes must be positive");
  if (static_cast<std::size_t>(features_.cols()) != labels_.size()) {
    throw ContractError("feature count does not match label count");
  }
  for (int label : labels_) {
    if (label < 0 || label >= num_classes_) {
      throw ContractError("label " + std::to_string(label) +
                          " outside [0, " + std::to_string(num_classes_) + ")");
    }
  }
  if (!features_.allFinite()) throw ContractError("non-finite feature value");
  build_order();
}

LabeledDataset LabeledDataset::empty_like(int dim, int num_classes) {
  return LabeledDataset(Eigen::MatrixXd(dim, 0), {}, num_classes);
}

void LabeledDataset::build_order() {
  order_.resize(labels_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::stable_sort(order_.begin(), order_.end(), [this](std::size_t a, std::size_t b) {
    if (labels_[a] != labels_[b]) return labels_[a] < labels_[b];
    for (Eigen::Index r = 0; r < features_.rows(); ++r) {
      const double fa = features_(r, static_cast<Eigen::Index>(a));
      const double fb = features_(r, static_cast<Eigen::Index>(b));
      if (fa != fb) return fa < fb;
    }
    return false;
  });
  rank_.resize(order_.size());
  for (std::size_t pos = 0; pos < order_.size(); ++pos) rank_[order_[pos]] = pos;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  Eigen::MatrixXd features(features_.rows(), static_cast<Eigen::Index>(indices.size()));
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= size()) throw ContractError("subset index out of range");
    features.col(static_cast<Eigen::Index>(j)) = feature(indices[j]);
    labels.push_back(labels_[indices[j]]);
  }
  return LabeledDataset(std::move(features), std::move(labels), num_classes_);
}

std::vector<std::size_t> LabeledDataset::count_per_class() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes_), 0);
  for (int label : labels_) ++counts[static_cast<std::size_t>(label)];
  return counts;
}

LabeledDataset LabeledDataset::concat(const LabeledDataset& a, const LabeledDataset& b) {
  if (a.dim() != b.dim() || a.num_classes() != b.num_classes()) {
    throw ContractError("cannot concatenate datasets of different shape");
  }
  Eigen::MatrixXd features(a.dim(), static_cast<Eigen::Index>(a.size() + b.size()));
  features.leftCols(static_cast<Eigen::Index>(a.size())) = a.features_;
  features.rightCols(static_cast<Eigen::Index>(b.size())) = b.features_;
  std::vector<int> labels = a.labels_;
  labels.insert(labels.end(), b.labels_.begin(), b.labels_.end());
  return LabeledDataset(std::move(features), std::move(labels), a.num_classes_);
}

}  // namespace fsl
