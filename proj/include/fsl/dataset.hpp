#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace fsl {

/// A finite multiset of (feature vector, class label) samples. Clients, the
/// server and the test set all hold one of these.
///
/// Features are stored column-wise (dim x size). Besides the insertion order,
/// the dataset keeps a canonical content order (labels, then features
/// lexicographically) that reductions iterate in, so sums over a dataset do
/// not depend on how its samples were ordered.
class LabeledDataset {
 public:
  LabeledDataset() = default;
  LabeledDataset(Eigen::MatrixXd features, std::vector<int> labels,
                 int num_classes);

  /// An empty dataset that still remembers its shape.
  static LabeledDataset empty_like(int dim, int num_classes);

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  int dim() const { return static_cast<int>(features_.rows()); }
  int num_classes() const { return num_classes_; }

  Eigen::MatrixXd::ConstColXpr feature(std::size_t i) const {
    return features_.col(static_cast<Eigen::Index>(i));
  }
  int label(std::size_t i) const { return labels_[i]; }
  const std::vector<int>& labels() const { return labels_; }
  const Eigen::MatrixXd& features() const { return features_; }

  /// Sample indices in canonical content order.
  const std::vector<std::size_t>& canonical_order() const { return order_; }
  /// Position of sample `i` within canonical_order().
  std::size_t canonical_rank(std::size_t i) const { return rank_[i]; }

  LabeledDataset subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> count_per_class() const;

  /// Multiset union; both operands must share dim and num_classes.
  static LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b);

 private:
  void build_order();

  Eigen::MatrixXd features_;
  std::vector<int> labels_;
  int num_classes_ = 0;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> rank_;
};

}  // namespace fsl
