#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "fsl/dataset.hpp"
#include "fsl/model.hpp"

namespace fsl {

/// Gaussian class blobs. Class means sit on a fixed layout that depends only on
/// (num_classes, dim): unit basis vectors when dim >= num_classes, otherwise a
/// unit circle in the first two coordinates. Means are scaled by `separation`
/// and samples add isotropic noise of standard deviation `spread`.
struct BlobSpec {
  int num_classes = 0;
  int per_class = 0;
  int dim = 0;
  double spread = 1.0;
  std::uint64_t seed = 0;
  double separation = 1.0;
};

/// Column c holds the mean of class c.
Eigen::MatrixXd blob_means(int num_classes, int dim);

LabeledDataset gen_blobs(const BlobSpec& spec);
LabeledDataset gen_blobs(int num_classes, int per_class, int dim, double spread,
                         std::uint64_t seed);

struct PartitionSpec {
  int num_clients = 1;
  int classes_per_client = 1;
  std::uint64_t seed = 0;
};

/// Classes held by client `client`: {(client * C + j) mod num_classes : j < C}.
std::vector<int> client_classes(int client, int classes_per_client, int num_classes);

/// Indices into `data` for each client. Each client receives n/N samples,
/// n/(N*C) from each of its classes, drawn without replacement from a per-class
/// pool shared by all clients.
std::vector<std::vector<std::size_t>> partition_indices(const LabeledDataset& data,
                                                        const PartitionSpec& spec);

std::vector<LabeledDataset> partition_by_class(const LabeledDataset& data,
                                               const PartitionSpec& spec);

/// n0 samples stratified by class frequency, without replacement.
struct IidSubsample {
  std::size_t n0 = 0;
};

/// `per_client` samples from each of `clients` distinct clients.
struct FromClients {
  int clients = 0;
  std::size_t per_client = 0;
};

/// Fresh blobs from `generator` with every class mean moved by `shift` along a
/// seed-dependent unit direction; `dropped_class` is left out entirely.
struct Shifted {
  BlobSpec generator;
  std::size_t n0 = 0;
  double shift = 0.0;
  std::optional<int> dropped_class;
};

using ServerDataSpec = std::variant<IidSubsample, FromClients, Shifted>;

LabeledDataset build_server_data(const LabeledDataset& data,
                                 std::span<const LabeledDataset> clients,
                                 const ServerDataSpec& spec, std::uint64_t seed);

/// Population variance (1/n) sum ||grad l(x, s) - grad F(x)||^2 over `data`.
double population_grad_variance(const LabeledDataset& data, const LossModel& model,
                                const ParamVector& x);

/// Expected ||grad f0(x) - grad F(x)||^2 when the server holds n0 samples drawn
/// uniformly without replacement from `data`: (n/n0 - 1) * var / (n - 1).
double subsample_variance_expected(const LabeledDataset& data, const LossModel& model,
                                   const ParamVector& x, std::size_t n0);

/// CSV with header `label,f0,f1,...`. When num_classes is not given it is
/// one more than the largest label.
LabeledDataset read_csv(const std::filesystem::path& path,
                        std::optional<int> num_classes = std::nullopt);
void write_csv(const std::filesystem::path& path, const LabeledDataset& data);

}  // namespace fsl
