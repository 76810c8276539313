#include "fsl/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>

namespace fsl {
namespace {

// Splits `total` over `weights` by largest remainder; ties go to lower index.
std::vector<std::size_t> apportion(std::size_t total,
                                   const std::vector<std::size_t>& weights) {
  const std::size_t weight_sum = std::accumulate(weights.begin(), weights.end(), std::size_t{0});
  std::vector<std::size_t> quota(weights.size(), 0);
  if (weight_sum == 0) return quota;
  std::vector<std::pair<std::size_t, std::size_t>> remainders;  // (remainder, index)
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < weights.size(); ++c) {
    const std::size_t scaled = total * weights[c];
    quota[c] = scaled / weight_sum;
    assigned += quota[c];
    remainders.emplace_back(scaled % weight_sum, c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < total; ++r, ++assigned) ++quota[remainders[r].second];
  return quota;
}

std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& data) {
  std::vector<std::vector<std::size_t>> pools(static_cast<std::size_t>(data.num_classes()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    pools[static_cast<std::size_t>(data.label(i))].push_back(i);
  }
  return pools;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

LabeledDataset sample_blobs(const Eigen::MatrixXd& means,
                            const std::vector<std::size_t>& per_class, double spread,
                            int num_classes, Rng& rng) {
  const std::size_t total = std::accumulate(per_class.begin(), per_class.end(), std::size_t{0});
  Eigen::MatrixXd features(means.rows(), static_cast<Eigen::Index>(total));
  std::vector<int> labels;
  labels.reserve(total);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t rounds = *std::max_element(per_class.begin(), per_class.end());
  // Interleave classes so prefixes of the dataset stay roughly balanced.
  for (std::size_t r = 0; r < rounds; ++r) {
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      if (r >= per_class[c]) continue;
      auto col = features.col(static_cast<Eigen::Index>(labels.size()));
      for (Eigen::Index j = 0; j < means.rows(); ++j) {
        col[j] = means(j, static_cast<Eigen::Index>(c)) + spread * noise(rng);
      }
      labels.push_back(static_cast<int>(c));
    }
  }
  return LabeledDataset(std::move(features), std::move(labels), num_classes);
}

}  // namespace

Eigen::MatrixXd blob_means(int num_classes, int dim) {
  if (num_classes <= 0 || dim <= 0) throw ContractError("blob layout needs positive sizes");
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(dim, num_classes);
  if (dim >= num_classes) {
    for (int c = 0; c < num_classes; ++c) means(c, c) = 1.0;
  } else if (dim >= 2) {
    for (int c = 0; c < num_classes; ++c) {
      const double angle = 2.0 * std::numbers::pi * c / num_classes;
      means(0, c) = std::cos(angle);
      means(1, c) = std::sin(angle);
    }
  } else {
    for (int c = 0; c < num_classes; ++c) {
      means(0, c) = num_classes == 1 ? 0.0 : -1.0 + 2.0 * c / (num_classes - 1);
    }
  }
  return means;
}

LabeledDataset gen_blobs(const BlobSpec& spec) {
  if (spec.num_classes <= 0 || spec.per_class <= 0 || spec.dim <= 0) {
    throw ContractError("gen_blobs: counts must be positive");
  }
  if (!(spec.spread >= 0.0)) throw ContractError("gen_blobs: spread must be >= 0");
  Rng rng = derive_stream(spec.seed, StreamTag::kTrainData);
  const std::vector<std::size_t> per_class(static_cast<std::size_t>(spec.num_classes),
                                           static_cast<std::size_t>(spec.per_class));
  return sample_blobs(spec.separation * blob_means(spec.num_classes, spec.dim), per_class, spec.spread,
                      spec.num_classes, rng);
}

LabeledDataset gen_blobs(int num_classes, int per_class, int dim, double spread,
                         std::uint64_t seed) {
  return gen_blobs(BlobSpec{num_classes, per_class, dim, spread, seed});
}

std::vector<int> client_classes(int client, int classes_per_client, int num_classes) {
  std::vector<int> classes;
  for (int j = 0; j < classes_per_client; ++j) {
    classes.push_back((client * classes_per_client + j) % num_classes);
  }
  return classes;
}

std::vector<std::vector<std::size_t>> partition_indices(const LabeledDataset& data,
                                                        const PartitionSpec& spec) {
  const std::size_t n = data.size();
  const int k = data.num_classes();
  if (spec.num_clients < 1) throw ContractError("partition: N must be >= 1");
  if (spec.classes_per_client < 1 || spec.classes_per_client > k) {
    throw ContractError("partition: C must lie in [1, " + std::to_string(k) + "]");
  }
  const auto clients = static_cast<std::size_t>(spec.num_clients);
  const auto per_client_classes = static_cast<std::size_t>(spec.classes_per_client);
  if (n == 0 || n % clients != 0) {
    throw ContractError("partition: N=" + std::to_string(clients) +
                        " does not divide n=" + std::to_string(n));
  }
  const std::size_t n_i = n / clients;
  if (n_i % per_client_classes != 0) {
    throw ContractError("partition: C=" + std::to_string(per_client_classes) +
                        " does not divide n_i=" + std::to_string(n_i));
  }
  const std::size_t per_class = n_i / per_client_classes;

  Rng rng = derive_stream(spec.seed, StreamTag::kPartition);
  auto pools = indices_by_class(data);
  for (auto& pool : pools) shuffle(pool, rng);
  std::vector<std::size_t> cursor(pools.size(), 0);

  std::vector<std::vector<std::size_t>> out(clients);
  for (std::size_t i = 0; i < clients; ++i) {
    for (int c : client_classes(static_cast<int>(i), spec.classes_per_client, k)) {
      const auto cls = static_cast<std::size_t>(c);
      if (cursor[cls] + per_class > pools[cls].size()) {
        throw ContractError("partition: class " + std::to_string(c) + " has " +
                            std::to_string(pools[cls].size()) +
                            " samples, not enough for its assigned clients");
      }
      for (std::size_t j = 0; j < per_class; ++j) out[i].push_back(pools[cls][cursor[cls]++]);
    }
  }
  return out;
}

std::vector<LabeledDataset> partition_by_class(const LabeledDataset& data,
                                               const PartitionSpec& spec) {
  std::vector<LabeledDataset> clients;
  for (const auto& idx : partition_indices(data, spec)) clients.push_back(data.subset(idx));
  return clients;
}

LabeledDataset build_server_data(const LabeledDataset& data,
                                 std::span<const LabeledDataset> clients,
                                 const ServerDataSpec& spec, std::uint64_t seed) {
  Rng rng = derive_stream(seed, StreamTag::kServerData);
  if (const auto* iid = std::get_if<IidSubsample>(&spec)) {
    if (iid->n0 < 1 || iid->n0 > data.size()) {
      throw ContractError("server data: n0=" + std::to_string(iid->n0) + " outside [1, " +
                          std::to_string(data.size()) + "]");
    }
    auto pools = indices_by_class(data);
    const auto quota = apportion(iid->n0, data.count_per_class());
    std::vector<std::size_t> chosen;
    for (std::size_t c = 0; c < pools.size(); ++c) {
      for (std::size_t j : draw_without_replacement(pools[c].size(), quota[c], rng)) {
        chosen.push_back(pools[c][j]);
      }
    }
    return data.subset(chosen);
  }
  if (const auto* from = std::get_if<FromClients>(&spec)) {
    if (from->clients < 1 || static_cast<std::size_t>(from->clients) > clients.size()) {
      throw ContractError("server data: cannot draw from " + std::to_string(from->clients) +
                          " of " + std::to_string(clients.size()) + " clients");
    }
    const auto picked = draw_without_replacement(
        clients.size(), static_cast<std::size_t>(from->clients), rng);
    std::optional<LabeledDataset> out;
    for (std::size_t id : picked) {
      const LabeledDataset& client = clients[id];
      if (from->per_client > client.size()) {
        throw ContractError("server data: client " + std::to_string(id) + " holds only " +
                            std::to_string(client.size()) + " samples");
      }
      LabeledDataset part =
          client.subset(draw_without_replacement(client.size(), from->per_client, rng));
      out = out ? LabeledDataset::concat(*out, part) : std::move(part);
    }
    return *out;
  }
  const auto& shifted = std::get<Shifted>(spec);
  const BlobSpec& gen = shifted.generator;
  if (gen.num_classes <= 0 || gen.dim <= 0) throw ContractError("server data: bad generator");
  std::vector<std::size_t> active(static_cast<std::size_t>(gen.num_classes), 1);
  if (shifted.dropped_class) {
    if (*shifted.dropped_class < 0 || *shifted.dropped_class >= gen.num_classes) {
      throw ContractError("server data: dropped class out of range");
    }
    active[static_cast<std::size_t>(*shifted.dropped_class)] = 0;
  }
  if (shifted.n0 < 1) throw ContractError("server data: n0 must be positive");
  Eigen::MatrixXd means = gen.separation * blob_means(gen.num_classes, gen.dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index c = 0; c < means.cols(); ++c) {
    Eigen::VectorXd direction(means.rows());
    for (Eigen::Index j = 0; j < direction.size(); ++j) direction[j] = normal(rng);
    means.col(c) += shifted.shift * direction.normalized();
  }
  return sample_blobs(means, apportion(shifted.n0, active), gen.spread, gen.num_classes, rng);
}

double population_grad_variance(const LabeledDataset& data, const LossModel& model,
                                const ParamVector& x) {
  const ParamVector mean = full_grad(model, x, data).grad;
  double total = 0.0;
  for (std::size_t i : data.canonical_order()) {
    total += (sample_grad(model, x, data, i) - mean).squaredNorm();
  }
  return total / static_cast<double>(data.size());
}

double subsample_variance_expected(const LabeledDataset& data, const LossModel& model,
                                   const ParamVector& x, std::size_t n0) {
  const std::size_t n = data.size();
  if (n < 2) throw ContractError("subsample variance needs n >= 2");
  if (n0 < 1 || n0 > n) {
    throw ContractError("n0=" + std::to_string(n0) + " outside [1, " + std::to_string(n) + "]");
  }
  const double ratio = static_cast<double>(n) / static_cast<double>(n0) - 1.0;
  return ratio * population_grad_variance(data, model, x) / static_cast<double>(n - 1);
}

LabeledDataset read_csv(const std::filesystem::path& path, std::optional<int> num_classes) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": missing header");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header.front() != "label") {
    throw std::runtime_error(path.string() + ": header must be label,f0,f1,...");
  }
  const std::size_t dim = header.size() - 1;
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t column = 0;
    while (std::getline(ss, cell, ',')) {
      const char* first = cell.data();
      const char* last = cell.data() + cell.size();
      if (column == 0) {
        int label = -1;
        auto [ptr, ec] = std::from_chars(first, last, label);
        if (ec != std::errc() || ptr != last || label < 0) {
          throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                   ": label must be a non-negative integer");
        }
        labels.push_back(label);
      } else {
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(first, last, v);
        if (ec != std::errc() || ptr != last) {
          throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                   ": bad feature value '" + cell + "'");
        }
        values.push_back(v);
      }
      ++column;
    }
    if (column != dim + 1) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected " +
                               std::to_string(dim + 1) + " columns");
    }
  }
  const int max_label = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
  Eigen::MatrixXd features = Eigen::Map<Eigen::MatrixXd>(
      values.data(), static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(labels.size()));
  return LabeledDataset(std::move(features), std::move(labels),
                        num_classes.value_or(max_label + 1));
}

void write_csv(const std::filesystem::path& path, const LabeledDataset& data) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "label";
  for (int j = 0; j < data.dim(); ++j) out << ",f" << j;
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.label(i);
    for (int j = 0; j < data.dim(); ++j) out << ',' << format_double(data.feature(i)[j]);
    out << '\n';
  }
}

}  // namespace fsl
