#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace fsl {

/// Flat model-parameter vector. The dimension is fixed for an experiment and
/// shared by the server and every client.
using ParamVector = Eigen::VectorXd;

/// Raised when a caller breaks a documented precondition (dimension mismatch,
/// out-of-range batch size, infeasible partition, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Throws ContractError naming `what` if any entry is NaN or infinite.
void require_finite(const ParamVector& values, std::string_view what);

/// FNV-1a over the IEEE bit patterns of the entries, with -0.0 folded to +0.0.
std::uint64_t digest(const ParamVector& values);

using Rng = std::mt19937_64;

/// Purpose of a derived random stream. Distinct tags never share state.
enum class StreamTag : std::uint64_t {
  kInit = 1,
  kClientSampling = 2,
  kClientUpdate = 3,
  kServerUpdate = 4,
  kPretrain = 5,
  kPartition = 6,
  kServerData = 7,
  kTrainData = 8,
  kTestData = 9,
};

/// Counter-based split: the stream for (seed, tag, a, b) is a pure function of
/// its key, so per-round and per-client streams can be created in any order.
Rng derive_stream(std::uint64_t seed, StreamTag tag, std::uint64_t a = 0,
                  std::uint64_t b = 0);

/// Uniform integer in [0, n).
std::size_t uniform_index(Rng& rng, std::size_t n);

/// Formats a double with 17 significant digits ("nan" for NaN).
std::string format_double(double value);

}  // namespace fsl
