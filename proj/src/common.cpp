#include "fsl/common.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

namespace fsl {

void require_finite(const ParamVector& values, std::string_view what) {
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw ContractError(std::string(what) + ": non-finite entry at index " +
                          std::to_string(i));
    }
  }
}

std::uint64_t digest(const ParamVector& values) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    double v = values[i] == 0.0 ? 0.0 : values[i];
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int byte = 0; byte < 8; ++byte) {
      hash ^= (bits >> (8 * byte)) & 0xffU;
      hash *= 0x100000001b3ULL;
    }
  }
  return hash;
}

Rng derive_stream(std::uint64_t seed, StreamTag tag, std::uint64_t a,
                  std::uint64_t b) {
  const auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v); };
  const auto hi = [](std::uint64_t v) {
    return static_cast<std::uint32_t>(v >> 32);
  };
  const auto t = static_cast<std::uint64_t>(tag);
  std::seed_seq seq{lo(seed), hi(seed), lo(t), hi(t), lo(a), hi(a), lo(b), hi(b)};
  return Rng(seq);
}

std::size_t uniform_index(Rng& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(rng);
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

}  // namespace fsl
