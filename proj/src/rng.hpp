// Seeded random streams.
//
// Every random quantity in the project is drawn from a substream derived from
// one master seed by a fixed counter scheme, so any single network, batch or
// Monte Carlo run is reconstructible in isolation:
//
//   substream(master, purpose, a, b) = mix(mix(mix(master ^ PURPOSE) + a) + b)
//
// where PURPOSE is a fixed 64-bit tag per use (weights of layer l, biases of
// layer l, input batch, teacher, ensemble member, ...) and mix is the
// splitmix64 finalizer. Gaussians come from an explicit Box-Muller transform
// on top of std::mt19937_64 rather than std::normal_distribution, whose
// output sequence is implementation-defined.
#pragma once

#include <cstdint>
#include <cmath>
#include <random>

#include <Eigen/Core>

namespace widefim::rng {

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Fixed purpose tags for substream derivation.
enum class Purpose : std::uint64_t {
  weights = 0x5741ULL,        // per layer
  biases = 0x4241ULL,         // per layer
  batch = 0x5842ULL,
  member = 0x4D45ULL,         // per (grid point, ensemble index)
  teacher = 0x5445ULL,
  bn_montecarlo = 0x4D43ULL,  // per layer
  probe = 0x5052ULL,          // test probes / power iteration start
};

inline std::uint64_t substream(std::uint64_t master, Purpose purpose,
                               std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t s = mix64(master ^ static_cast<std::uint64_t>(purpose));
  s = mix64(s + a);
  return mix64(s + b);
}

// Deterministic standard-normal stream (Box-Muller, pair-cached).
class GaussianStream {
public:
  explicit GaussianStream(std::uint64_t seed) : engine_(seed) {}

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0,1], u2 in [0,1)
    const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  void fill(Eigen::Ref<Eigen::MatrixXd> m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = next();
  }

  std::mt19937_64& engine() { return engine_; }

private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace widefim::rng
