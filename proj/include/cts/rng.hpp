#ifndef CTS_RNG_HPP_
#define CTS_RNG_HPP_

#include <cstdint>
#include <random>

namespace cts {

// Independent random streams of one run. A stream is addressed by
// (run seed, stream id, counter), so e.g. the noise of search step i can be
// regenerated without replaying steps 0..i-1.
enum class Stream : std::uint64_t {
  kInit = 1,
  kTrainBatches = 2,
  kSearchBatches = 3,
  kSearchNoise = 4,
  kAugment = 5,
  kData = 6,
  kRandomPrune = 7,
  kShuffle = 8,
  kOverlayNoise = 9,
  kProbe = 10,
};

std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t counter = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, Stream stream, std::uint64_t counter = 0)
      : engine_(derive_seed(seed, stream, counter)) {}

  // Uniform on the open interval (0, 1) with 53 random bits; exact 0 is
  // rejected and redrawn.
  double uniform_open();
  double normal() { return normal_(engine_); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace cts

#endif  // CTS_RNG_HPP_
