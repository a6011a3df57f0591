#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "cdvgm/tensor.hpp"

namespace cdvgm {

// Seeded generator with portable uniform/normal draws (no reliance on the
// implementation-defined std distributions).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller; always consumes two draws.
  double normal();
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  Tensor uniform_tensor(Shape shape, double lo, double hi, bool requires_grad = false);
  Tensor normal_tensor(Shape shape, double stddev, bool requires_grad = false);

  std::string state() const;
  void set_state(const std::string& text);

 private:
  std::mt19937_64 engine_;
};

// Independent stream derived from (seed, name); adding a new named consumer
// never perturbs the draws of existing ones.
Rng rng_stream(std::uint64_t seed, std::string_view name);

}  // namespace cdvgm
