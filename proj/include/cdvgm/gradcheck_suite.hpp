#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace cdvgm::suite {

enum class Scale { op, block, model };

Scale parse_scale(const std::string& s);
std::string to_string(Scale s);

inline constexpr double kGradTolerance = 1e-4;

struct ComponentReport {
  std::string component;
  double max_rel_error = 0.0;
  std::size_t points = 0;  // random draws checked
  double analytic = 0.0;   // at the worst coordinate
  double numeric = 0.0;
  bool passed() const { return max_rel_error < kGradTolerance; }
};

// Central-difference checks of every backward rule at the requested
// granularity:
//   op     each primitive at several random points;
//   block  feature transform, CST block, fusion layer and the Laplacian chain
//          w.r.t. inputs and every parameter;
//   model  the end-to-end model (N=3, T=4, B=1) w.r.t. the input and each
//          named parameter.
std::vector<ComponentReport> run_gradcheck(Scale scale, std::uint64_t seed = 1, double eps = 1e-5);

}  // namespace cdvgm::suite
