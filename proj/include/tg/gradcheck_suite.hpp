#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace tg {

struct GradcheckCase {
  std::string name;
  /// Returns the max relative error for the given seed.
  std::function<double(std::uint64_t seed)> run;
  double threshold = 1e-4;
};

struct GradcheckOutcome {
  std::string name;
  double max_error = 0.0;
  double threshold = 0.0;
  bool passed = false;
  std::string error;  // set when the case threw
};

/// Every differentiable op plus both models in micro configurations.
const std::vector<GradcheckCase>& gradcheck_cases();

/// Runs the cases whose names match the shell-style glob and prints a table
/// ("0 ops" when nothing matches).
std::vector<GradcheckOutcome> run_gradcheck_suite(const std::string& glob, std::uint64_t seed,
                                                  std::ostream* table = nullptr);

bool glob_match(const std::string& pattern, const std::string& name);

}  // namespace tg
