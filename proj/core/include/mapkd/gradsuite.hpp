#pragma once

// Finite-difference checks of every primitive, loss and decoder output on
// random inputs.

#include <cstdint>
#include <string>
#include <vector>

namespace mapkd {

struct GradcheckRow {
  std::string module;
  std::string name;
  int trials = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass() const { return max_rel_error <= tolerance; }
};

// module: "diffcore", "nets", "losses" or "all". Primitives are held to
// 1e-6, losses and decoder outputs to 1e-4.
std::vector<GradcheckRow> run_gradcheck_suite(const std::string& module, int trials, std::uint64_t seed);

std::string format_gradcheck_table(const std::vector<GradcheckRow>& rows);

}  // namespace mapkd
