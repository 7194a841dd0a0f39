// SPDX-License-Identifier: Apache-2.0
//
// Self-checks behind `voxformer verify`.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace voxformer::verify {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  /// The measured quantity (max relative error, a count, a max abs diff...).
  double value = 0.0;
  std::string detail;
};

std::vector<std::string_view> suite_names();

/// Throws ConfigError for an unknown suite.
std::vector<CheckResult> run_suite(std::string_view suite, std::uint64_t seed = 0);

/// Per-operator f64 central-difference checks. `model_coords` sampled
/// coordinates per parameter tensor for the end-to-end CVVT-tiny check at
/// 32^3; 0 skips it.
std::vector<CheckResult> gradcheck_suite(std::uint64_t seed, std::size_t model_coords = 2);
std::vector<CheckResult> params_suite();
std::vector<CheckResult> shapes_suite();
std::vector<CheckResult> norms_suite(std::uint64_t seed, int trials = 100);

std::string to_json(const CheckResult& result);

}  // namespace voxformer::verify
