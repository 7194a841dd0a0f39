// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>

#include "voxformer/data.hpp"

namespace voxformer::app {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDataError = 3,
  kVerifyFailed = 4,
};

/// "32", "32,40,36" or "169x208x179".
VolumeExtents parse_extents(std::string_view text);

/// --seed when given, else VOXFORMER_SEED, else 0.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag);

/// Entry point of the `voxformer` tool; never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace voxformer::app
