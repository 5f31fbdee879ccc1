#pragma once

#include <string>
#include <vector>

#include "compatfam/dataset.hpp"

namespace compatfam {

// Exit codes: 0 ok, 2 io, 3 data, 4 config/model mismatch, 64 usage.
inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitConfig = 4;
inline constexpr int kExitUsage = 64;

/// Entry point shared by the binary and the test suite. `args` excludes the
/// program name.
int run_cli(const std::vector<std::string>& args);

/// Dataset directory access used by the subcommands.
struct LoadedSplit {
    FeatureSet items;
    PairSet pairs;
};
LoadedSplit load_split(const std::string& data_dir, const std::string& split);

}  // namespace compatfam
