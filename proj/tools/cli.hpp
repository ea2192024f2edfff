#pragma once

// The hyperpan command-line tool as a callable: subcommands synth, degrade,
// train, eval, sharpen and plot. Exit codes: 0 success, 1 runtime error,
// 2 usage error.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "hyperpan/image_pipeline.hpp"

namespace hyperpan::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// A data directory holds one patch per `<stem>_ref.hsi` with siblings
/// `<stem>_lr.hsi` and `<stem>_pan.hsi`; patches are returned in stem order.
struct DataDir {
    std::vector<std::string> stems;
    std::vector<Sample> samples;
};
DataDir load_data_dir(const std::filesystem::path& dir);

}  // namespace hyperpan::cli
