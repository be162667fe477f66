#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace npx {

struct CommandResult {
  int exit_code = 0;  // 0 success, 1 validation/usage, 2 runtime
  std::vector<std::filesystem::path> artifacts_written;
  std::string summary;
};

/// Runs one subcommand: synth, train-gan, denoise, train-siamese,
/// eval-oneshot, metrics, report. args excludes the program name. Errors are
/// reported through the exit code and the summary, never thrown.
CommandResult cmd_dispatch(const std::vector<std::string>& args);

/// Seed from the flag, else NPX_SEED, else 0.
std::uint64_t resolve_seed(const std::string& flag_value);

}  // namespace npx
