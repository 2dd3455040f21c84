#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mshift::cli {

enum ExitCode : int {
  exit_ok = 0,
  exit_verification_failed = 1,
  exit_config_error = 2,
  exit_runtime_abort = 3,
};

struct Console {
  std::ostream& out;
  std::ostream& err;
};

struct RunOptions {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;  // overrides output_dir
  std::optional<std::uint64_t> seed;
  std::optional<std::string> ablation;
  std::optional<std::filesystem::path> checkpoint;  // eval only; default output_dir/checkpoint.json
};

int cmd_gen_data(const std::filesystem::path& config, const std::filesystem::path& out,
                 std::optional<std::uint64_t> seed, Console io);
int cmd_train(const RunOptions& options, Console io);
int cmd_eval(const RunOptions& options, Console io);
int cmd_gradcheck(std::optional<std::string> inject_fault, Console io);

/// CSV header of the comparison report.
extern const char* const report_header;

/// Reads <dir>/evalreport.json from each run dir; writes the CSV to `out`
/// when given, else to io.out.
int cmd_report(const std::vector<std::filesystem::path>& run_dirs,
               const std::optional<std::filesystem::path>& out, Console io);

}  // namespace mshift::cli
