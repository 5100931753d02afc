#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pcd::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kValidation = 2, kNumeric = 3 };

/// Run record written next to every command's outputs before any work starts.
/// `manifest.json` is never rewritten; completion is recorded separately in
/// `manifest.end.json` (end timestamp and the outputs actually produced).
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config;       // config snapshot (key = value text)
  std::uint64_t seed = 0;
  std::string git_describe;
  std::string started;      // UTC, ISO 8601
  std::vector<std::string> outputs;

  std::string to_json() const;
};

std::string utc_now();
std::string git_describe();

/// Entry point shared by the pcdet tool and the acceptance harness.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace pcd::cli
