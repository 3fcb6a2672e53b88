#pragma once

#include "json.hpp"

namespace deltapress::cli {

// Each command takes the resolved settings of its subcommand and returns the
// process exit code. Library errors propagate as deltapress::Error.
int cmd_delta(const nlohmann::json& cfg);
int cmd_compress(const nlohmann::json& cfg);
int cmd_reconstruct(const nlohmann::json& cfg);
int cmd_merge(const nlohmann::json& cfg);
int cmd_bench(const nlohmann::json& cfg);
int cmd_stats(const nlohmann::json& cfg);

}  // namespace deltapress::cli
