// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/memory_core.hpp"

#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace memcycle {

/// Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Per-policy EM, steps, LLM-call and step-time statistics. Timing columns
/// stay empty unless the log recorded step timings.
std::string report_csv(std::span<const Trajectory> trajectories);

}  // namespace memcycle
