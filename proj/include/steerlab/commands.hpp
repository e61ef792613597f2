#pragma once

#include <string>
#include <vector>

#include "steerlab/config.hpp"

namespace steerlab {

std::vector<std::string> command_names();

// Executes one subcommand pipeline into a fresh run directory under
// out_root. Returns the run directory path.
std::string run_command(const std::string& name, Config cfg, const std::string& out_root,
                        bool use_f64);

} // namespace steerlab
