#pragma once

#include <map>
#include <string>

#include "steerlab/config.hpp"

namespace steerlab {

// One directory per invocation, named by timestamp and config hash, holding
// every artifact plus a manifest that pins command, resolved config, input
// and output hashes.
struct RunManifest {
    std::string command;
    std::string version;
    Config config;
    std::map<std::string, std::string> inputs;  // path -> content hash
    std::map<std::string, std::string> outputs; // path -> content hash
    double wall_clock_sec = 0.0;

    void note_input(const std::string& path);
    void note_output(const std::string& path);
    void write(const std::string& dir) const;
};

RunManifest load_manifest(const std::string& dir);

// creates and returns the run directory
std::string make_run_dir(const std::string& out_root, const Config& cfg);

} // namespace steerlab
