#include "steerlab/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "steerlab/archive.hpp"

namespace steerlab {

void RunManifest::note_input(const std::string& path) { inputs[path] = hex64(file_hash(path)); }

void RunManifest::note_output(const std::string& path) { outputs[path] = hex64(file_hash(path)); }

void RunManifest::write(const std::string& dir) const {
    nlohmann::json j{
        {"command", command},
        {"version", version.empty() ? kVersion : version},
        {"config", nlohmann::json::object()},
        {"inputs", inputs},
        {"outputs", outputs},
        {"wall_clock_sec", wall_clock_sec},
    };
    for (const auto& [k, v] : config.values()) j["config"][k] = v;
    std::ofstream f(dir + "/manifest.json", std::ios::trunc);
    if (!f) throw DependencyError("manifest: cannot write into " + dir);
    f << j.dump(2) << "\n";
}

RunManifest load_manifest(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw DependencyError("manifest: missing manifest.json in " + dir);
    nlohmann::json j = nlohmann::json::parse(f, nullptr, true);
    RunManifest m;
    m.command = j.value("command", std::string());
    m.version = j.value("version", std::string());
    m.config = Config::defaults();
    if (j.contains("config"))
        for (const auto& [k, v] : j["config"].items())
            if (m.config.known(k)) m.config.set(k, v.get<std::string>());
    if (j.contains("inputs"))
        for (const auto& [k, v] : j["inputs"].items()) m.inputs[k] = v.get<std::string>();
    if (j.contains("outputs"))
        for (const auto& [k, v] : j["outputs"].items()) m.outputs[k] = v.get<std::string>();
    m.wall_clock_sec = j.value("wall_clock_sec", 0.0);
    return m;
}

std::string make_run_dir(const std::string& out_root, const Config& cfg) {
    namespace fs = std::filesystem;
    const std::string explicit_dir = cfg.get("run.dir");
    if (!explicit_dir.empty()) {
        fs::create_directories(explicit_dir);
        return explicit_dir;
    }
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
    const std::string base =
        out_root + "/" + stamp + "-" + hex64(cfg.content_hash()).substr(0, 8);
    std::string dir = base;
    for (int i = 2; fs::exists(dir); ++i) dir = base + "-" + std::to_string(i);
    fs::create_directories(dir);
    return dir;
}

} // namespace steerlab
