#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "steerlab/commands.hpp"
#include "steerlab/common.hpp"
#include "steerlab/config.hpp"

using namespace steerlab;

int main(int argc, char** argv) {
    CLI::App app{"steerlab: steering-vector training and analysis workbench"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "runs";
    std::string seed;
    bool use_f64 = false;

    app.add_option("--config", config_path, "run configuration file");
    app.add_option("--set", overrides, "override, section.key=value (repeatable)");
    app.add_option("--out", out_dir, "parent directory for run outputs");
    app.add_option("--seed", seed, "master seed (run.seed)");
    app.add_flag("--f64", use_f64, "run verification checks in 64-bit");

    std::vector<CLI::App*> subs;
    for (const auto& name : command_names()) {
        auto* sub = app.add_subcommand(name);
        sub->fallthrough(); // global options may follow the subcommand
        subs.push_back(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) ? 2 : 0;
    }

    try {
        Config cfg = Config::defaults();
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const auto& o : overrides) {
            const size_t eq = o.find('=');
            if (eq == std::string::npos)
                throw ConfigError("--set expects section.key=value, got: " + o);
            cfg.set(o.substr(0, eq), o.substr(eq + 1));
        }
        if (!seed.empty()) cfg.set("run.seed", seed);

        std::string sub;
        for (size_t i = 0; i < subs.size(); ++i)
            if (subs[i]->parsed()) sub = command_names()[i];

        const std::string dir = run_command(sub, cfg, out_dir, use_f64);
        std::printf("run directory: %s\n", dir.c_str());
        return 0;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const DependencyError& e) {
        std::fprintf(stderr, "dependency error: %s\n", e.what());
        return 3;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
