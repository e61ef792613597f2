#include "steerlab/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "steerlab/analysis.hpp"
#include "steerlab/archive.hpp"
#include "steerlab/evaluation.hpp"
#include "steerlab/manifest.hpp"
#include "steerlab/model.hpp"
#include "steerlab/patching.hpp"
#include "steerlab/sae.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/task.hpp"

namespace steerlab {

namespace {

// Every CSV number goes through here so regenerated files match byte for byte.
std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

struct Csv {
    std::ofstream f;
    explicit Csv(const std::string& path) : f(path, std::ios::trunc) {
        if (!f) throw DependencyError("cannot write " + path);
    }
    void row(const std::vector<std::string>& cells) {
        for (size_t i = 0; i < cells.size(); ++i) f << (i ? "," : "") << cells[i];
        f << "\n";
    }
};

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DependencyError("missing raw dump: " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream is(line);
        std::string cell;
        while (std::getline(is, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

ModelConfig model_config_from(const Config& cfg) {
    ModelConfig mc;
    mc.n_layers = cfg.get_int("model.n_layers");
    mc.d_model = cfg.get_int("model.d_model");
    mc.n_heads = cfg.get_int("model.n_heads");
    mc.d_head = cfg.get_int("model.d_head");
    mc.d_ff = cfg.get_int("model.d_ff");
    mc.max_seq_len = cfg.get_int("model.max_seq_len");
    mc.norm_eps = static_cast<float>(cfg.get_double("model.norm_eps"));
    mc.pos_scheme = cfg.get("model.pos_scheme");
    mc.vocab_size = vocab::kSize; // the task alphabet fixes the vocabulary
    mc.validate();
    return mc;
}

WeightStore load_model_input(const Config& cfg, const std::string& key, const ModelConfig& mc,
                             RunManifest& manifest) {
    const std::string path = cfg.get(key);
    if (path.empty())
        throw DependencyError("missing input artifact: set " + key + " to a weights archive");
    manifest.note_input(path);
    return load_weights(path, mc);
}

SteeringParams load_steering_input(const Config& cfg, const std::string& key,
                                   const ModelConfig& mc, RunManifest& manifest) {
    const std::string path = cfg.get(key);
    if (path.empty())
        throw DependencyError("missing input artifact: set " + key + " to a steering archive");
    manifest.note_input(path);
    return load_steering(path, mc);
}

EvalConfig eval_config_from(const Config& cfg, const std::string& prefix) {
    EvalConfig ec;
    ec.temperature = static_cast<float>(cfg.get_double(prefix + ".temperature"));
    ec.seeds = cfg.get_u64_list(prefix + ".seeds");
    ec.max_new = cfg.get_int(prefix + ".max_new");
    return ec;
}

// ---------------------------------------------------------------------------
// raw -> derived transforms, shared by the commands and `report`

void derive_eval(const std::string& dir) {
    const auto raw = read_csv(dir + "/raw_eval.csv");
    // per-seed accuracy, then the aggregate
    std::map<std::string, std::pair<long, long>> per_seed; // seed -> (correct, total)
    double len_sum = 0.0;
    long n = 0;
    for (size_t i = 1; i < raw.size(); ++i) {
        auto& slot = per_seed[raw[i][0]];
        slot.first += std::stol(raw[i][2]);
        slot.second += 1;
        len_sum += std::stod(raw[i][3]);
        ++n;
    }
    Csv out(dir + "/eval.csv");
    out.row({"seed", "accuracy", "n"});
    double mean = 0.0;
    std::vector<double> accs;
    for (const auto& [seed, slot] : per_seed) {
        const double acc = static_cast<double>(slot.first) / slot.second;
        accs.push_back(acc);
        mean += acc;
        out.row({seed, fmt(acc), std::to_string(slot.second)});
    }
    mean /= accs.empty() ? 1.0 : static_cast<double>(accs.size());
    double var = 0.0;
    for (double a : accs) var += (a - mean) * (a - mean);
    var /= accs.empty() ? 1.0 : static_cast<double>(accs.size());
    out.row({"mean", fmt(mean), std::to_string(n)});
    out.row({"std", fmt(std::sqrt(var)), std::to_string(n)});
    out.row({"mean_gen_len", fmt(n ? len_sum / n : 0.0), std::to_string(n)});
}

void write_raw_eval(const std::string& dir, const EvalReport& rep) {
    Csv raw(dir + "/raw_eval.csv");
    raw.row({"eval_seed", "instance_seed", "reward", "gen_len"});
    for (const auto& r : rep.rows)
        raw.row({std::to_string(r.eval_seed), std::to_string(r.instance_seed),
                 std::to_string(r.reward), std::to_string(r.gen_len)});
}

void derive_deltap(const std::string& dir) {
    const auto raw = read_csv(dir + "/raw_deltap.csv");
    struct Acc {
        std::vector<double> all, first;
    };
    std::map<int, Acc> by_token;
    for (size_t i = 1; i < raw.size(); ++i) {
        const int token = std::stoi(raw[i][3]);
        const double delta = std::stod(raw[i][6]);
        by_token[token].all.push_back(delta);
        if (raw[i][2] == "1") by_token[token].first.push_back(delta);
    }
    Csv out(dir + "/deltap_summary.csv");
    out.row({"token", "token_text", "group", "count", "mean", "median", "min", "max"});
    auto emit = [&](int token, const char* group, const std::vector<double>& v) {
        if (v.empty()) return;
        double mean = 0.0, mn = v[0], mx = v[0];
        for (double d : v) {
            mean += d;
            mn = std::min(mn, d);
            mx = std::max(mx, d);
        }
        mean /= static_cast<double>(v.size());
        out.row({std::to_string(token), vocab::token_str(token), group,
                 std::to_string(v.size()), fmt(mean), fmt(median(v)), fmt(mn), fmt(mx)});
    };
    for (const auto& [token, acc] : by_token) {
        emit(token, "all", acc.all);
        emit(token, "first", acc.first);
    }
}

void derive_persist(const std::string& dir) {
    const auto raw = read_csv(dir + "/raw_persistence.csv");
    std::map<std::pair<int, int>, std::pair<double, long>> dd, dv;
    for (size_t i = 1; i < raw.size(); ++i) {
        const int inject = std::stoi(raw[i][0]);
        const int target = std::stoi(raw[i][1]);
        dd[{inject, target}].first += std::stod(raw[i][4]);
        dd[{inject, target}].second += 1;
        if (raw[i][5] != "nan") {
            dv[{inject, target}].first += std::stod(raw[i][5]);
            dv[{inject, target}].second += 1;
        }
    }
    auto write_matrix = [&](const std::string& path,
                            const std::map<std::pair<int, int>, std::pair<double, long>>& m) {
        int max_layer = 0;
        for (const auto& [key, v] : m) max_layer = std::max({max_layer, key.first, key.second});
        Csv out(path);
        std::vector<std::string> head{"inject"};
        for (int l = 0; l <= max_layer; ++l) head.push_back("l" + std::to_string(l));
        out.row(head);
        std::map<int, bool> injects;
        for (const auto& [key, v] : m) injects[key.first] = true;
        for (const auto& [i, unused] : injects) {
            (void)unused;
            std::vector<std::string> row{std::to_string(i)};
            for (int l = 0; l <= max_layer; ++l) {
                auto it = m.find({i, l});
                row.push_back(it == m.end() ? "nan" : fmt(it->second.first / it->second.second));
            }
            out.row(row);
        }
    };
    write_matrix(dir + "/diff_diff.csv", dd);
    write_matrix(dir + "/diff_vector.csv", dv);
}

void derive_bias(const std::string& dir) {
    const auto shifts = load_tensors(dir + "/mean_shifts.stlb");
    std::vector<std::pair<int, const Tensor*>> by_layer;
    for (const auto& [name, t] : shifts)
        by_layer.emplace_back(std::stoi(name.substr(name.rfind('.') + 1)), &t);
    std::sort(by_layer.begin(), by_layer.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    Csv out(dir + "/bias_cosine.csv");
    std::vector<std::string> head{"layer"};
    for (const auto& [l, t] : by_layer) head.push_back("l" + std::to_string(l));
    out.row(head);
    for (const auto& [li, ti] : by_layer) {
        std::vector<std::string> row{std::to_string(li)};
        for (const auto& [lj, tj] : by_layer)
            row.push_back(
                fmt(cosine_guarded(ti->data.data(), tj->data.data(), static_cast<int>(ti->numel()))));
        out.row(row);
    }
}

void derive_lens(const std::string& dir, const std::string& raw_name,
                 const std::string& derived_name, int top_k, bool rank_by_cosine) {
    const auto raw = read_csv(dir + "/" + raw_name);
    struct Row {
        std::string layer;
        int token;
        std::string text;
        double dot, cos;
    };
    std::vector<Row> rows;
    for (size_t i = 1; i < raw.size(); ++i)
        rows.push_back({raw[i][0], std::stoi(raw[i][1]), raw[i][2], std::stod(raw[i][3]),
                        std::stod(raw[i][4])});
    std::stable_sort(rows.begin(), rows.end(), [&](const Row& a, const Row& b) {
        if (a.layer != b.layer) return a.layer < b.layer;
        const double sa = rank_by_cosine ? a.cos : a.dot;
        const double sb = rank_by_cosine ? b.cos : b.dot;
        if (sa != sb) return sa > sb;
        return a.token < b.token;
    });
    Csv out(dir + "/" + derived_name);
    out.row({"layer", "rank", "token", "token_text", "dot", "cosine"});
    std::string current;
    int rank = 0;
    for (const auto& r : rows) {
        if (r.layer != current) {
            current = r.layer;
            rank = 0;
        }
        if (rank >= top_k) continue;
        out.row({r.layer, std::to_string(rank), std::to_string(r.token), r.text, fmt(r.dot),
                 fmt(r.cos)});
        ++rank;
    }
}

void derive_sweep(const std::string& dir) {
    const auto raw = read_csv(dir + "/raw_sweep.csv");
    struct Key {
        std::string placement;
        int layer, head;
        bool operator<(const Key& o) const {
            return std::tie(placement, layer, head) < std::tie(o.placement, o.layer, o.head);
        }
    };
    std::map<Key, std::map<std::string, std::pair<long, long>>> acc; // key -> seed -> (corr, n)
    std::map<Key, std::pair<double, long>> lens;
    std::vector<Key> order;
    for (size_t i = 1; i < raw.size(); ++i) {
        Key k{raw[i][0], std::stoi(raw[i][1]), std::stoi(raw[i][2])};
        if (acc.find(k) == acc.end()) order.push_back(k);
        auto& slot = acc[k][raw[i][3]];
        slot.first += std::stol(raw[i][5]);
        slot.second += 1;
        lens[k].first += std::stod(raw[i][6]);
        lens[k].second += 1;
    }
    std::sort(order.begin(), order.end());
    Csv out(dir + "/sweep.csv");
    out.row({"placement", "layer", "head", "accuracy_mean", "accuracy_std", "seeds",
             "mean_gen_len"});
    for (const auto& k : order) {
        std::vector<double> per_seed;
        std::string seeds;
        for (const auto& [seed, slot] : acc[k]) {
            per_seed.push_back(static_cast<double>(slot.first) / slot.second);
            seeds += (seeds.empty() ? "" : ";") + seed;
        }
        double mean = 0.0;
        for (double a : per_seed) mean += a;
        mean /= static_cast<double>(per_seed.size());
        double var = 0.0;
        for (double a : per_seed) var += (a - mean) * (a - mean);
        var /= static_cast<double>(per_seed.size());
        out.row({k.placement, std::to_string(k.layer), std::to_string(k.head), fmt(mean),
                 fmt(std::sqrt(var)), seeds, fmt(lens[k].first / lens[k].second)});
    }
}

void derive_cas(const std::string& dir) {
    const auto raw = read_csv(dir + "/raw_cas.csv");
    struct Row {
        int feature, count;
        double rc, ri, cas;
    };
    std::vector<Row> rows;
    for (size_t i = 1; i < raw.size(); ++i) {
        Row r{std::stoi(raw[i][0]), std::stoi(raw[i][1]), std::stod(raw[i][2]),
              std::stod(raw[i][3]), 0.0};
        r.cas = cas_value(r.rc, r.ri);
        rows.push_back(r);
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.cas != b.cas) return a.cas < b.cas;
        return a.feature < b.feature;
    });
    Csv out(dir + "/cas.csv");
    out.row({"feature", "count", "r_correct", "r_incorrect", "cas"});
    for (const auto& r : rows)
        out.row({std::to_string(r.feature), std::to_string(r.count), fmt(r.rc), fmt(r.ri),
                 fmt(r.cas)});
    Csv neg(dir + "/cas_most_negative.csv");
    neg.row({"feature", "count", "r_correct", "r_incorrect", "cas"});
    for (size_t i = 0; i < std::min<size_t>(rows.size(), 20); ++i)
        neg.row({std::to_string(rows[i].feature), std::to_string(rows[i].count), fmt(rows[i].rc),
                 fmt(rows[i].ri), fmt(rows[i].cas)});
    Csv pos(dir + "/cas_most_positive.csv");
    pos.row({"feature", "count", "r_correct", "r_incorrect", "cas"});
    for (size_t i = 0; i < std::min<size_t>(rows.size(), 20); ++i) {
        const auto& r = rows[rows.size() - 1 - i];
        pos.row({std::to_string(r.feature), std::to_string(r.count), fmt(r.rc), fmt(r.ri),
                 fmt(r.cas)});
    }
}

void derive_transfer(const std::string& dir) {
    std::ifstream f(dir + "/raw_transfer.json");
    if (!f) throw DependencyError("missing raw dump: " + dir + "/raw_transfer.json");
    nlohmann::json j = nlohmann::json::parse(f, nullptr, true);
    Csv out(dir + "/transfer.csv");
    out.row({"acc_donor_applied", "acc_base", "acc_own", "gain", "defined"});
    bool defined = false;
    const double gain = transfer_gain_value(j["acc_donor_applied"].get<double>(),
                                            j["acc_base"].get<double>(),
                                            j["acc_own"].get<double>(), &defined);
    out.row({fmt(j["acc_donor_applied"].get<double>()), fmt(j["acc_base"].get<double>()),
             fmt(j["acc_own"].get<double>()), fmt(gain), defined ? "1" : "0"});
}

void derive_compose(const std::string& dir) {
    std::ifstream f(dir + "/raw_compose.json");
    if (!f) throw DependencyError("missing raw dump: " + dir + "/raw_compose.json");
    nlohmann::json j = nlohmann::json::parse(f, nullptr, true);
    const double acc_all = j["acc_all"].get<double>();
    Csv out(dir + "/compose.csv");
    out.row({"i", "j", "acc_i", "acc_j", "acc_pair", "acc_all", "gain", "defined"});
    for (const auto& p : j["pairs"]) {
        bool defined = false;
        const double gain =
            compose_gain_value(p["acc_pair"].get<double>(), p["acc_i"].get<double>(),
                               p["acc_j"].get<double>(), acc_all, &defined);
        out.row({std::to_string(p["i"].get<int>()), std::to_string(p["j"].get<int>()),
                 fmt(p["acc_i"].get<double>()), fmt(p["acc_j"].get<double>()),
                 fmt(p["acc_pair"].get<double>()), fmt(acc_all), fmt(gain),
                 defined ? "1" : "0"});
    }
}

void derive_value(const std::string& dir) {
    const auto raw = read_csv(dir + "/raw_value.csv");
    double max_plain = 0.0, max_norm = 0.0;
    for (size_t i = 1; i < raw.size(); ++i) {
        const double dev = std::stod(raw[i][4]);
        if (raw[i][3] == "1")
            max_norm = std::max(max_norm, dev);
        else
            max_plain = std::max(max_plain, dev);
    }
    Csv out(dir + "/value_summary.csv");
    out.row({"mode", "max_abs_deviation"});
    out.row({"norm_bypassed", fmt(max_plain)});
    out.row({"with_norm", fmt(max_norm)});
}

// ---------------------------------------------------------------------------
// prompt sampling shared by analysis commands

std::vector<std::vector<int>> sample_prompts(const Config& cfg, uint64_t seed, int n) {
    const int level = cfg.get_int("task.level");
    std::vector<std::vector<int>> prompts;
    for (const auto& inst : make_task_set(seed, n, level)) prompts.push_back(inst.prompt);
    return prompts;
}

std::vector<Tensor> layer_vectors_from(const Config& cfg, const ModelConfig& mc,
                                       RunManifest& manifest) {
    std::vector<Tensor> vecs(static_cast<size_t>(mc.n_layers));
    const std::string all = cfg.get("persist.all_vectors");
    if (!all.empty()) {
        manifest.note_input(all);
        const auto params = load_steering(all, mc);
        for (const auto& e : params.entries)
            if (e.kind == SteerKind::Constant && e.site.site == Site::ResidPost)
                vecs[static_cast<size_t>(e.site.layer)] = e.s;
        return vecs;
    }
    const auto paths = cfg.get_str_list("persist.vectors");
    if (paths.empty())
        throw DependencyError("persist: set persist.vectors or persist.all_vectors");
    for (size_t l = 0; l < paths.size() && l < vecs.size(); ++l) {
        if (paths[l] == "-" || paths[l].empty()) continue;
        manifest.note_input(paths[l]);
        const auto params = load_steering(paths[l], mc);
        for (const auto& e : params.entries)
            if (e.kind == SteerKind::Constant && e.site.site == Site::ResidPost &&
                e.site.layer == static_cast<int>(l))
                vecs[l] = e.s;
        if (vecs[l].data.empty())
            throw DependencyError("persist: " + paths[l] + " has no constant vector at layer " +
                                  std::to_string(l));
    }
    return vecs;
}

Tensor steering_direction(const SteeringParams& params, int layer) {
    // probe the constant vector (or adaptive direction b) at the given layer;
    // layer -1 takes the highest layer present
    const SteeringParams::Entry* best = nullptr;
    for (const auto& e : params.entries) {
        if (layer >= 0 && e.site.layer != layer) continue;
        if (!best || e.site.layer > best->site.layer) best = &e;
    }
    if (!best) throw DependencyError("steering archive has no entry at the requested layer");
    return best->kind == SteerKind::Constant ? best->s : best->b;
}

} // namespace

std::vector<std::string> command_names() {
    return {"pretrain",  "steer-train", "eval",     "prefix-eval", "persist",
            "lens",      "deltap",      "patch-sweep", "value-check", "sae-collect",
            "sae-train", "cas",         "transfer", "compose",     "report"};
}

std::string run_command(const std::string& name, Config cfg, const std::string& out_root,
                        bool use_f64) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg.resolve();

    RunManifest manifest;
    manifest.command = name;
    manifest.version = kVersion;
    manifest.config = cfg;

    const ModelConfig mc = model_config_from(cfg);
    const int level = cfg.get_int("task.level");

    // `report` operates on an existing run directory, not a fresh one
    if (name == "report") {
        const std::string dir = cfg.get("report.dir");
        if (dir.empty()) throw DependencyError("report: set report.dir to a finished run");
        const RunManifest old = load_manifest(dir);
        const std::string cmd = old.command;
        if (cmd == "eval" || cmd == "prefix-eval") derive_eval(dir);
        else if (cmd == "deltap") derive_deltap(dir);
        else if (cmd == "persist") {
            derive_persist(dir);
            derive_bias(dir);
            derive_lens(dir, "raw_bias_lens.csv", "bias_lens.csv",
                        old.config.get_int("lens.top_k"),
                        old.config.get("lens.rank_by") == "cosine");
        } else if (cmd == "lens")
            derive_lens(dir, "raw_lens.csv", "lens.csv", old.config.get_int("lens.top_k"),
                        old.config.get("lens.rank_by") == "cosine");
        else if (cmd == "patch-sweep") derive_sweep(dir);
        else if (cmd == "cas") derive_cas(dir);
        else if (cmd == "transfer") derive_transfer(dir);
        else if (cmd == "compose") derive_compose(dir);
        else if (cmd == "value-check") derive_value(dir);
        else if (cmd == "pretrain" || cmd == "steer-train" || cmd == "sae-train" ||
                 cmd == "sae-collect") {
            // curves and archives are their own raw form
        } else
            throw UsageError("report: nothing to regenerate for command " + cmd);
        return dir;
    }

    const std::string dir = make_run_dir(out_root, cfg);

    if (name == "pretrain") {
        Corpus corpus = build_corpus({cfg.get_u64("corpus.seed"), cfg.get_int("corpus.size"),
                                      level,
                                      {cfg.get_double("corpus.mix_direct"),
                                       cfg.get_double("corpus.mix_step"),
                                       cfg.get_double("corpus.mix_noisy")},
                                      cfg.get_double("corpus.direct_correct"),
                                      cfg.get_double("corpus.noisy_correct")});
        write_corpus(dir + "/corpus.txt", corpus);
        WeightStore store = init_model(mc, cfg.get_u64("model.seed"));
        PretrainConfig pc;
        pc.steps = cfg.get_int("pretrain.steps");
        pc.batch_size = cfg.get_int("pretrain.batch_size");
        pc.adam.lr = static_cast<float>(cfg.get_double("pretrain.lr"));
        pc.seed = cfg.get_u64("pretrain.seed");
        pc.holdout_frac = static_cast<float>(cfg.get_double("pretrain.holdout_frac"));
        pc.holdout_every = cfg.get_int("pretrain.holdout_every");
        const auto res = pretrain(store, mc, corpus.lines, pc);
        save_weights(dir + "/model.stlb", store);
        {
            Csv out(dir + "/loss_curve.csv");
            out.row({"step", "train_loss"});
            for (size_t i = 0; i < res.loss_curve.size(); ++i)
                out.row({std::to_string(i), fmt(res.loss_curve[i])});
            Csv hold(dir + "/holdout_curve.csv");
            hold.row({"step", "holdout_loss"});
            for (const auto& [step, loss] : res.holdout_curve)
                hold.row({std::to_string(step), fmt(loss)});
        }
        manifest.note_output(dir + "/model.stlb");
        manifest.note_output(dir + "/corpus.txt");
        manifest.note_output(dir + "/loss_curve.csv");
        manifest.note_output(dir + "/holdout_curve.csv");
        const double target = cfg.get_double("pretrain.target_loss");
        std::printf("pretrain: final holdout loss %.4f (target %.4f)\n",
                    static_cast<double>(res.final_holdout_loss), target);
        if (res.final_holdout_loss > target)
            throw NumericError("pretrain: holdout loss " +
                               std::to_string(res.final_holdout_loss) + " above target " +
                               std::to_string(target));
    } else if (name == "steer-train") {
        const WeightStore store = load_model_input(cfg, "steer.model", mc, manifest);
        const int layer = cfg.get_int("steer.layer");
        const std::string kind = cfg.get("steer.kind");
        SteeringSpec spec;
        if (kind == "constant")
            spec = layer < 0 ? all_layer_spec(mc) : single_layer_spec(layer);
        else if (kind == "adaptive") {
            if (layer < 0) throw ConfigError("steer: adaptive training needs a single layer");
            spec = adaptive_spec(layer);
        } else
            throw ConfigError("steer.kind must be constant or adaptive, got " + kind);
        RlooConfig rc;
        rc.prompts_per_step = cfg.get_int("steer.prompts");
        rc.gens_per_prompt = cfg.get_int("steer.gens");
        rc.temperature = static_cast<float>(cfg.get_double("steer.temperature"));
        rc.max_new = cfg.get_int("steer.max_new");
        rc.level = level;
        rc.adam.lr = static_cast<float>(cfg.get_double("steer.lr"));
        rc.seed = cfg.get_u64("steer.seed");
        const auto res = train_steering(store, mc, spec, rc, cfg.get_int("steer.steps"));
        save_steering(dir + "/steer.stlb", res.params);
        Csv out(dir + "/reward_curve.csv");
        out.row({"step", "mean_reward", "mean_abs_advantage", "grad_norm"});
        for (size_t i = 0; i < res.curve.size(); ++i)
            out.row({std::to_string(i), fmt(res.curve[i].mean_reward),
                     fmt(res.curve[i].mean_abs_advantage), fmt(res.curve[i].grad_norm)});
        manifest.note_output(dir + "/steer.stlb");
        manifest.note_output(dir + "/reward_curve.csv");
    } else if (name == "eval" || name == "prefix-eval") {
        const WeightStore store = load_model_input(cfg, "eval.model", mc, manifest);
        const auto dataset = make_task_set(cfg.get_u64("eval.dataset_seed"),
                                           cfg.get_int("eval.n"), level);
        EvalConfig ec = eval_config_from(cfg, "eval");
        ec.dataset_id = "level" + std::to_string(level) + "-seed" + cfg.get("eval.dataset_seed") +
                        "-n" + cfg.get("eval.n");
        EvalReport rep;
        if (name == "eval") {
            SteeringSetup setup;
            if (!cfg.get("eval.steering").empty())
                setup = load_steering_input(cfg, "eval.steering", mc, manifest).setup();
            rep = evaluate(store, mc, setup, dataset, ec);
        } else {
            const auto prefix = vocab::tok(cfg.get("prefix.tokens"));
            rep = prefix_eval(store, mc, prefix, dataset, ec);
        }
        write_raw_eval(dir, rep);
        derive_eval(dir);
        manifest.note_output(dir + "/raw_eval.csv");
        manifest.note_output(dir + "/eval.csv");
        std::printf("%s: accuracy %.4f +- %.4f\n", name.c_str(), rep.accuracy_mean,
                    rep.accuracy_std);
    } else if (name == "persist") {
        const WeightStore store = load_model_input(cfg, "persist.model", mc, manifest);
        const auto vecs = layer_vectors_from(cfg, mc, manifest);
        for (int l = 0; l < mc.n_layers; ++l)
            if (vecs[static_cast<size_t>(l)].data.empty())
                std::printf("persist: no vector for layer %d, skipping its row\n", l);
        auto prompts = sample_prompts(cfg, cfg.get_u64("persist.prompt_seed"),
                                      cfg.get_int("persist.prompts"));
        const std::string positions = cfg.get("persist.positions");
        if (positions == "generated") {
            // measure the shifts over full transcripts instead of bare prompts
            const uint64_t gen_seed = cfg.get_u64("persist.prompt_seed");
            for (size_t i = 0; i < prompts.size(); ++i) {
                Rng rng(derive_seed(gen_seed, seed_stream::kEval, static_cast<uint64_t>(i)));
                SampleConfig sgen{1.0f, cfg.get_int("eval.max_new"), vocab::kEoa};
                const auto completion = sample(store, mc, prompts[i], sgen, rng, {});
                prompts[i].insert(prompts[i].end(), completion.begin(), completion.end());
            }
        } else if (positions != "prompt") {
            throw ConfigError("persist.positions must be prompt or generated");
        }
        // raw per-position cosines
        Csv raw(dir + "/raw_persistence.csv");
        raw.row({"inject", "target", "prompt", "position", "cos_diff_diff", "cos_diff_vector"});
        for (int i = 0; i < mc.n_layers; ++i) {
            if (vecs[static_cast<size_t>(i)].data.empty()) continue;
            std::vector<int> targets;
            for (int l = i; l < mc.n_layers; ++l) targets.push_back(l);
            std::map<int, std::vector<Tensor>> shifts;
            for (const auto& prompt : prompts) {
                auto df = delta_f(store, mc, vecs[static_cast<size_t>(i)], i, prompt, targets);
                for (auto& [l, t] : df) shifts[l].push_back(std::move(t));
            }
            for (int l : targets) {
                std::vector<const float*> rows;
                for (const auto& t : shifts[l])
                    for (int r = 0; r < t.dim(0); ++r) rows.push_back(t.row(r));
                const auto mean = mean_rows(rows, mc.d_model);
                std::vector<float> mean_f(mean.begin(), mean.end());
                const bool have_vec = !vecs[static_cast<size_t>(l)].data.empty();
                size_t rix = 0;
                for (size_t p = 0; p < shifts[l].size(); ++p) {
                    const auto& t = shifts[l][p];
                    for (int r = 0; r < t.dim(0); ++r, ++rix) {
                        const double cd = cosine_guarded(rows[rix], mean_f.data(), mc.d_model);
                        const double cv =
                            have_vec ? cosine_guarded(rows[rix],
                                                      vecs[static_cast<size_t>(l)].data.data(),
                                                      mc.d_model)
                                     : std::numeric_limits<double>::quiet_NaN();
                        raw.row({std::to_string(i), std::to_string(l), std::to_string(p),
                                 std::to_string(r), fmt(cd), fmt(cv)});
                    }
                }
            }
        }
        raw.f.close();
        derive_persist(dir);
        // final-layer mean shifts and their unembedding readout
        const auto bias = bias_similarity_matrix(store, mc, vecs, prompts);
        std::map<std::string, Tensor> shift_tensors;
        for (size_t i = 0; i < bias.layers_present.size(); ++i)
            shift_tensors.emplace("mean_shift." + std::to_string(bias.layers_present[i]),
                                  bias.mean_shifts[i]);
        save_tensors(dir + "/mean_shifts.stlb", shift_tensors);
        {
            Csv lens_raw(dir + "/raw_bias_lens.csv");
            lens_raw.row({"layer", "token", "token_text", "dot", "cosine"});
            for (size_t i = 0; i < bias.layers_present.size(); ++i) {
                const auto rep =
                    logit_lens(bias.mean_shifts[i], store, mc, mc.vocab_size, false, false);
                for (const auto& e : rep.entries)
                    lens_raw.row({std::to_string(bias.layers_present[i]),
                                  std::to_string(e.token), e.token_text, fmt(e.dot),
                                  fmt(e.cosine)});
            }
        }
        derive_bias(dir);
        derive_lens(dir, "raw_bias_lens.csv", "bias_lens.csv", cfg.get_int("lens.top_k"),
                    cfg.get("lens.rank_by") == "cosine");
        for (const char* f : {"raw_persistence.csv", "diff_diff.csv", "diff_vector.csv",
                              "mean_shifts.stlb", "raw_bias_lens.csv", "bias_cosine.csv",
                              "bias_lens.csv"})
            manifest.note_output(dir + "/" + std::string(f));
    } else if (name == "lens") {
        const WeightStore store = load_model_input(cfg, "lens.model", mc, manifest);
        const auto params = load_steering_input(cfg, "lens.steering", mc, manifest);
        const Tensor v = steering_direction(params, cfg.get_int("lens.layer"));
        const auto rep = logit_lens(v, store, mc, mc.vocab_size, cfg.get_bool("lens.final_norm"),
                                    cfg.get("lens.rank_by") == "cosine");
        Csv raw(dir + "/raw_lens.csv");
        raw.row({"layer", "token", "token_text", "dot", "cosine"});
        for (const auto& e : rep.entries)
            raw.row({cfg.get("lens.layer"), std::to_string(e.token), e.token_text, fmt(e.dot),
                     fmt(e.cosine)});
        raw.f.close();
        derive_lens(dir, "raw_lens.csv", "lens.csv", cfg.get_int("lens.top_k"),
                    cfg.get("lens.rank_by") == "cosine");
        manifest.note_output(dir + "/raw_lens.csv");
        manifest.note_output(dir + "/lens.csv");
    } else if (name == "deltap") {
        const WeightStore store = load_model_input(cfg, "deltap.model", mc, manifest);
        const auto params = load_steering_input(cfg, "deltap.steering", mc, manifest);
        const auto prompts = sample_prompts(cfg, cfg.get_u64("deltap.prompt_seed"),
                                            cfg.get_int("deltap.prompts"));
        const auto rows = token_prob_delta(store, mc, params.setup(), prompts);
        Csv raw(dir + "/raw_deltap.csv");
        raw.row({"prompt", "position", "first_generated", "token", "p_base", "p_steered",
                 "delta"});
        for (const auto& r : rows)
            raw.row({std::to_string(r.prompt_index), std::to_string(r.position),
                     r.first_generated ? "1" : "0", std::to_string(r.token), fmt(r.p_base),
                     fmt(r.p_steered), fmt(r.delta)});
        raw.f.close();
        derive_deltap(dir);
        manifest.note_output(dir + "/raw_deltap.csv");
        manifest.note_output(dir + "/deltap_summary.csv");
    } else if (name == "patch-sweep") {
        const WeightStore store = load_model_input(cfg, "patch.model", mc, manifest);
        const auto params = load_steering_input(cfg, "patch.vector", mc, manifest);
        const int block = cfg.get_int("patch.block");
        const Tensor vec = steering_direction(params, block - 1);
        const auto dataset =
            make_task_set(cfg.get_u64("patch.dataset_seed"), cfg.get_int("patch.n"), level);
        SweepConfig sc;
        sc.temperature = static_cast<float>(cfg.get_double("patch.temperature"));
        sc.seeds = cfg.get_u64_list("patch.seeds");
        sc.max_new = cfg.get_int("patch.max_new");
        const auto rows = patch_sweep(store, mc, vec, block, dataset, sc);
        Csv raw(dir + "/raw_sweep.csv");
        raw.row({"placement", "layer", "head", "eval_seed", "instance_seed", "reward",
                 "gen_len"});
        for (const auto& row : rows)
            for (const auto& r : row.raw)
                raw.row({row.placement, std::to_string(row.layer), std::to_string(row.head),
                         std::to_string(r[0]), std::to_string(r[1]), std::to_string(r[2]),
                         std::to_string(r[3])});
        raw.f.close();
        derive_sweep(dir);
        manifest.note_output(dir + "/raw_sweep.csv");
        manifest.note_output(dir + "/sweep.csv");
    } else if (name == "value-check") {
        WeightStore store;
        if (cfg.get("value.model").empty())
            store = init_model(mc, cfg.get_u64("model.seed"));
        else
            store = load_model_input(cfg, "value.model", mc, manifest);
        const int n = cfg.get_int("value.n");
        const int T = cfg.get_int("value.seq_len");
        Rng rng(derive_seed(cfg.get_u64("value.seed"), 42));
        Csv raw(dir + "/raw_value.csv");
        raw.row({"trial", "layer", "head", "with_norm", "max_abs_deviation"});
        double worst = 0.0;
        const auto store64 = store_cast<double>(store);
        for (int i = 0; i < n; ++i) {
            const int layer = static_cast<int>(rng.below(static_cast<uint64_t>(mc.n_layers)));
            const int head = static_cast<int>(rng.below(static_cast<uint64_t>(mc.n_heads)));
            for (const bool with_norm : {false, true}) {
                double dev;
                if (use_f64) {
                    const auto u = TensorD::randn({T, mc.d_model}, rng);
                    const auto s = TensorD::randn({mc.d_model}, rng);
                    dev = value_linearity_check<double>(store64, mc, layer, head, u, s, with_norm);
                } else {
                    const auto u = Tensor::randn({T, mc.d_model}, rng);
                    const auto s = Tensor::randn({mc.d_model}, rng);
                    dev = value_linearity_check<float>(store, mc, layer, head, u, s, with_norm);
                }
                if (!with_norm) worst = std::max(worst, dev);
                raw.row({std::to_string(i), std::to_string(layer), std::to_string(head),
                         with_norm ? "1" : "0", fmt(dev)});
            }
        }
        raw.f.close();
        derive_value(dir);
        manifest.note_output(dir + "/raw_value.csv");
        manifest.note_output(dir + "/value_summary.csv");
        std::printf("value-check: max deviation %.3g over %d trials (%s)\n", worst, n,
                    use_f64 ? "f64" : "f32");
    } else if (name == "sae-collect") {
        const WeightStore store = load_model_input(cfg, "saec.model", mc, manifest);
        const auto params = load_steering_input(cfg, "saec.steering", mc, manifest);
        const auto instances =
            make_task_set(cfg.get_u64("saec.seed"), cfg.get_int("saec.n"), level);
        const auto ds = collect_diffs(store, mc, params, cfg.get_int("saec.inject"),
                                      cfg.get_int("saec.target"), instances,
                                      static_cast<float>(cfg.get_double("saec.temperature")),
                                      cfg.get_int("saec.max_new"), cfg.get_u64("saec.seed"));
        save_diff_dataset(dir + "/diffs.stlb", ds);
        manifest.note_output(dir + "/diffs.stlb");
        manifest.note_output(dir + "/diffs.stlb.rows.csv");
        std::printf("sae-collect: %d rows\n", ds.data.dim(0));
    } else if (name == "sae-train") {
        const std::string data_path = cfg.get("sae.data");
        if (data_path.empty()) throw DependencyError("sae-train: set sae.data");
        manifest.note_input(data_path);
        const auto ds = load_diff_dataset(data_path);
        SaeConfig sc;
        sc.d_in = ds.data.dim(1);
        sc.dict_size = cfg.get_int("sae.dict_size");
        sc.k = cfg.get_int("sae.k");
        sc.aux_coef = static_cast<float>(cfg.get_double("sae.aux_coef"));
        sc.aux_k = cfg.get_int("sae.aux_k");
        sc.dead_window = cfg.get_int("sae.dead_window");
        SaeTrainConfig tc;
        tc.steps = cfg.get_int("sae.steps");
        tc.batch_size = cfg.get_int("sae.batch_size");
        tc.adam.lr = static_cast<float>(cfg.get_double("sae.lr"));
        tc.seed = cfg.get_u64("sae.seed");
        tc.holdout_frac = static_cast<float>(cfg.get_double("sae.holdout_frac"));
        const auto res = train_sae(sc, ds.data, tc);
        save_tensors(dir + "/sae.stlb", {{"w_enc", res.params.w_enc},
                                         {"b_enc", res.params.b_enc},
                                         {"w_dec", res.params.w_dec},
                                         {"b_dec", res.params.b_dec}});
        nlohmann::json meta{{"d_in", sc.d_in},       {"dict_size", sc.dict_size},
                            {"k", sc.k},             {"aux_coef", sc.aux_coef},
                            {"aux_k", sc.aux_k},     {"dead_window", sc.dead_window},
                            {"holdout_rec_initial", res.holdout_rec_initial},
                            {"holdout_rec_final", res.holdout_rec_final},
                            {"dead_fraction", res.dead_fraction}};
        std::ofstream mf(dir + "/sae.stlb.meta.json", std::ios::trunc);
        mf << meta.dump(2) << "\n";
        mf.close();
        Csv out(dir + "/sae_loss_curve.csv");
        out.row({"step", "loss"});
        for (size_t i = 0; i < res.loss_curve.size(); ++i)
            out.row({std::to_string(i), fmt(res.loss_curve[i])});
        manifest.note_output(dir + "/sae.stlb");
        manifest.note_output(dir + "/sae_loss_curve.csv");
        std::printf("sae-train: holdout rec %.4f -> %.4f, dead %.1f%%\n",
                    static_cast<double>(res.holdout_rec_initial),
                    static_cast<double>(res.holdout_rec_final), 100.0 * res.dead_fraction);
    } else if (name == "cas") {
        const std::string data_path = cfg.get("cas.data");
        const std::string sae_path = cfg.get("cas.sae");
        if (data_path.empty() || sae_path.empty())
            throw DependencyError("cas: set cas.data and cas.sae");
        manifest.note_input(data_path);
        manifest.note_input(sae_path);
        const auto ds = load_diff_dataset(data_path);
        auto tensors = load_tensors(sae_path);
        SaeParams params;
        params.w_enc = std::move(tensors.at("w_enc"));
        params.b_enc = std::move(tensors.at("b_enc"));
        params.w_dec = std::move(tensors.at("w_dec"));
        params.b_dec = std::move(tensors.at("b_dec"));
        SaeConfig sc;
        sc.d_in = params.w_dec.dim(0);
        sc.dict_size = params.w_dec.dim(1);
        std::ifstream mf(sae_path + ".meta.json");
        if (mf) {
            nlohmann::json meta = nlohmann::json::parse(mf, nullptr, true);
            sc.k = meta.value("k", sc.k);
        }
        const auto stats = cas_scores(params, sc, ds);
        Csv raw(dir + "/raw_cas.csv");
        raw.row({"feature", "count", "r_correct", "r_incorrect"});
        std::vector<FeatureStats> by_id = stats;
        std::sort(by_id.begin(), by_id.end(),
                  [](const FeatureStats& a, const FeatureStats& b) { return a.feature < b.feature; });
        for (const auto& s : by_id)
            raw.row({std::to_string(s.feature), std::to_string(s.activation_count),
                     fmt(s.r_correct), fmt(s.r_incorrect)});
        raw.f.close();
        derive_cas(dir);
        for (const char* f : {"raw_cas.csv", "cas.csv", "cas_most_negative.csv",
                              "cas_most_positive.csv"})
            manifest.note_output(dir + "/" + std::string(f));
    } else if (name == "transfer") {
        const WeightStore store = load_model_input(cfg, "transfer.model", mc, manifest);
        const auto donor = load_steering_input(cfg, "transfer.donor", mc, manifest);
        const auto own = load_steering_input(cfg, "transfer.own", mc, manifest);
        const auto dataset =
            make_task_set(cfg.get_u64("eval.dataset_seed"), cfg.get_int("eval.n"), level);
        const auto rep = transfer_gain(store, mc, donor, own, dataset, eval_config_from(cfg, "eval"));
        nlohmann::json j{{"acc_donor_applied", rep.donor_applied.accuracy_mean},
                         {"acc_base", rep.base.accuracy_mean},
                         {"acc_own", rep.own.accuracy_mean},
                         {"len_donor_applied", rep.donor_applied.mean_gen_len},
                         {"len_base", rep.base.mean_gen_len},
                         {"len_own", rep.own.mean_gen_len}};
        std::ofstream jf(dir + "/raw_transfer.json", std::ios::trunc);
        jf << j.dump(2) << "\n";
        jf.close();
        derive_transfer(dir);
        manifest.note_output(dir + "/raw_transfer.json");
        manifest.note_output(dir + "/transfer.csv");
        std::printf("transfer: gain %s\n", fmt(rep.gain).c_str());
    } else if (name == "compose") {
        const WeightStore store = load_model_input(cfg, "compose.model", mc, manifest);
        const auto paths = cfg.get_str_list("compose.vectors");
        if (paths.size() < 2) throw DependencyError("compose: need at least two archives");
        const std::string all_path = cfg.get("compose.all");
        if (all_path.empty()) throw DependencyError("compose: set compose.all");
        manifest.note_input(all_path);
        std::vector<SteeringParams> singles;
        for (const auto& p : paths) {
            manifest.note_input(p);
            singles.push_back(load_steering(p, mc));
        }
        const auto all_params = load_steering(all_path, mc);
        const auto dataset =
            make_task_set(cfg.get_u64("eval.dataset_seed"), cfg.get_int("eval.n"), level);
        const EvalConfig ec = eval_config_from(cfg, "eval");
        const double acc_all = evaluate(store, mc, all_params.setup(), dataset, ec).accuracy_mean;
        std::vector<double> single_acc;
        for (const auto& s : singles)
            single_acc.push_back(evaluate(store, mc, s.setup(), dataset, ec).accuracy_mean);
        nlohmann::json pairs = nlohmann::json::array();
        for (size_t i = 0; i < singles.size(); ++i)
            for (size_t j = i + 1; j < singles.size(); ++j) {
                SteeringParams both;
                both.entries = singles[i].entries;
                both.entries.insert(both.entries.end(), singles[j].entries.begin(),
                                    singles[j].entries.end());
                const double acc_pair =
                    evaluate(store, mc, both.setup(), dataset, ec).accuracy_mean;
                pairs.push_back({{"i", static_cast<int>(i)},
                                 {"j", static_cast<int>(j)},
                                 {"acc_i", single_acc[i]},
                                 {"acc_j", single_acc[j]},
                                 {"acc_pair", acc_pair}});
            }
        nlohmann::json j{{"acc_all", acc_all}, {"pairs", pairs}};
        std::ofstream jf(dir + "/raw_compose.json", std::ios::trunc);
        jf << j.dump(2) << "\n";
        jf.close();
        derive_compose(dir);
        manifest.note_output(dir + "/raw_compose.json");
        manifest.note_output(dir + "/compose.csv");
    } else {
        throw UsageError("unknown subcommand: " + name);
    }

    manifest.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest.write(dir);
    return dir;
}

} // namespace steerlab
