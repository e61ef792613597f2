#include "steerlab/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "steerlab/rng.hpp"

namespace steerlab {

const std::vector<Config::KeySpec>& Config::schema() {
    static const std::vector<KeySpec> kSchema = {
        {"run.seed", "0", "master seed; every auto seed below derives from it"},
        {"run.dir", "", "explicit run directory; empty picks <out>/<stamp>-<confighash>"},

        {"model.n_layers", "6", "transformer blocks"},
        {"model.d_model", "64", "residual stream width"},
        {"model.n_heads", "4", "attention heads"},
        {"model.d_head", "16", "per-head width"},
        {"model.d_ff", "256", "MLP hidden width"},
        {"model.max_seq_len", "64", "hard sequence cap"},
        {"model.norm_eps", "1e-6", "RMS norm epsilon"},
        {"model.pos_scheme", "rotary", "positional scheme tag"},
        {"model.seed", "auto", "weight init seed"},

        {"task.level", "1", "1: a+b mod 10, 2: two-digit addition, 3: a*b+c"},

        {"corpus.seed", "auto", "corpus sampling seed"},
        {"corpus.size", "8192", "transcripts in the pretraining corpus"},
        {"corpus.mix_direct", "0.40", "direct-answer style probability"},
        {"corpus.mix_step", "0.40", "opener-prefixed step style probability"},
        {"corpus.mix_noisy", "0.20", "distractor style probability"},
        {"corpus.direct_correct", "0.20", "direct transcripts carrying the true answer"},
        {"corpus.noisy_correct", "0.10", "noisy transcripts carrying the true answer"},

        {"pretrain.steps", "5000", "optimizer steps"},
        {"pretrain.batch_size", "16", "sequences per step"},
        {"pretrain.lr", "0.0025", "Adam learning rate"},
        {"pretrain.seed", "auto", "batch sampling seed"},
        {"pretrain.holdout_frac", "0.1", "corpus fraction held out"},
        {"pretrain.holdout_every", "100", "steps between holdout loss samples"},
        {"pretrain.target_loss", "0.7", "required final holdout loss"},

        {"steer.model", "", "weights archive to steer"},
        {"steer.layer", "5", "injection layer; -1 trains one vector per layer"},
        {"steer.kind", "constant", "constant | adaptive"},
        {"steer.steps", "80", "RLOO steps"},
        {"steer.prompts", "32", "prompts per step"},
        {"steer.gens", "8", "generations per prompt"},
        {"steer.temperature", "1.0", "rollout temperature"},
        {"steer.lr", "0.08", "Adam learning rate on steering params"},
        {"steer.max_new", "12", "rollout generation cap"},
        {"steer.seed", "auto", "rollout seed"},

        {"eval.model", "", "weights archive"},
        {"eval.steering", "", "steering archive; empty evaluates the base model"},
        {"eval.n", "512", "held-out instances"},
        {"eval.dataset_seed", "auto", "held-out instance seed"},
        {"eval.temperature", "1.0", "sampling temperature; 0 is greedy"},
        {"eval.seeds", "0,1,2", "evaluation seeds, comma separated"},
        {"eval.max_new", "16", "generation cap"},

        {"prefix.tokens", "T", "space-separated tokens appended to each prompt"},

        {"lens.model", "", "weights archive"},
        {"lens.steering", "", "steering archive; the probed direction"},
        {"lens.layer", "-1", "entry to probe; -1 takes the highest layer present"},
        {"lens.top_k", "10", "entries in the report"},
        {"lens.final_norm", "false", "apply the final norm before the unembedding"},
        {"lens.rank_by", "dot", "dot | cosine"},

        {"deltap.model", "", "weights archive"},
        {"deltap.steering", "", "steering archive"},
        {"deltap.prompts", "256", "prompt sample size"},
        {"deltap.prompt_seed", "auto", "prompt sample seed"},

        {"persist.model", "", "weights archive"},
        {"persist.vectors", "", "comma list of per-layer archives, '-' skips a layer"},
        {"persist.all_vectors", "", "one archive holding a vector per layer"},
        {"persist.prompts", "256", "prompt sample size"},
        {"persist.prompt_seed", "auto", "prompt sample seed"},
        {"persist.positions", "prompt", "measure shifts on prompt | generated positions"},

        {"patch.model", "", "weights archive"},
        {"patch.vector", "", "steering archive with the vector under study"},
        {"patch.block", "5", "the block the placements act on"},
        {"patch.n", "256", "instances per placement"},
        {"patch.dataset_seed", "auto", "instance seed"},
        {"patch.temperature", "1.0", "sampling temperature"},
        {"patch.seeds", "0,1,2", "evaluation seeds"},
        {"patch.max_new", "16", "generation cap"},

        {"value.model", "", "weights archive; empty initializes from model.seed"},
        {"value.n", "100", "random (U, s, head) trials"},
        {"value.seq_len", "8", "rows of U per trial"},
        {"value.seed", "auto", "trial seed"},

        {"saec.model", "", "weights archive"},
        {"saec.steering", "", "steering archive, one constant vector"},
        {"saec.inject", "3", "injection layer"},
        {"saec.target", "4", "layer whose output difference is collected"},
        {"saec.n", "128", "instances"},
        {"saec.temperature", "1.0", "sampling temperature"},
        {"saec.max_new", "16", "generation cap"},
        {"saec.seed", "auto", "sampling seed"},

        {"sae.data", "", "diff dataset archive"},
        {"sae.dict_size", "1024", "dictionary size"},
        {"sae.k", "8", "surviving latents per item"},
        {"sae.aux_coef", "0.03125", "auxiliary loss coefficient"},
        {"sae.aux_k", "32", "dead latents the auxiliary loss may use"},
        {"sae.dead_window", "256", "batches before a silent feature counts as dead"},
        {"sae.steps", "2000", "optimizer steps"},
        {"sae.batch_size", "64", "rows per step"},
        {"sae.lr", "0.001", "Adam learning rate"},
        {"sae.holdout_frac", "0.1", "rows held out"},
        {"sae.seed", "auto", "init and batch seed"},

        {"cas.data", "", "diff dataset archive with labels"},
        {"cas.sae", "", "trained SAE archive"},

        {"transfer.model", "", "recipient weights archive"},
        {"transfer.donor", "", "donor steering archive"},
        {"transfer.own", "", "recipient's own steering archive"},

        {"compose.model", "", "weights archive"},
        {"compose.vectors", "", "comma list of single-layer steering archives"},
        {"compose.all", "", "all-layer steering archive"},

        {"report.dir", "", "finished run directory to regenerate"},
    };
    return kSchema;
}

Config Config::defaults() {
    Config c;
    for (const auto& spec : schema()) c.values_[spec.key] = spec.def;
    return c;
}

bool Config::known(const std::string& key) const { return values_.count(key) > 0; }

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

} // namespace

void Config::apply_line(const std::string& raw) {
    std::string line = raw;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) return;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config: expected 'section.key = value', got: " + raw);
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
}

void Config::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DependencyError("config: cannot open " + path);
    std::string line;
    while (std::getline(f, line)) apply_line(line);
}

void Config::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) {
        std::string msg = "config: unknown key '" + key + "'. Valid keys:";
        for (const auto& spec : schema()) msg += std::string("\n  ") + spec.key;
        throw ConfigError(msg);
    }
    it->second = value;
}

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
    return it->second;
}

int Config::get_int(const std::string& key) const {
    try {
        return std::stoi(get(key));
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects an integer, got '" + get(key) + "'");
    }
}

double Config::get_double(const std::string& key) const {
    try {
        return std::stod(get(key));
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects a number, got '" + get(key) + "'");
    }
}

uint64_t Config::get_u64(const std::string& key) const {
    try {
        return std::stoull(get(key));
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects an unsigned integer, got '" + get(key) +
                          "'");
    }
}

bool Config::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

std::vector<uint64_t> Config::get_u64_list(const std::string& key) const {
    std::vector<uint64_t> out;
    std::istringstream is(get(key));
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            out.push_back(std::stoull(item));
        } catch (const std::exception&) {
            throw ConfigError("config: " + key + " expects comma-separated integers");
        }
    }
    return out;
}

std::vector<std::string> Config::get_str_list(const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream is(get(key));
    std::string item;
    while (std::getline(is, item, ',')) out.push_back(trim(item));
    if (!out.empty() && out.back().empty()) out.pop_back();
    return out;
}

void Config::resolve() {
    const uint64_t master = get_u64("run.seed");
    uint64_t counter = 100;
    for (const auto& spec : schema()) {
        ++counter;
        auto it = values_.find(spec.key);
        if (it->second == "auto")
            it->second = std::to_string(derive_seed(master, counter));
    }
}

uint64_t Config::content_hash() const { return fnv1a64(dump()); }

std::string Config::dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

} // namespace steerlab
