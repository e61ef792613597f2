#include "steerlab/steering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "steerlab/archive.hpp"

namespace steerlab {

void SteeringSpec::validate(const ModelConfig& cfg) const {
    std::set<HookSite> seen;
    for (const auto& s : sites) {
        validate_site(s.site, cfg);
        if (!seen.insert(s.site).second)
            throw ConfigError("steering spec: duplicate entry for site " + site_str(s.site) +
                              " at layer " + std::to_string(s.site.layer));
        if (s.kind == SteerKind::AdaptiveRank1 && s.site.site != Site::MlpOut)
            throw ConfigError("steering spec: adaptive rank-1 entries attach at mlp_out only");
    }
}

SteeringSetup SteeringParams::setup(std::optional<float> force_gate) const {
    SteeringSetup out;
    for (const auto& e : entries) {
        if (e.kind == SteerKind::Constant) {
            out.adds.push_back({e.site, e.s});
        } else {
            out.adaptive.push_back({e.site.layer, e.b, e.a, force_gate});
        }
    }
    return out;
}

std::string SteeringParams::param_name(size_t entry, const std::string& tensor) const {
    const auto& e = entries[entry];
    return "steer." + std::to_string(e.site.layer) + "." + site_str(e.site) + "." + tensor;
}

SteeringParams init_steering(const SteeringSpec& spec, const ModelConfig& cfg) {
    spec.validate(cfg);
    SteeringParams p;
    for (const auto& s : spec.sites) {
        SteeringParams::Entry e;
        e.site = s.site;
        e.kind = s.kind;
        // zero-init: the first rollout distribution is exactly the base model
        if (s.kind == SteerKind::Constant) {
            e.s = Tensor::zeros({site_vec_len(s.site, cfg)});
        } else {
            e.b = Tensor::zeros({cfg.d_model});
            e.a = Tensor::zeros({cfg.d_model});
        }
        p.entries.push_back(std::move(e));
    }
    return p;
}

void save_steering(const std::string& path, const SteeringParams& params) {
    std::map<std::string, Tensor> tensors;
    for (size_t i = 0; i < params.entries.size(); ++i) {
        const auto& e = params.entries[i];
        if (e.kind == SteerKind::Constant) {
            tensors.emplace(params.param_name(i, "s"), e.s);
        } else {
            tensors.emplace(params.param_name(i, "b"), e.b);
            tensors.emplace(params.param_name(i, "a"), e.a);
        }
    }
    save_tensors(path, tensors);
    nlohmann::json meta{{"donor_model", params.donor_model},
                        {"training_seed", params.training_seed},
                        {"step_count", params.step_count}};
    std::ofstream mf(path + ".meta.json", std::ios::trunc);
    mf << meta.dump(2) << "\n";
}

SteeringParams load_steering(const std::string& path, const ModelConfig& cfg) {
    const auto tensors = load_tensors(path);
    // collect by (layer, site) in archive name order
    std::map<std::pair<int, std::string>, std::map<std::string, Tensor>> groups;
    for (const auto& [name, t] : tensors) {
        // steer.<layer>.<site>.<tensor>
        if (name.rfind("steer.", 0) != 0) throw FormatError("steering archive: bad name " + name);
        const size_t p1 = name.find('.', 6);
        const size_t p2 = name.rfind('.');
        if (p1 == std::string::npos || p2 == std::string::npos || p2 <= p1)
            throw FormatError("steering archive: bad name " + name);
        const int layer = std::stoi(name.substr(6, p1 - 6));
        const std::string site = name.substr(p1 + 1, p2 - p1 - 1);
        const std::string tensor = name.substr(p2 + 1);
        groups[{layer, site}][tensor] = t;
    }
    SteeringParams params;
    for (auto& [key, tensors_by_kind] : groups) {
        SteeringParams::Entry e;
        e.site = parse_site(key.second);
        e.site.layer = key.first;
        validate_site(e.site, cfg);
        if (tensors_by_kind.count("s")) {
            e.kind = SteerKind::Constant;
            e.s = tensors_by_kind.at("s");
            if (static_cast<int>(e.s.numel()) != site_vec_len(e.site, cfg))
                throw FormatError("steering archive: vector length mismatch at " + key.second);
        } else if (tensors_by_kind.count("b") && tensors_by_kind.count("a")) {
            e.kind = SteerKind::AdaptiveRank1;
            e.b = tensors_by_kind.at("b");
            e.a = tensors_by_kind.at("a");
            if (static_cast<int>(e.b.numel()) != cfg.d_model ||
                static_cast<int>(e.a.numel()) != cfg.d_model)
                throw FormatError("steering archive: adaptive shape mismatch at " + key.second);
        } else {
            throw FormatError("steering archive: incomplete entry for site " + key.second);
        }
        params.entries.push_back(std::move(e));
    }
    std::ifstream mf(path + ".meta.json");
    if (mf) {
        nlohmann::json meta = nlohmann::json::parse(mf, nullptr, true);
        params.donor_model = meta.value("donor_model", std::string("unknown"));
        params.training_seed = meta.value("training_seed", uint64_t{0});
        params.step_count = meta.value("step_count", 0);
    }
    return params;
}

SteeringSpec single_layer_spec(int layer) {
    return {{{{Site::ResidPost, layer, -1}, SteerKind::Constant, true}}};
}

SteeringSpec all_layer_spec(const ModelConfig& cfg) {
    SteeringSpec spec;
    for (int l = 0; l < cfg.n_layers; ++l)
        spec.sites.push_back({{Site::ResidPost, l, -1}, SteerKind::Constant, true});
    return spec;
}

SteeringSpec adaptive_spec(int layer) {
    return {{{{Site::MlpOut, layer, -1}, SteerKind::AdaptiveRank1, true}}};
}

std::vector<float> compute_advantages(const std::vector<float>& rewards) {
    if (rewards.size() < 2)
        throw ConfigError("advantages need at least 2 samples per prompt, got " +
                          std::to_string(rewards.size()));
    double mean = 0.0;
    for (float r : rewards) mean += static_cast<double>(r);
    mean /= static_cast<double>(rewards.size());
    std::vector<float> adv(rewards.size());
    for (size_t i = 0; i < rewards.size(); ++i)
        adv[i] = rewards[i] - static_cast<float>(mean);
    return adv;
}

Tensor adaptive_apply(const Tensor& x, const Tensor& b, const Tensor& a,
                      std::vector<float>* gates_out) {
    if (x.rank() != 2 || b.rank() != 1 || a.rank() != 1 || x.dim(1) != b.dim(0) ||
        x.dim(1) != a.dim(0))
        throw ShapeError("adaptive_apply: shape mismatch");
    const int T = x.dim(0), d = x.dim(1);
    Tensor out({T, d});
    if (gates_out) gates_out->clear();
    for (int t = 0; t < T; ++t) {
        float gate = 0.0f;
        for (int j = 0; j < d; ++j) gate += a.at(j) * x.at(t, j);
        if (gates_out) gates_out->push_back(gate);
        for (int j = 0; j < d; ++j) out.at(t, j) = gate * b.at(j);
    }
    return out;
}

// ---------------------------------------------------------------------------
// RLOO

namespace {

// Steering parameters as trainable tape leaves; ids aligned with entries.
struct SteerOnTape {
    HooksT<float> hooks;
    std::vector<std::array<Tape::Id, 2>> ids; // [s,-1] or [b,a]
};

SteerOnTape steering_on_tape(Tape& tape, const SteeringParams& params, bool trainable) {
    SteerOnTape out;
    for (const auto& e : params.entries) {
        if (e.kind == SteerKind::Constant) {
            const auto id = tape.leaf(e.s, trainable && tape.recording());
            out.hooks.adds.push_back({e.site, id});
            out.ids.push_back({id, -1});
        } else {
            const auto bid = tape.leaf(e.b, trainable && tape.recording());
            const auto aid = tape.leaf(e.a, trainable && tape.recording());
            out.hooks.adaptive.push_back({e.site.layer, bid, aid, std::nullopt});
            out.ids.push_back({bid, aid});
        }
    }
    return out;
}

std::vector<Tensor> zero_like_params(const SteeringParams& params) {
    std::vector<Tensor> out;
    for (const auto& e : params.entries) {
        if (e.kind == SteerKind::Constant) {
            out.push_back(Tensor::zeros(e.s.shape));
        } else {
            out.push_back(Tensor::zeros(e.b.shape));
            out.push_back(Tensor::zeros(e.a.shape));
        }
    }
    return out;
}

// Flat list of (entry name, mutable tensor ref) for the optimizer.
std::vector<std::pair<std::string, Tensor*>> named_params(SteeringParams& params) {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (size_t i = 0; i < params.entries.size(); ++i) {
        auto& e = params.entries[i];
        if (e.kind == SteerKind::Constant) {
            out.emplace_back(params.param_name(i, "s"), &e.s);
        } else {
            out.emplace_back(params.param_name(i, "b"), &e.b);
            out.emplace_back(params.param_name(i, "a"), &e.a);
        }
    }
    return out;
}

} // namespace

std::vector<Tensor> rloo_gradient(const WeightStore& store, const ModelConfig& cfg,
                                  const SteeringParams& params, const RolloutBatch& batch,
                                  float temperature, double* surrogate_out) {
    std::vector<Tensor> grad = zero_like_params(params);
    double surrogate = 0.0;
    int total = 0;
    for (const auto& pr : batch.prompts) total += static_cast<int>(pr.completions.size());
    if (total == 0) throw UsageError("rloo_gradient: empty rollout batch");
    const float inv_total = 1.0f / static_cast<float>(total);

    struct Job {
        const TaskInstance* inst;
        const std::vector<int>* completion;
        float advantage;
    };
    std::vector<Job> jobs;
    for (const auto& pr : batch.prompts)
        for (size_t n = 0; n < pr.completions.size(); ++n)
            if (pr.advantages[n] != 0.0f && !pr.completions[n].empty())
                jobs.push_back({&pr.instance, &pr.completions[n], pr.advantages[n]});

    std::vector<std::vector<Tensor>> job_grads(jobs.size());
    std::vector<double> job_logprob(jobs.size(), 0.0);
    std::string worker_error;

#pragma omp parallel for schedule(dynamic)
    for (long ji = 0; ji < static_cast<long>(jobs.size()); ++ji) {
        try {
            const Job& job = jobs[static_cast<size_t>(ji)];
            std::vector<int> seq = job.inst->prompt;
            seq.insert(seq.end(), job.completion->begin(), job.completion->end());
            Tape tape(true);
            auto w = weights_on_tape(tape, store, cfg, false);
            auto st = steering_on_tape(tape, params, true);
            auto ids = model_forward(tape, w, cfg, seq, st.hooks, {});
            Tape::Id logits = ids.logits;
            if (temperature != 1.0f) {
                if (temperature <= 0.0f)
                    throw UsageError("rloo_gradient: temperature must be positive");
                logits = tape.scale(logits, 1.0f / temperature);
            }
            std::vector<int> targets(seq.size(), -1);
            for (size_t t = job.inst->prompt.size() - 1; t + 1 < seq.size(); ++t)
                targets[t] = seq[t + 1];
            const auto lp = tape.seq_log_prob(logits, targets);
            job_logprob[static_cast<size_t>(ji)] = static_cast<double>(tape.val(lp).at(0));
            tape.backward(lp);
            auto& g = job_grads[static_cast<size_t>(ji)];
            for (const auto& pair : st.ids) {
                g.push_back(tape.grad(pair[0]));
                if (pair[1] >= 0) g.push_back(tape.grad(pair[1]));
            }
        } catch (const std::exception& e) {
#pragma omp critical
            worker_error = e.what();
        }
    }
    if (!worker_error.empty()) throw TrainingError("rloo: " + worker_error);

    // fixed order: job index, then parameter index
    for (size_t ji = 0; ji < jobs.size(); ++ji) {
        const float wgt = jobs[ji].advantage * inv_total;
        surrogate += static_cast<double>(jobs[ji].advantage) * job_logprob[ji] *
                     static_cast<double>(inv_total);
        for (size_t pi = 0; pi < grad.size(); ++pi)
            for (size_t k = 0; k < grad[pi].data.size(); ++k)
                grad[pi].data[k] += wgt * job_grads[ji][pi].data[k];
    }
    if (surrogate_out) *surrogate_out = surrogate;
    return grad;
}

RolloutBatch rloo_step(const WeightStore& store, const ModelConfig& cfg, SteeringParams& params,
                       Adam& opt, int step_index, const RlooConfig& rc, RlooStats* stats) {
    const int P = rc.prompts_per_step, N = rc.gens_per_prompt;
    if (N < 2) throw ConfigError("rloo: gens_per_prompt must be >= 2 for the baseline");
    if (P < 1) throw ConfigError("rloo: prompts_per_step must be >= 1");

    const SteeringSetup setup = params.setup();

    RolloutBatch batch;
    batch.prompts.resize(static_cast<size_t>(P));
    for (int p = 0; p < P; ++p) {
        const uint64_t inst_seed = derive_seed(
            rc.seed, seed_stream::kRollout,
            static_cast<uint64_t>(step_index) * static_cast<uint64_t>(P) + static_cast<uint64_t>(p));
        batch.prompts[static_cast<size_t>(p)].instance = gen_task(inst_seed, rc.level);
        batch.prompts[static_cast<size_t>(p)].completions.resize(static_cast<size_t>(N));
        batch.prompts[static_cast<size_t>(p)].records.resize(static_cast<size_t>(N));
        batch.prompts[static_cast<size_t>(p)].logprobs.resize(static_cast<size_t>(N), 0.0f);
    }

    std::string worker_error;
#pragma omp parallel for schedule(dynamic) collapse(2)
    for (int p = 0; p < P; ++p) {
        for (int n = 0; n < N; ++n) {
            try {
                auto& pr = batch.prompts[static_cast<size_t>(p)];
                const uint64_t sample_seed = derive_seed(
                    rc.seed, seed_stream::kRolloutSample,
                    (static_cast<uint64_t>(step_index) * static_cast<uint64_t>(P) +
                     static_cast<uint64_t>(p)) *
                            static_cast<uint64_t>(N) +
                        static_cast<uint64_t>(n));
                Rng rng(sample_seed);
                std::vector<float> lps;
                SampleConfig sc{rc.temperature, rc.max_new, vocab::kEoa};
                auto completion = sample(store, cfg, pr.instance.prompt, sc, rng, setup, &lps);
                double lp = 0.0;
                for (float v : lps) lp += static_cast<double>(v);
                pr.completions[static_cast<size_t>(n)] = completion;
                pr.records[static_cast<size_t>(n)] = verify(completion, pr.instance);
                pr.logprobs[static_cast<size_t>(n)] = static_cast<float>(lp);
            } catch (const std::exception& e) {
#pragma omp critical
                worker_error = e.what();
            }
        }
    }
    if (!worker_error.empty()) throw TrainingError("rloo rollout: " + worker_error);

    double reward_sum = 0.0, abs_adv_sum = 0.0;
    for (auto& pr : batch.prompts) {
        std::vector<float> rewards;
        rewards.reserve(static_cast<size_t>(N));
        for (const auto& rec : pr.records) rewards.push_back(static_cast<float>(rec.reward));
        pr.advantages = compute_advantages(rewards);
        for (int n = 0; n < N; ++n) {
            reward_sum += static_cast<double>(rewards[static_cast<size_t>(n)]);
            abs_adv_sum += std::abs(static_cast<double>(pr.advantages[static_cast<size_t>(n)]));
        }
    }

    const auto grads = rloo_gradient(store, cfg, params, batch, rc.temperature);

    double norm_sq = 0.0;
    for (const auto& g : grads)
        for (float v : g.data) norm_sq += static_cast<double>(v) * v;
    if (std::isnan(norm_sq))
        throw TrainingError("rloo: NaN gradient at step " + std::to_string(step_index));

    // ascend the surrogate: Adam minimizes, so feed it the negated gradient
    opt.step_begin();
    auto named = named_params(params);
    for (size_t pi = 0; pi < named.size(); ++pi) {
        Tensor neg = grads[pi];
        for (auto& v : neg.data) v = -v;
        opt.update(named[pi].first, *named[pi].second, neg);
    }

    if (stats) {
        stats->mean_reward = static_cast<float>(reward_sum / (P * N));
        stats->mean_abs_advantage = static_cast<float>(abs_adv_sum / (P * N));
        stats->grad_norm = static_cast<float>(std::sqrt(norm_sq));
    }
    return batch;
}

SteerTrainResult train_steering(const WeightStore& store, const ModelConfig& cfg,
                                const SteeringSpec& spec, const RlooConfig& rc, int steps) {
    SteerTrainResult res;
    res.params = init_steering(spec, cfg);
    res.params.donor_model = hex64(store_hash(store));
    res.params.training_seed = rc.seed;
    if (steps > 0) {
        // Rank-1 entries cannot leave (b=0, a=0) by gradient: the update is
        // b*(a.u), so both partials vanish there. Standard low-rank init:
        // direction zero, gate row small random. The first rollout is still
        // exactly the base model because b stays zero.
        Rng arng(derive_seed(rc.seed, seed_stream::kSteerInit));
        const float scale = 0.5f / std::sqrt(static_cast<float>(cfg.d_model));
        for (auto& e : res.params.entries)
            if (e.kind == SteerKind::AdaptiveRank1)
                e.a = Tensor::randn({cfg.d_model}, arng, scale);
    }
    Adam opt(rc.adam);
    for (int step = 0; step < steps; ++step) {
        RlooStats stats;
        rloo_step(store, cfg, res.params, opt, step, rc, &stats);
        res.curve.push_back(stats);
    }
    res.params.step_count = steps;
    return res;
}

} // namespace steerlab
