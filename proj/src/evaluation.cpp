#include "steerlab/evaluation.hpp"

#include <cmath>
#include <limits>

namespace steerlab {

namespace {

void finalize(EvalReport& rep, int n_seeds, int n_instances) {
    double mean = 0.0;
    for (double a : rep.per_seed) mean += a;
    mean /= rep.per_seed.size();
    double var = 0.0;
    for (double a : rep.per_seed) var += (a - mean) * (a - mean);
    var /= rep.per_seed.size();
    rep.accuracy_mean = mean;
    rep.accuracy_std = std::sqrt(var);
    double len = 0.0;
    for (const auto& r : rep.rows) len += r.gen_len;
    rep.mean_gen_len = rep.rows.empty() ? 0.0 : len / (static_cast<double>(n_seeds) * n_instances);
}

} // namespace

uint64_t setup_hash(const SteeringSetup& setup) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& a : setup.adds) {
        h = fnv1a64(site_str(a.site), h ^ static_cast<uint64_t>(a.site.layer));
        h = tensor_hash(a.vec, h);
    }
    for (const auto& a : setup.adaptive) {
        h ^= static_cast<uint64_t>(a.layer) * 0x9e3779b97f4a7c15ull;
        h = tensor_hash(a.b, h);
        h = tensor_hash(a.a, h);
    }
    for (const auto& a : setup.attn_steer) {
        h ^= static_cast<uint64_t>(a.layer) * 0xd1342543de82ef95ull;
        h = tensor_hash(a.vec, h);
    }
    return h;
}

EvalReport evaluate(const WeightStore& store, const ModelConfig& cfg, const SteeringSetup& setup,
                    const std::vector<TaskInstance>& dataset, const EvalConfig& ec) {
    if (dataset.empty()) throw UsageError("evaluate: empty dataset");
    if (ec.seeds.empty()) throw UsageError("evaluate: at least one seed required");

    EvalReport rep;
    rep.temperature = ec.temperature;
    rep.dataset_id = ec.dataset_id;
    rep.params_hash = setup.empty() ? "none" : hex64(setup_hash(setup));

    const int n = static_cast<int>(dataset.size());
    rep.rows.resize(ec.seeds.size() * dataset.size());
    std::string worker_error;

    for (size_t s = 0; s < ec.seeds.size(); ++s) {
        const uint64_t eval_seed = ec.seeds[s];
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < n; ++i) {
            try {
                const auto& inst = dataset[static_cast<size_t>(i)];
                Rng rng(derive_seed(eval_seed, seed_stream::kEval, static_cast<uint64_t>(i)));
                SampleConfig sc{ec.temperature, ec.max_new, vocab::kEoa};
                const auto completion = sample(store, cfg, inst.prompt, sc, rng, setup);
                const auto rec = verify(completion, inst);
                rep.rows[s * dataset.size() + static_cast<size_t>(i)] = {
                    eval_seed, inst.seed, rec.reward, static_cast<int>(completion.size())};
            } catch (const std::exception& e) {
#pragma omp critical
                worker_error = e.what();
            }
        }
        if (!worker_error.empty()) throw TrainingError("evaluate: " + worker_error);
        double correct = 0.0;
        for (int i = 0; i < n; ++i)
            correct += rep.rows[s * dataset.size() + static_cast<size_t>(i)].reward;
        rep.per_seed.push_back(correct / n);
    }
    finalize(rep, static_cast<int>(ec.seeds.size()), n);
    return rep;
}

EvalReport prefix_eval(const WeightStore& store, const ModelConfig& cfg,
                       const std::vector<int>& prefix, const std::vector<TaskInstance>& dataset,
                       const EvalConfig& ec) {
    for (int t : prefix)
        if (t < 0 || t >= cfg.vocab_size)
            throw UsageError("prefix_eval: prefix token outside vocab");
    std::vector<TaskInstance> prefixed = dataset;
    for (auto& inst : prefixed)
        inst.prompt.insert(inst.prompt.end(), prefix.begin(), prefix.end());
    return evaluate(store, cfg, {}, prefixed, ec);
}

double transfer_gain_value(double acc_donor_applied, double acc_base, double acc_own,
                           bool* defined) {
    const double denom = acc_own - acc_base;
    if (denom == 0.0) {
        if (defined) *defined = false;
        return std::numeric_limits<double>::quiet_NaN();
    }
    if (defined) *defined = true;
    return (acc_donor_applied - acc_base) / denom;
}

TransferReport transfer_gain(const WeightStore& recipient, const ModelConfig& cfg,
                             const SteeringParams& donor, const SteeringParams& own,
                             const std::vector<TaskInstance>& dataset, const EvalConfig& ec) {
    // donor vectors must fit the recipient's geometry
    for (const auto& e : donor.entries) {
        validate_site(e.site, cfg);
        if (e.kind == SteerKind::Constant &&
            static_cast<int>(e.s.numel()) != site_vec_len(e.site, cfg))
            throw ConfigError("transfer: donor vector at " + site_str(e.site) + " has length " +
                              std::to_string(e.s.numel()) + ", recipient expects " +
                              std::to_string(site_vec_len(e.site, cfg)));
        if (e.kind == SteerKind::AdaptiveRank1 &&
            (static_cast<int>(e.b.numel()) != cfg.d_model ||
             static_cast<int>(e.a.numel()) != cfg.d_model))
            throw ConfigError("transfer: donor adaptive entry does not match recipient d_model");
    }
    TransferReport rep;
    rep.donor_applied = evaluate(recipient, cfg, donor.setup(), dataset, ec);
    rep.base = evaluate(recipient, cfg, {}, dataset, ec);
    rep.own = evaluate(recipient, cfg, own.setup(), dataset, ec);
    rep.gain = transfer_gain_value(rep.donor_applied.accuracy_mean, rep.base.accuracy_mean,
                                   rep.own.accuracy_mean, &rep.defined);
    return rep;
}

double compose_gain_value(double acc_pair, double acc_i, double acc_j, double acc_all,
                          bool* defined) {
    const double best_single = std::max(acc_i, acc_j);
    const double denom = acc_all - best_single;
    if (denom == 0.0) {
        if (defined) *defined = false;
        return std::numeric_limits<double>::quiet_NaN();
    }
    if (defined) *defined = true;
    return (acc_pair - best_single) / denom;
}

ComposeReport compose_gain(const WeightStore& store, const ModelConfig& cfg,
                           const SteeringParams& si, const SteeringParams& sj, double acc_all,
                           const std::vector<TaskInstance>& dataset, const EvalConfig& ec) {
    // both additions active at once; order does not matter for disjoint sites
    SteeringParams pair;
    pair.entries = si.entries;
    pair.entries.insert(pair.entries.end(), sj.entries.begin(), sj.entries.end());

    ComposeReport rep;
    rep.pair = evaluate(store, cfg, pair.setup(), dataset, ec);
    rep.single_i = evaluate(store, cfg, si.setup(), dataset, ec);
    rep.single_j = evaluate(store, cfg, sj.setup(), dataset, ec);
    rep.acc_all = acc_all;
    rep.gain = compose_gain_value(rep.pair.accuracy_mean, rep.single_i.accuracy_mean,
                                  rep.single_j.accuracy_mean, acc_all, &rep.defined);
    return rep;
}

} // namespace steerlab
