#include "steerlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "steerlab/kernels.hpp"

namespace steerlab {

double cosine_guarded(const float* a, const float* b, int n, bool* zero_flag) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (int i = 0; i < n; ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0.0 || bb == 0.0) {
        if (zero_flag) *zero_flag = true;
        return 0.0;
    }
    if (zero_flag) *zero_flag = false;
    return ab / std::sqrt(aa * bb);
}

double cosine_guarded(const std::vector<double>& a, const std::vector<double>& b,
                      bool* zero_flag) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) {
        if (zero_flag) *zero_flag = true;
        return 0.0;
    }
    if (zero_flag) *zero_flag = false;
    return ab / std::sqrt(aa * bb);
}

std::vector<double> mean_rows(const std::vector<const float*>& rows, int n) {
    if (rows.empty()) return {};
    std::vector<double> mean(static_cast<size_t>(n));
    // centered accumulation: identical rows give back the row, bit for bit
    for (int j = 0; j < n; ++j) {
        const double ref = static_cast<double>(rows[0][j]);
        double acc = 0.0;
        for (const float* r : rows) acc += static_cast<double>(r[j]) - ref;
        mean[static_cast<size_t>(j)] = ref + acc / static_cast<double>(rows.size());
    }
    return mean;
}

// ---------------------------------------------------------------------------

LensReport logit_lens(const Tensor& v, const WeightStore& store, const ModelConfig& cfg,
                      int top_k, bool apply_final_norm, bool rank_by_cosine) {
    if (static_cast<int>(v.numel()) != cfg.d_model)
        throw ShapeError("logit_lens: direction must have length d_model");
    const auto& unembed = store.at("unembed");

    Tensor probe = v;
    if (apply_final_norm) {
        const auto& gain = store.at("final_norm.gain");
        Tensor out({1, cfg.d_model});
        kernels::rms_norm_rows(1, cfg.d_model, v.data.data(), gain.data.data(), cfg.norm_eps,
                               out.data.data());
        probe.data = out.data;
    }

    LensReport rep;
    rep.final_norm_applied = apply_final_norm;
    bool v_zero = true;
    for (float x : probe.data) v_zero = v_zero && x == 0.0f;
    rep.zero_vector = v_zero;

    rep.entries.reserve(static_cast<size_t>(cfg.vocab_size));
    for (int t = 0; t < cfg.vocab_size; ++t) {
        LensEntry e;
        e.token = t;
        e.token_text = t < vocab::kSize ? vocab::token_str(t) : std::to_string(t);
        double dot = 0.0;
        for (int j = 0; j < cfg.d_model; ++j)
            dot += static_cast<double>(probe.data[static_cast<size_t>(j)]) * unembed.at(t, j);
        e.dot = dot;
        e.cosine = cosine_guarded(probe.data.data(), unembed.row(t), cfg.d_model);
        rep.entries.push_back(std::move(e));
    }
    std::stable_sort(rep.entries.begin(), rep.entries.end(),
                     [rank_by_cosine](const LensEntry& a, const LensEntry& b) {
                         const double sa = rank_by_cosine ? a.cosine : a.dot;
                         const double sb = rank_by_cosine ? b.cosine : b.dot;
                         if (sa != sb) return sa > sb;
                         return a.token < b.token;
                     });
    if (top_k > cfg.vocab_size) {
        rep.top_k_clamped = true;
        top_k = cfg.vocab_size;
    }
    if (top_k < static_cast<int>(rep.entries.size()))
        rep.entries.resize(static_cast<size_t>(std::max(top_k, 0)));
    return rep;
}

// ---------------------------------------------------------------------------

std::vector<DeltaPRow> token_prob_delta(const WeightStore& store, const ModelConfig& cfg,
                                        const SteeringSetup& setup,
                                        const std::vector<std::vector<int>>& prompts) {
    std::vector<DeltaPRow> rows;
    for (size_t pi = 0; pi < prompts.size(); ++pi) {
        const auto& prompt = prompts[pi];
        const auto base = forward(store, cfg, prompt, {}, {});
        const auto steered = forward(store, cfg, prompt, setup, {});
        const int T = base.logits.dim(0), V = base.logits.dim(1);
        Tensor pb = base.logits, ps = steered.logits;
        kernels::softmax_rows(T, V, pb.data.data());
        kernels::softmax_rows(T, V, ps.data.data());
        for (int t = 0; t < T; ++t)
            for (int tok = 0; tok < V; ++tok) {
                DeltaPRow r;
                r.prompt_index = static_cast<int>(pi);
                r.position = t;
                r.first_generated = (t == T - 1);
                r.token = tok;
                r.p_base = pb.at(t, tok);
                r.p_steered = ps.at(t, tok);
                r.delta = static_cast<double>(ps.at(t, tok)) - static_cast<double>(pb.at(t, tok));
                rows.push_back(r);
            }
    }
    return rows;
}

double median(std::vector<double> values) {
    if (values.empty()) throw UsageError("median of empty set");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// ---------------------------------------------------------------------------

std::map<int, Tensor> delta_f(const WeightStore& store, const ModelConfig& cfg, const Tensor& vec,
                              int inject, const std::vector<int>& tokens,
                              const std::vector<int>& targets) {
    if (inject < 0 || inject >= cfg.n_layers) throw UsageError("delta_f: inject layer out of range");
    for (int t : targets)
        if (t < inject || t >= cfg.n_layers)
            throw UsageError("delta_f: target layer " + std::to_string(t) +
                             " must satisfy inject <= target < n_layers");

    TraceRequest req;
    for (int t : targets)
        if (t != inject) req.resid_post.push_back(t);

    std::map<int, Tensor> out;
    const int T = static_cast<int>(tokens.size());
    for (int t : targets) {
        if (t != inject) continue;
        // at the injection layer the shift is the vector itself, exactly
        Tensor df({T, cfg.d_model});
        for (int i = 0; i < T; ++i)
            for (int j = 0; j < cfg.d_model; ++j) df.at(i, j) = vec.at(j);
        out.emplace(t, std::move(df));
    }
    if (req.resid_post.empty()) return out;

    SteeringSetup setup;
    setup.adds.push_back({{Site::ResidPost, inject, -1}, vec});
    const auto base = forward(store, cfg, tokens, {}, req);
    const auto steered = forward(store, cfg, tokens, setup, req);
    for (int t : req.resid_post) {
        const auto& fb = base.trace.resid_post.at(t);
        const auto& fs = steered.trace.resid_post.at(t);
        Tensor df(fb.shape);
        for (size_t i = 0; i < df.data.size(); ++i) df.data[i] = fs.data[i] - fb.data[i];
        out.emplace(t, std::move(df));
    }
    return out;
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

} // namespace

PersistenceResult persistence_matrices(const WeightStore& store, const ModelConfig& cfg,
                                       const std::vector<Tensor>& layer_vecs,
                                       const std::vector<std::vector<int>>& prompts) {
    const int L = cfg.n_layers;
    if (static_cast<int>(layer_vecs.size()) != L)
        throw UsageError("persistence: need one (possibly empty) vector slot per layer");

    PersistenceResult res;
    res.diff_diff.assign(static_cast<size_t>(L), std::vector<double>(static_cast<size_t>(L), kNaN));
    res.diff_vector.assign(static_cast<size_t>(L), std::vector<double>(static_cast<size_t>(L), kNaN));
    for (int l = 0; l < L; ++l)
        if (!layer_vecs[static_cast<size_t>(l)].data.empty()) res.layers_present.push_back(l);

    for (int i : res.layers_present) {
        std::vector<int> targets;
        for (int l = i; l < L; ++l) targets.push_back(l);
        // gather per-position shifts for every prompt
        std::map<int, std::vector<Tensor>> shifts; // target -> per-prompt [T,d]
        for (const auto& prompt : prompts) {
            auto df = delta_f(store, cfg, layer_vecs[static_cast<size_t>(i)], i, prompt, targets);
            for (auto& [l, t] : df) shifts[l].push_back(std::move(t));
        }
        for (int l : targets) {
            std::vector<const float*> rows;
            for (const auto& t : shifts[l])
                for (int r = 0; r < t.dim(0); ++r) rows.push_back(t.row(r));
            const auto mean = mean_rows(rows, cfg.d_model);
            std::vector<float> mean_f(mean.begin(), mean.end());

            double dd = 0.0, dv = 0.0;
            const bool have_vec = !layer_vecs[static_cast<size_t>(l)].data.empty();
            for (const float* r : rows) {
                dd += cosine_guarded(r, mean_f.data(), cfg.d_model);
                if (have_vec)
                    dv += cosine_guarded(r, layer_vecs[static_cast<size_t>(l)].data.data(),
                                         cfg.d_model);
            }
            const double n = static_cast<double>(rows.size());
            res.diff_diff[static_cast<size_t>(i)][static_cast<size_t>(l)] = dd / n;
            if (have_vec)
                res.diff_vector[static_cast<size_t>(i)][static_cast<size_t>(l)] = dv / n;
        }
    }
    return res;
}

BiasSimilarityResult bias_similarity_matrix(const WeightStore& store, const ModelConfig& cfg,
                                            const std::vector<Tensor>& layer_vecs,
                                            const std::vector<std::vector<int>>& prompts) {
    const int L = cfg.n_layers;
    if (static_cast<int>(layer_vecs.size()) != L)
        throw UsageError("bias similarity: need one (possibly empty) vector slot per layer");

    BiasSimilarityResult res;
    for (int l = 0; l < L; ++l)
        if (!layer_vecs[static_cast<size_t>(l)].data.empty()) res.layers_present.push_back(l);

    for (int i : res.layers_present) {
        std::vector<const float*> rows;
        std::vector<Tensor> keep;
        for (const auto& prompt : prompts) {
            auto df = delta_f(store, cfg, layer_vecs[static_cast<size_t>(i)], i, prompt, {L - 1});
            keep.push_back(std::move(df.at(L - 1)));
        }
        for (const auto& t : keep)
            for (int r = 0; r < t.dim(0); ++r) rows.push_back(t.row(r));
        const auto mean = mean_rows(rows, cfg.d_model);
        Tensor shift({cfg.d_model});
        for (int j = 0; j < cfg.d_model; ++j) shift.at(j) = static_cast<float>(mean[static_cast<size_t>(j)]);
        res.mean_shifts.push_back(std::move(shift));
    }

    const size_t n = res.layers_present.size();
    res.cosine.assign(n, std::vector<double>(n, kNaN));
    for (size_t a = 0; a < n; ++a)
        for (size_t b = a; b < n; ++b) {
            const double c = cosine_guarded(res.mean_shifts[a].data.data(),
                                            res.mean_shifts[b].data.data(), cfg.d_model);
            res.cosine[a][b] = c;
            res.cosine[b][a] = c;
        }
    return res;
}

// ---------------------------------------------------------------------------

std::vector<GateTraceRow> gate_magnitude_trace(const WeightStore& store, const ModelConfig& cfg,
                                               const SteeringParams& params,
                                               const std::vector<TaskInstance>& instances,
                                               float temperature, int max_new, uint64_t seed) {
    bool has_adaptive = false;
    for (const auto& e : params.entries) has_adaptive |= e.kind == SteerKind::AdaptiveRank1;
    if (!has_adaptive) throw UsageError("gate trace: params carry no adaptive entry");

    const SteeringSetup setup = params.setup();
    std::vector<GateTraceRow> rows;
    for (size_t i = 0; i < instances.size(); ++i) {
        const auto& inst = instances[i];
        Rng rng(derive_seed(seed, seed_stream::kEval, static_cast<uint64_t>(i)));
        SampleConfig sc{temperature, max_new, vocab::kEoa};
        const auto completion = sample(store, cfg, inst.prompt, sc, rng, setup);
        std::vector<int> seq = inst.prompt;
        seq.insert(seq.end(), completion.begin(), completion.end());

        TraceRequest req;
        req.gates = true;
        const auto fwd = forward(store, cfg, seq, setup, req);
        for (const auto& [layer, gates] : fwd.trace.gates) {
            (void)layer; // one adaptive layer per trace run in practice
            for (size_t pos = 0; pos < gates.size(); ++pos) {
                GateTraceRow r;
                r.prompt_id = inst.seed;
                r.position = static_cast<int>(pos);
                r.token = seq[pos];
                r.segment = position_segment(seq, prompt_len(inst.level), static_cast<int>(pos));
                r.gate = gates[pos];
                rows.push_back(r);
            }
        }
    }
    return rows;
}

} // namespace steerlab
