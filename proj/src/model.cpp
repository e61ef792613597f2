#include "steerlab/model.hpp"

#include <algorithm>
#include <cmath>

namespace steerlab {

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
    if (n_heads < 1 || d_head < 1) throw ConfigError("model: heads must be positive");
    if (n_heads * d_head != d_model)
        throw ConfigError("model: n_heads * d_head = " + std::to_string(n_heads * d_head) +
                          " must equal d_model = " + std::to_string(d_model));
    if (d_head % 2 != 0) throw ConfigError("model: d_head must be even for rotary positions");
    if (d_ff < 1) throw ConfigError("model: d_ff must be >= 1");
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    if (max_seq_len < 2) throw ConfigError("model: max_seq_len must be >= 2");
    if (pos_scheme != "rotary")
        throw ConfigError("model: unknown positional scheme '" + pos_scheme + "'");
}

std::vector<std::string> canonical_param_names(const ModelConfig& cfg) {
    std::vector<std::string> names = {"embed", "unembed", "final_norm.gain"};
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        for (const char* s : {"attn.norm.gain", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                              "mlp.norm.gain", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"})
            names.push_back(p + s);
    }
    return names;
}

Shape param_shape(const ModelConfig& cfg, const std::string& name) {
    const int d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;
    auto ends_with = [&](const char* suffix) {
        const std::string s(suffix);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (name == "embed" || name == "unembed") return {v, d};
    if (name == "final_norm.gain") return {d};
    if (ends_with(".norm.gain")) return {d};
    if (ends_with(".wq") || ends_with(".wk") || ends_with(".wv") || ends_with(".wo")) return {d, d};
    if (ends_with(".w1")) return {d, f};
    if (ends_with(".b1")) return {f};
    if (ends_with(".w2")) return {f, d};
    if (ends_with(".b2")) return {d};
    throw UsageError("unknown parameter name: " + name);
}

size_t param_count(const ModelConfig& cfg) {
    const size_t d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size, L = cfg.n_layers;
    return 2 * v * d + d + L * (4 * d * d + 2 * d * f + f + 3 * d);
}

WeightStore init_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    WeightStore store;
    Rng rng(derive_seed(seed, seed_stream::kModelInit));
    // canonical order drives the RNG stream, so same seed => identical store
    for (const auto& name : canonical_param_names(cfg)) {
        const Shape sh = param_shape(cfg, name);
        const bool is_gain = name.find("norm.gain") != std::string::npos;
        const bool is_bias = name.size() >= 3 && name[name.size() - 2] == 'b' &&
                             (name.back() == '1' || name.back() == '2');
        if (is_gain)
            store.emplace(name, Tensor::full(sh, 1.0f));
        else if (is_bias)
            store.emplace(name, Tensor::zeros(sh));
        else
            store.emplace(name, Tensor::randn(sh, rng, 0.02f));
    }
    return store;
}

void check_store_matches(const WeightStore& store, const ModelConfig& cfg) {
    const auto names = canonical_param_names(cfg);
    for (const auto& name : names) {
        auto it = store.find(name);
        if (it == store.end()) throw FormatError("weight store: missing parameter " + name);
        if (it->second.shape != param_shape(cfg, name))
            throw FormatError("weight store: " + name + " has shape " +
                              shape_str(it->second.shape) + ", expected " +
                              shape_str(param_shape(cfg, name)));
    }
    if (store.size() != names.size()) {
        for (const auto& [name, t] : store)
            if (std::find(names.begin(), names.end(), name) == names.end())
                throw FormatError("weight store: unexpected parameter " + name);
    }
}

uint64_t store_hash(const WeightStore& store) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : store) { // std::map: name order is canonical
        h = fnv1a64(name.data(), name.size(), h);
        h = tensor_hash(t, h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// hook sites

bool site_needs_head(Site s) {
    return s == Site::QIn || s == Site::KIn || s == Site::VIn || s == Site::HeadOut;
}

std::string site_str(const HookSite& s) {
    std::string base;
    switch (s.site) {
        case Site::ResidPost: base = "resid_post"; break;
        case Site::ResidPostAttn: base = "resid_post_attn"; break;
        case Site::AfterInputNorm: base = "after_input_norm"; break;
        case Site::QIn: base = "q_in"; break;
        case Site::KIn: base = "k_in"; break;
        case Site::VIn: base = "v_in"; break;
        case Site::HeadOut: base = "head_out"; break;
        case Site::PreUnembed: base = "pre_unembed"; break;
        case Site::MlpOut: base = "mlp_out"; break;
    }
    if (site_needs_head(s.site)) base += std::to_string(s.head);
    return base;
}

HookSite parse_site(const std::string& s) {
    static const std::pair<const char*, Site> kHeadSites[] = {
        {"q_in", Site::QIn}, {"k_in", Site::KIn}, {"v_in", Site::VIn}, {"head_out", Site::HeadOut}};
    static const std::pair<const char*, Site> kPlainSites[] = {
        {"resid_post_attn", Site::ResidPostAttn}, {"resid_post", Site::ResidPost},
        {"after_input_norm", Site::AfterInputNorm}, {"pre_unembed", Site::PreUnembed},
        {"mlp_out", Site::MlpOut}};
    for (const auto& [name, site] : kPlainSites)
        if (s == name) return {site, 0, -1};
    for (const auto& [name, site] : kHeadSites) {
        const std::string prefix(name);
        if (s.size() > prefix.size() && s.compare(0, prefix.size(), prefix) == 0)
            return {site, 0, std::stoi(s.substr(prefix.size()))};
    }
    throw UsageError("unknown hook site: " + s);
}

void validate_site(const HookSite& s, const ModelConfig& cfg) {
    if (s.site != Site::PreUnembed && (s.layer < 0 || s.layer >= cfg.n_layers))
        throw UsageError("hook site layer " + std::to_string(s.layer) + " out of range for " +
                         std::to_string(cfg.n_layers) + " layers");
    if (site_needs_head(s.site) && (s.head < 0 || s.head >= cfg.n_heads))
        throw UsageError("hook site head " + std::to_string(s.head) + " out of range for " +
                         std::to_string(cfg.n_heads) + " heads");
}

int site_vec_len(const HookSite& s, const ModelConfig& cfg) {
    return s.site == Site::HeadOut ? cfg.d_head : cfg.d_model;
}

// ---------------------------------------------------------------------------
// forward

template <class S>
TapeWeightsT<S> weights_on_tape(TapeT<S>& tape, const WeightStoreT<S>& store,
                                const ModelConfig& cfg, bool trainable) {
    TapeWeightsT<S> w;
    auto get = [&](const std::string& name) {
        auto it = store.find(name);
        if (it == store.end()) throw UsageError("weight store missing " + name);
        auto id = tape.external(&it->second, trainable);
        w.named.emplace_back(name, id);
        return id;
    };
    w.embed = get("embed");
    w.unembed = get("unembed");
    w.final_gain = get("final_norm.gain");
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        typename TapeWeightsT<S>::Layer lw;
        lw.attn_gain = get(p + "attn.norm.gain");
        lw.wq = get(p + "attn.wq");
        lw.wk = get(p + "attn.wk");
        lw.wv = get(p + "attn.wv");
        lw.wo = get(p + "attn.wo");
        lw.mlp_gain = get(p + "mlp.norm.gain");
        lw.w1 = get(p + "mlp.w1");
        lw.b1 = get(p + "mlp.b1");
        lw.w2 = get(p + "mlp.w2");
        lw.b2 = get(p + "mlp.b2");
        w.layers.push_back(lw);
    }
    return w;
}

template <class S>
HooksT<S> hooks_on_tape(TapeT<S>& tape, const SteeringSetup& setup, const ModelConfig& cfg) {
    HooksT<S> h;
    auto put = [&](const Tensor& t) {
        if constexpr (std::is_same_v<S, float>)
            return tape.leaf(t, false);
        else
            return tape.leaf(t.template cast<S>(), false);
    };
    for (const auto& a : setup.adds) {
        validate_site(a.site, cfg);
        if (static_cast<int>(a.vec.numel()) != site_vec_len(a.site, cfg))
            throw ShapeError("intervention at " + site_str(a.site) + " expects length " +
                             std::to_string(site_vec_len(a.site, cfg)) + ", got " +
                             std::to_string(a.vec.numel()));
        h.adds.push_back({a.site, put(a.vec)});
    }
    for (const auto& a : setup.adaptive) {
        if (a.layer < 0 || a.layer >= cfg.n_layers)
            throw UsageError("adaptive steering layer out of range");
        h.adaptive.push_back({a.layer, put(a.b), put(a.a),
                              a.force_gate ? std::optional<S>(static_cast<S>(*a.force_gate))
                                           : std::nullopt});
    }
    for (const auto& a : setup.attn_steer) {
        if (a.layer < 0 || a.layer >= cfg.n_layers)
            throw UsageError("attention steering layer out of range");
        if (static_cast<int>(a.proj_mask.size()) != cfg.n_heads)
            throw ShapeError("attention steering mask must cover every head");
        h.attn_steer.push_back({a.layer, put(a.vec), a.with_residual, a.proj_mask});
    }
    return h;
}

template <class S>
ForwardIdsT<S> model_forward(TapeT<S>& tape, const TapeWeightsT<S>& w, const ModelConfig& cfg,
                             const std::vector<int>& tokens, const HooksT<S>& hooks,
                             const TraceRequest& req) {
    using Id = typename TapeT<S>::Id;
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
        throw LengthError("sequence of " + std::to_string(tokens.size()) +
                          " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    if (tokens.empty()) throw UsageError("forward: empty token sequence");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw UsageError("forward: token id " + std::to_string(t) + " outside vocab");

    const int dh = cfg.d_head;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    auto adds_at = [&](Site site, int layer, int head, Id x) {
        for (const auto& a : hooks.adds)
            if (a.site.site == site && (site == Site::PreUnembed || a.site.layer == layer) &&
                (!site_needs_head(site) || a.site.head == head))
                x = tape.add_steer(x, a.vec);
        return x;
    };

    ForwardIdsT<S> out;
    if (req.attn_probs)
        out.trace.attn.resize(static_cast<size_t>(cfg.n_layers));

    Id x = tape.embed_rows(w.embed, tokens);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w.layers[static_cast<size_t>(l)];

        const typename HooksT<S>::AttnSteer* steer = nullptr;
        for (const auto& a : hooks.attn_steer)
            if (a.layer == l) steer = &a;

        Id u = tape.rms_norm(x, lw.attn_gain, static_cast<S>(cfg.norm_eps));
        u = adds_at(Site::AfterInputNorm, l, -1, u);
        Id u_steered = -1;
        if (steer) {
            Id xs = tape.add_steer(x, steer->vec);
            u_steered = tape.rms_norm(xs, lw.attn_gain, static_cast<S>(cfg.norm_eps));
            u_steered = adds_at(Site::AfterInputNorm, l, -1, u_steered);
        }

        Id attn_sum = -1;
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int c0 = h * dh, c1 = (h + 1) * dh;
            auto proj_in = [&](int which) {
                return (steer && steer->proj_mask[static_cast<size_t>(h)][static_cast<size_t>(which)])
                           ? u_steered
                           : u;
            };
            Id qin = adds_at(Site::QIn, l, h, proj_in(0));
            Id kin = adds_at(Site::KIn, l, h, proj_in(1));
            Id vin = adds_at(Site::VIn, l, h, proj_in(2));
            Id q = tape.rope(tape.matmul_colblock(qin, lw.wq, c0, c1));
            Id k = tape.rope(tape.matmul_colblock(kin, lw.wk, c0, c1));
            Id v = tape.matmul_colblock(vin, lw.wv, c0, c1);
            Id probs = tape.causal_softmax(tape.causal_scores(q, k, scale));
            if (req.attn_probs) out.trace.attn[static_cast<size_t>(l)].push_back(tape.val(probs));
            Id ho = tape.matmul(probs, v);
            ho = adds_at(Site::HeadOut, l, h, ho);
            Id mixed = tape.matmul_rowblock(ho, lw.wo, c0, c1);
            attn_sum = (attn_sum < 0) ? mixed : tape.add(attn_sum, mixed);
        }

        Id skip = (steer && steer->with_residual) ? tape.add_steer(x, steer->vec) : x;
        Id y = tape.add(skip, attn_sum);
        y = adds_at(Site::ResidPostAttn, l, -1, y);
        if (std::find(req.resid_post_attn.begin(), req.resid_post_attn.end(), l) !=
            req.resid_post_attn.end())
            out.trace.resid_post_attn[l] = tape.val(y);

        Id vn = tape.rms_norm(y, lw.mlp_gain, static_cast<S>(cfg.norm_eps));
        Id hmid = tape.silu(tape.add_rowvec(tape.matmul(vn, lw.w1), lw.b1));
        Id m = tape.add_rowvec(tape.matmul(hmid, lw.w2), lw.b2);
        m = adds_at(Site::MlpOut, l, -1, m);
        for (const auto& a : hooks.adaptive) {
            if (a.layer != l) continue;
            Id gate;
            if (a.force_gate) {
                TensorT<S> g({static_cast<int>(tokens.size())});
                for (auto& gv : g.data) gv = *a.force_gate;
                gate = tape.leaf(std::move(g), false);
            } else {
                gate = tape.matvec(vn, a.a);
            }
            if (req.gates) out.trace.gates[l] = tape.val(gate).data;
            m = tape.add_outer(m, gate, a.b);
        }

        Id z = tape.add(y, m);
        z = adds_at(Site::ResidPost, l, -1, z);
        if (std::find(req.resid_post.begin(), req.resid_post.end(), l) != req.resid_post.end())
            out.trace.resid_post[l] = tape.val(z);
        x = z;
    }

    x = adds_at(Site::PreUnembed, -1, -1, x);
    out.final_resid = x;
    if (req.pre_unembed) out.trace.pre_unembed = tape.val(x);

    Id fin = tape.rms_norm(x, w.final_gain, static_cast<S>(cfg.norm_eps));
    out.logits = tape.matmul_nt(fin, w.unembed);
    return out;
}

template TapeWeightsT<float> weights_on_tape<float>(TapeT<float>&, const WeightStoreT<float>&,
                                                    const ModelConfig&, bool);
template TapeWeightsT<double> weights_on_tape<double>(TapeT<double>&, const WeightStoreT<double>&,
                                                      const ModelConfig&, bool);
template HooksT<float> hooks_on_tape<float>(TapeT<float>&, const SteeringSetup&,
                                            const ModelConfig&);
template HooksT<double> hooks_on_tape<double>(TapeT<double>&, const SteeringSetup&,
                                              const ModelConfig&);
template ForwardIdsT<float> model_forward<float>(TapeT<float>&, const TapeWeightsT<float>&,
                                                 const ModelConfig&, const std::vector<int>&,
                                                 const HooksT<float>&, const TraceRequest&);
template ForwardIdsT<double> model_forward<double>(TapeT<double>&, const TapeWeightsT<double>&,
                                                   const ModelConfig&, const std::vector<int>&,
                                                   const HooksT<double>&, const TraceRequest&);

ForwardResult forward(const WeightStore& store, const ModelConfig& cfg,
                      const std::vector<int>& tokens, const SteeringSetup& steering,
                      const TraceRequest& req) {
    Tape tape(false);
    auto w = weights_on_tape(tape, store, cfg, false);
    auto hooks = hooks_on_tape(tape, steering, cfg);
    auto ids = model_forward(tape, w, cfg, tokens, hooks, req);
    return {tape.val(ids.logits), std::move(ids.trace)};
}

// ---------------------------------------------------------------------------
// sampling

namespace {

int pick_token(const float* logits, int vocab, float temperature, Rng& rng, float* logprob) {
    if (temperature == 0.0f) {
        int best = 0;
        for (int j = 1; j < vocab; ++j)
            if (logits[j] > logits[best]) best = j; // ties keep the lowest id
        if (logprob) *logprob = 0.0f;
        return best;
    }
    // exp-normalize in double, then one CDF walk in token-id order
    std::vector<double> z(static_cast<size_t>(vocab));
    double mx = static_cast<double>(logits[0]) / temperature;
    for (int j = 0; j < vocab; ++j) {
        z[static_cast<size_t>(j)] = static_cast<double>(logits[j]) / temperature;
        mx = std::max(mx, z[static_cast<size_t>(j)]);
    }
    double sum = 0.0;
    for (int j = 0; j < vocab; ++j) {
        z[static_cast<size_t>(j)] = std::exp(z[static_cast<size_t>(j)] - mx);
        sum += z[static_cast<size_t>(j)];
    }
    const double u = rng.uniform() * sum;
    double acc = 0.0;
    int chosen = vocab - 1;
    for (int j = 0; j < vocab; ++j) {
        acc += z[static_cast<size_t>(j)];
        if (u < acc) {
            chosen = j;
            break;
        }
    }
    if (logprob)
        *logprob = static_cast<float>(std::log(z[static_cast<size_t>(chosen)] / sum));
    return chosen;
}

} // namespace

std::vector<int> sample(const WeightStore& store, const ModelConfig& cfg,
                        const std::vector<int>& prompt, const SampleConfig& sc, Rng& rng,
                        const SteeringSetup& steering, std::vector<float>* logprobs) {
    if (sc.temperature < 0.0f) throw UsageError("sample: temperature must be >= 0");
    if (static_cast<int>(prompt.size()) > cfg.max_seq_len)
        throw LengthError("sample: prompt of " + std::to_string(prompt.size()) +
                          " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    if (logprobs) logprobs->clear();
    std::vector<int> seq = prompt;
    std::vector<int> completion;
    for (int step = 0; step < sc.max_new; ++step) {
        if (static_cast<int>(seq.size()) >= cfg.max_seq_len) break;
        Tape tape(false);
        auto w = weights_on_tape(tape, store, cfg, false);
        auto hooks = hooks_on_tape(tape, steering, cfg);
        auto ids = model_forward(tape, w, cfg, seq, hooks, {});
        const auto& logits = tape.val(ids.logits);
        float lp = 0.0f;
        const int tok =
            pick_token(logits.row(logits.dim(0) - 1), cfg.vocab_size, sc.temperature, rng, &lp);
        seq.push_back(tok);
        completion.push_back(tok);
        if (logprobs) logprobs->push_back(lp);
        if (tok == sc.stop_token) break;
    }
    return completion;
}

// ---------------------------------------------------------------------------
// pretraining

PretrainResult pretrain(WeightStore& store, const ModelConfig& cfg,
                        const std::vector<std::vector<int>>& corpus, const PretrainConfig& pc) {
    cfg.validate();
    check_store_matches(store, cfg);
    if (corpus.empty()) throw UsageError("pretrain: empty corpus");
    for (const auto& seq : corpus)
        if (static_cast<int>(seq.size()) > cfg.max_seq_len || seq.size() < 2)
            throw LengthError("pretrain: corpus sequence length " + std::to_string(seq.size()) +
                              " outside [2, max_seq_len]");

    const size_t holdout_n =
        std::min(corpus.size() - 1,
                 static_cast<size_t>(static_cast<double>(corpus.size()) * pc.holdout_frac));
    const size_t train_n = corpus.size() - holdout_n;

    const auto names = canonical_param_names(cfg);

    auto holdout_loss = [&]() -> float {
        if (holdout_n == 0) return 0.0f;
        double acc = 0.0;
        for (size_t i = train_n; i < corpus.size(); ++i) {
            Tape tape(false);
            auto w = weights_on_tape(tape, store, cfg, false);
            auto ids = model_forward(tape, w, cfg, corpus[i], {}, {});
            std::vector<int> targets(corpus[i].size(), -1);
            for (size_t t = 0; t + 1 < corpus[i].size(); ++t) targets[t] = corpus[i][t + 1];
            acc += static_cast<double>(tape.val(tape.cross_entropy(ids.logits, targets)).at(0));
        }
        return static_cast<float>(acc / static_cast<double>(holdout_n));
    };

    PretrainResult res;
    Adam opt(pc.adam);
    const int B = std::max(1, pc.batch_size);

    for (int step = 0; step < pc.steps; ++step) {
        Rng batch_rng(derive_seed(pc.seed, seed_stream::kPretrainBatch, static_cast<uint64_t>(step)));
        std::vector<size_t> idx(static_cast<size_t>(B));
        for (auto& i : idx) i = static_cast<size_t>(batch_rng.below(train_n));

        std::vector<std::map<std::string, Tensor>> grads(static_cast<size_t>(B));
        std::vector<float> losses(static_cast<size_t>(B), 0.0f);
        std::string worker_error;

#pragma omp parallel for schedule(dynamic)
        for (int b = 0; b < B; ++b) {
            try {
                const auto& seq = corpus[idx[static_cast<size_t>(b)]];
                Tape tape(true);
                auto w = weights_on_tape(tape, store, cfg, true);
                auto ids = model_forward(tape, w, cfg, seq, {}, {});
                std::vector<int> targets(seq.size(), -1);
                for (size_t t = 0; t + 1 < seq.size(); ++t) targets[t] = seq[t + 1];
                auto loss = tape.cross_entropy(ids.logits, targets);
                losses[static_cast<size_t>(b)] = tape.val(loss).at(0);
                tape.backward(loss);
                auto& g = grads[static_cast<size_t>(b)];
                for (const auto& [name, id] : w.named) g.emplace(name, tape.grad(id));
            } catch (const std::exception& e) {
#pragma omp critical
                worker_error = e.what();
            }
        }
        if (!worker_error.empty())
            throw TrainingError("pretrain: step " + std::to_string(step) + ": " + worker_error);

        double mean_loss = 0.0;
        for (float l : losses) mean_loss += static_cast<double>(l);
        mean_loss /= B;
        if (std::isnan(mean_loss))
            throw TrainingError("pretrain: NaN loss at step " + std::to_string(step));
        res.loss_curve.push_back(static_cast<float>(mean_loss));

        // Per-parameter accumulation order is fixed (batch item index), and
        // parameters are independent, so this loop parallelizes without
        // changing results.
        opt.step_begin();
        const float inv_b = 1.0f / static_cast<float>(B);
#pragma omp parallel for schedule(dynamic)
        for (long ni = 0; ni < static_cast<long>(names.size()); ++ni) {
            const auto& name = names[static_cast<size_t>(ni)];
            Tensor acc = Tensor::zeros(store.at(name).shape);
            for (int b = 0; b < B; ++b) {
                const Tensor& g = grads[static_cast<size_t>(b)].at(name);
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i];
            }
            for (auto& v : acc.data) v *= inv_b;
            opt.update(name, store.at(name), acc);
        }

        if (pc.holdout_every > 0 && (step + 1) % pc.holdout_every == 0)
            res.holdout_curve.emplace_back(step + 1, holdout_loss());
    }

    res.final_holdout_loss = holdout_loss();
    return res;
}

} // namespace steerlab
