#include "steerlab/patching.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "steerlab/evaluation.hpp"
#include "steerlab/kernels.hpp"

namespace steerlab {

std::string placement_str(const PatchEntry& e) {
    std::string s;
    switch (e.placement) {
        case Placement::Full: return "full";
        case Placement::SkipLayer: return "skip_layer";
        case Placement::SkipAttn: return "skip_attn";
        case Placement::AfterInputNorm: return "after_input_norm";
        case Placement::SteerProj:
            s = e.proj == Proj::Q ? "steer_q" : e.proj == Proj::K ? "steer_k" : "steer_v";
            break;
        case Placement::SteerHead: s = "steer_head"; break;
        case Placement::SkipHead: s = "skip_head"; break;
    }
    if (e.with_residual) s += "+resid";
    return s;
}

SteeringSetup lower_plan(const PatchPlan& plan, const ModelConfig& cfg) {
    SteeringSetup setup;
    std::vector<HookSite> add_sites;
    // attention masks OR together; a (head, proj) claimed twice is an overlap
    std::map<int, SteeringSetup::AttnSteer> attn;

    auto claim_add = [&](HookSite site) {
        validate_site(site, cfg);
        if (std::find(add_sites.begin(), add_sites.end(), site) != add_sites.end())
            throw UsageError("patch plan: overlapping placements at site " + site_str(site) +
                             " layer " + std::to_string(site.layer));
        add_sites.push_back(site);
        setup.adds.push_back({site, plan.vec});
    };
    auto claim_proj = [&](int layer, int head, int proj, bool with_residual) {
        if (layer < 0 || layer >= cfg.n_layers)
            throw UsageError("patch plan: layer out of range");
        if (head < 0 || head >= cfg.n_heads) throw UsageError("patch plan: head out of range");
        auto it = attn.find(layer);
        if (it == attn.end()) {
            SteeringSetup::AttnSteer st;
            st.layer = layer;
            st.vec = plan.vec;
            st.with_residual = false;
            st.proj_mask.assign(static_cast<size_t>(cfg.n_heads), {false, false, false});
            it = attn.emplace(layer, std::move(st)).first;
        }
        auto& slot = it->second.proj_mask[static_cast<size_t>(head)][static_cast<size_t>(proj)];
        if (slot)
            throw UsageError("patch plan: head " + std::to_string(head) +
                             " projection claimed twice at layer " + std::to_string(layer));
        slot = true;
        it->second.with_residual = it->second.with_residual || with_residual;
    };

    for (const auto& e : plan.entries) {
        switch (e.placement) {
            case Placement::Full:
                if (e.layer < 1)
                    throw UsageError("patch plan: full placement needs a preceding layer");
                claim_add({Site::ResidPost, e.layer - 1, -1});
                break;
            case Placement::SkipLayer:
                claim_add({Site::ResidPost, e.layer, -1});
                break;
            case Placement::SkipAttn:
                claim_add({Site::ResidPostAttn, e.layer, -1});
                break;
            case Placement::AfterInputNorm:
                claim_add({Site::AfterInputNorm, e.layer, -1});
                break;
            case Placement::SteerProj:
                claim_proj(e.layer, e.head, static_cast<int>(e.proj), e.with_residual);
                break;
            case Placement::SteerHead:
                for (int p = 0; p < 3; ++p) claim_proj(e.layer, e.head, p, e.with_residual);
                break;
            case Placement::SkipHead:
                if (e.head < 0 || e.head >= cfg.n_heads)
                    throw UsageError("patch plan: head out of range");
                for (int h = 0; h < cfg.n_heads; ++h) {
                    if (h == e.head) continue;
                    for (int p = 0; p < 3; ++p) claim_proj(e.layer, h, p, e.with_residual);
                }
                break;
        }
    }
    for (auto& [layer, st] : attn) setup.attn_steer.push_back(std::move(st));
    return setup;
}

ForwardResult patched_forward(const WeightStore& store, const ModelConfig& cfg,
                              const PatchPlan& plan, const std::vector<int>& tokens,
                              const TraceRequest& req) {
    return forward(store, cfg, tokens, lower_plan(plan, cfg), req);
}

// ---------------------------------------------------------------------------
// value-steering linearity

template <class S>
S value_linearity_check(const WeightStoreT<S>& store, const ModelConfig& cfg, int layer, int head,
                        const TensorT<S>& u, const TensorT<S>& s, bool with_norm) {
    if (layer < 0 || layer >= cfg.n_layers) throw UsageError("value check: layer out of range");
    if (head < 0 || head >= cfg.n_heads) throw UsageError("value check: head out of range");
    if (u.rank() != 2 || u.dim(1) != cfg.d_model || static_cast<int>(s.numel()) != cfg.d_model)
        throw ShapeError("value check: U must be [T, d_model], s length d_model");

    const int T = u.dim(0), d = cfg.d_model, dh = cfg.d_head;
    const std::string p = "layer." + std::to_string(layer) + ".";
    const auto& wq = store.at(p + "attn.wq");
    const auto& wk = store.at(p + "attn.wk");
    const auto& wv = store.at(p + "attn.wv");
    const auto& wo = store.at(p + "attn.wo");
    const auto& gain = store.at(p + "attn.norm.gain");

    TensorT<S> u_base = u;
    TensorT<S> u_steered = u;
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j) u_steered.at(t, j) += s.at(j);
    if (with_norm) {
        TensorT<S> nb(u.shape), ns(u.shape);
        kernels::rms_norm_rows(T, d, u_base.data.data(), gain.data.data(),
                               static_cast<S>(cfg.norm_eps), nb.data.data());
        kernels::rms_norm_rows(T, d, u_steered.data.data(), gain.data.data(),
                               static_cast<S>(cfg.norm_eps), ns.data.data());
        u_base = std::move(nb);
        u_steered = std::move(ns);
    }

    // raw attention sublayer; the steered side feeds u_steered only into the
    // value path of the chosen head, attention weights stay those of u_base
    auto mha = [&](bool steer_values) {
        TensorT<S> out = TensorT<S>::zeros({T, d});
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int c0 = h * dh;
            TensorT<S> q({T, dh}), k({T, dh}), v({T, dh});
            kernels::gemm_nn_colblock(T, d, u_base.data.data(), wq.data.data(), d, c0, c0 + dh,
                                      q.data.data());
            kernels::gemm_nn_colblock(T, d, u_base.data.data(), wk.data.data(), d, c0, c0 + dh,
                                      k.data.data());
            const TensorT<S>& vin = (steer_values && h == head) ? u_steered : u_base;
            kernels::gemm_nn_colblock(T, d, vin.data.data(), wv.data.data(), d, c0, c0 + dh,
                                      v.data.data());
            // causal probs, rows sum to 1
            TensorT<S> probs = TensorT<S>::zeros({T, T});
            for (int i = 0; i < T; ++i) {
                S mx = S(0);
                bool first = true;
                for (int j = 0; j <= i; ++j) {
                    S acc = S(0);
                    for (int c = 0; c < dh; ++c) acc += q.at(i, c) * k.at(j, c);
                    probs.at(i, j) = acc * scale;
                    if (first || probs.at(i, j) > mx) mx = probs.at(i, j);
                    first = false;
                }
                double sum = 0.0;
                for (int j = 0; j <= i; ++j) {
                    probs.at(i, j) = static_cast<S>(std::exp(static_cast<double>(probs.at(i, j) - mx)));
                    sum += static_cast<double>(probs.at(i, j));
                }
                const S inv = static_cast<S>(1.0 / sum);
                for (int j = 0; j <= i; ++j) probs.at(i, j) *= inv;
            }
            TensorT<S> ho({T, dh});
            kernels::gemm_nn(T, dh, T, probs.data.data(), v.data.data(), ho.data.data());
            const S* wo_block = wo.data.data() + static_cast<size_t>(c0) * d;
            kernels::gemm_nn(T, d, dh, ho.data.data(), wo_block, out.data.data(), true);
        }
        return out;
    };

    const TensorT<S> base = mha(false);
    const TensorT<S> steered = mha(true);

    // s^T Wv_h Wo_h
    std::vector<S> sv(static_cast<size_t>(dh), S(0));
    for (int c = 0; c < dh; ++c)
        for (int j = 0; j < d; ++j) sv[static_cast<size_t>(c)] += s.at(j) * wv.at(j, head * dh + c);
    std::vector<S> term(static_cast<size_t>(d), S(0));
    for (int c = 0; c < dh; ++c)
        for (int j = 0; j < d; ++j)
            term[static_cast<size_t>(j)] += sv[static_cast<size_t>(c)] * wo.at(head * dh + c, j);

    S max_dev = S(0);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j) {
            const S dev = std::abs(steered.at(t, j) - base.at(t, j) - term[static_cast<size_t>(j)]);
            if (dev > max_dev) max_dev = dev;
        }
    return max_dev;
}

template float value_linearity_check<float>(const WeightStoreT<float>&, const ModelConfig&, int,
                                            int, const TensorT<float>&, const TensorT<float>&,
                                            bool);
template double value_linearity_check<double>(const WeightStoreT<double>&, const ModelConfig&,
                                              int, int, const TensorT<double>&,
                                              const TensorT<double>&, bool);

// ---------------------------------------------------------------------------
// sweep

std::vector<SweepRow> patch_sweep(const WeightStore& store, const ModelConfig& cfg,
                                  const Tensor& vec, int layer,
                                  const std::vector<TaskInstance>& dataset,
                                  const SweepConfig& sc,
                                  const std::vector<std::string>* placements) {
    if (layer < 1 || layer >= cfg.n_layers)
        throw UsageError("patch sweep: block layer must be in [1, n_layers)");

    struct Item {
        std::string label;
        int head;
        std::vector<PatchEntry> entries;
    };
    std::vector<Item> items;
    items.push_back({"base", -1, {}});
    items.push_back({"full", -1, {{Placement::Full, layer, -1, Proj::Q, false}}});
    items.push_back({"skip_layer", -1, {{Placement::SkipLayer, layer, -1, Proj::Q, false}}});
    items.push_back({"skip_attn", -1, {{Placement::SkipAttn, layer, -1, Proj::Q, false}}});
    items.push_back(
        {"after_input_norm", -1, {{Placement::AfterInputNorm, layer, -1, Proj::Q, false}}});
    for (int h = 0; h < cfg.n_heads; ++h)
        for (int p = 0; p < 3; ++p)
            for (bool resid : {false, true}) {
                PatchEntry e{Placement::SteerProj, layer, h, static_cast<Proj>(p), resid};
                items.push_back({placement_str(e), h, {e}});
            }
    for (int h = 0; h < cfg.n_heads; ++h) {
        PatchEntry e{Placement::SteerHead, layer, h, Proj::Q, false};
        items.push_back({placement_str(e), h, {e}});
        PatchEntry e2{Placement::SkipHead, layer, h, Proj::Q, false};
        items.push_back({placement_str(e2), h, {e2}});
    }

    if (placements) {
        std::vector<Item> kept;
        for (const auto& item : items)
            if (item.label == "base" ||
                std::find(placements->begin(), placements->end(), item.label) !=
                    placements->end())
                kept.push_back(item);
        items = std::move(kept);
    }

    EvalConfig ec;
    ec.temperature = sc.temperature;
    ec.seeds = sc.seeds;
    ec.max_new = sc.max_new;

    std::vector<SweepRow> rows;
    for (const auto& item : items) {
        PatchPlan plan{vec, item.entries};
        const auto setup = lower_plan(plan, cfg);
        const auto rep = evaluate(store, cfg, setup, dataset, ec);
        SweepRow row;
        row.placement = item.label;
        row.layer = layer;
        row.head = item.head;
        row.accuracy_mean = rep.accuracy_mean;
        row.accuracy_std = rep.accuracy_std;
        row.per_seed = rep.per_seed;
        row.mean_gen_len = rep.mean_gen_len;
        for (const auto& r : rep.rows)
            row.raw.push_back({static_cast<long long>(r.eval_seed),
                               static_cast<long long>(r.instance_seed), r.reward, r.gen_len});
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace steerlab
