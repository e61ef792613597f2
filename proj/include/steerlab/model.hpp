#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "steerlab/adam.hpp"
#include "steerlab/rng.hpp"
#include "steerlab/tape.hpp"
#include "steerlab/tensor.hpp"

namespace steerlab {

// Pre-norm decoder-only transformer: RMS norm, rotary positions, SiLU MLP,
// untied unembedding. Every place the analysis code can intervene on or read
// from is a named hook site below.

struct ModelConfig {
    int n_layers = 6;
    int d_model = 64;
    int n_heads = 4;
    int d_head = 16;
    int d_ff = 256;
    int vocab_size = 0;
    int max_seq_len = 64;
    float norm_eps = 1e-6f;
    std::string pos_scheme = "rotary";

    void validate() const;
};

template <class S>
using WeightStoreT = std::map<std::string, TensorT<S>>;
using WeightStore = WeightStoreT<float>;

// Canonical parameter set: exactly these names, shapes fixed by the config.
std::vector<std::string> canonical_param_names(const ModelConfig& cfg);
Shape param_shape(const ModelConfig& cfg, const std::string& name);
size_t param_count(const ModelConfig& cfg);

WeightStore init_model(const ModelConfig& cfg, uint64_t seed);
void check_store_matches(const WeightStore& store, const ModelConfig& cfg);
uint64_t store_hash(const WeightStore& store);

template <class S>
WeightStoreT<S> store_cast(const WeightStore& store) {
    WeightStoreT<S> out;
    for (const auto& [name, t] : store) out.emplace(name, t.template cast<S>());
    return out;
}

// ---------------------------------------------------------------------------
// Hook sites

enum class Site {
    ResidPost,      // block output, after the MLP residual add
    ResidPostAttn,  // after the attention residual add
    AfterInputNorm, // attention-branch input, just past the block's input norm
    QIn,            // per-head query projection input
    KIn,            // per-head key projection input
    VIn,            // per-head value projection input
    HeadOut,        // per-head attention output, before the output projection
    PreUnembed,     // final residual, before the final norm and unembedding
    MlpOut,         // MLP output, before its residual add
};

struct HookSite {
    Site site = Site::ResidPost;
    int layer = 0;
    int head = -1;

    bool operator==(const HookSite&) const = default;
    bool operator<(const HookSite& o) const {
        if (site != o.site) return site < o.site;
        if (layer != o.layer) return layer < o.layer;
        return head < o.head;
    }
};

std::string site_str(const HookSite& s);
HookSite parse_site(const std::string& s);
bool site_needs_head(Site s);
// expected length of an additive vector at this site
int site_vec_len(const HookSite& s, const ModelConfig& cfg);
void validate_site(const HookSite& s, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Interventions

// Plain-value steering description; gets re-instantiated on each fresh tape.
struct SteeringSetup {
    struct Add {
        HookSite site;
        Tensor vec;
    };
    // Rank-1 adaptive update at MLP_OUT: addition b * (a . u) per token, with
    // u the normalized MLP input. force_gate pins the gate for reduction
    // tests.
    struct Adaptive {
        int layer = 0;
        Tensor b, a;
        std::optional<float> force_gate;
    };
    // Attention-input steering: selected per-head projections read the
    // steered-and-normalized block input instead of the plain one.
    struct AttnSteer {
        int layer = 0;
        Tensor vec;
        bool with_residual = false;
        std::vector<std::array<bool, 3>> proj_mask; // [head][q,k,v]
    };
    std::vector<Add> adds;
    std::vector<Adaptive> adaptive;
    std::vector<AttnSteer> attn_steer;

    bool empty() const { return adds.empty() && adaptive.empty() && attn_steer.empty(); }
};

// Same structure, but holding tape ids so steering tensors can be trainable.
template <class S>
struct HooksT {
    using Id = typename TapeT<S>::Id;
    struct Add {
        HookSite site;
        Id vec;
    };
    struct Adaptive {
        int layer;
        Id b, a;
        std::optional<S> force_gate;
    };
    struct AttnSteer {
        int layer;
        Id vec;
        bool with_residual;
        std::vector<std::array<bool, 3>> proj_mask;
    };
    std::vector<Add> adds;
    std::vector<Adaptive> adaptive;
    std::vector<AttnSteer> attn_steer;
};

// ---------------------------------------------------------------------------
// Tracing

struct TraceRequest {
    std::vector<int> resid_post;      // layers to record
    std::vector<int> resid_post_attn; // layers to record after the attention add
    bool pre_unembed = false;
    bool attn_probs = false;
    bool gates = false;
};

template <class S>
struct ForwardTraceT {
    std::map<int, TensorT<S>> resid_post;                 // layer -> [T,d]
    std::map<int, TensorT<S>> resid_post_attn;            // layer -> [T,d]
    TensorT<S> pre_unembed;                               // [T,d] if requested
    std::vector<std::vector<TensorT<S>>> attn;            // [layer][head] -> [T,T]
    std::map<int, std::vector<S>> gates;                  // layer -> per-position gate
};
using ForwardTrace = ForwardTraceT<float>;

// ---------------------------------------------------------------------------
// Forward

template <class S>
struct TapeWeightsT {
    using Id = typename TapeT<S>::Id;
    Id embed = -1, unembed = -1, final_gain = -1;
    struct Layer {
        Id attn_gain, wq, wk, wv, wo, mlp_gain, w1, b1, w2, b2;
    };
    std::vector<Layer> layers;
    std::vector<std::pair<std::string, Id>> named; // grad extraction registry
};

template <class S>
TapeWeightsT<S> weights_on_tape(TapeT<S>& tape, const WeightStoreT<S>& store,
                                const ModelConfig& cfg, bool trainable);

template <class S>
HooksT<S> hooks_on_tape(TapeT<S>& tape, const SteeringSetup& setup, const ModelConfig& cfg);

template <class S>
struct ForwardIdsT {
    using Id = typename TapeT<S>::Id;
    Id logits = -1;
    Id final_resid = -1;
    ForwardTraceT<S> trace;
};

template <class S>
ForwardIdsT<S> model_forward(TapeT<S>& tape, const TapeWeightsT<S>& w, const ModelConfig& cfg,
                             const std::vector<int>& tokens, const HooksT<S>& hooks,
                             const TraceRequest& req = {});

// One-call inference wrapper: no-grad tape, plain tensors in and out.
struct ForwardResult {
    Tensor logits;
    ForwardTrace trace;
};
ForwardResult forward(const WeightStore& store, const ModelConfig& cfg,
                      const std::vector<int>& tokens, const SteeringSetup& steering = {},
                      const TraceRequest& req = {});

// ---------------------------------------------------------------------------
// Sampling

struct SampleConfig {
    float temperature = 1.0f;
    int max_new = 32;
    int stop_token = -1; // -1: never stop early
};

// Autoregressive sampling; the completion includes the stop token when hit.
// temperature 0 is greedy with lowest-token-id tie-break. logprobs, when
// given, receives log pi of each emitted token (0 under greedy).
std::vector<int> sample(const WeightStore& store, const ModelConfig& cfg,
                        const std::vector<int>& prompt, const SampleConfig& sc, Rng& rng,
                        const SteeringSetup& steering = {},
                        std::vector<float>* logprobs = nullptr);

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainConfig {
    int steps = 2000;
    int batch_size = 16;
    AdamConfig adam{1e-3f, 0.9f, 0.999f, 1e-8f};
    uint64_t seed = 0;
    float holdout_frac = 0.1f;
    int holdout_every = 100; // holdout loss sampled this often into the curve
};

struct PretrainResult {
    std::vector<float> loss_curve;            // per-step train batch loss
    std::vector<std::pair<int, float>> holdout_curve;
    float final_holdout_loss = 0.0f;
};

PretrainResult pretrain(WeightStore& store, const ModelConfig& cfg,
                        const std::vector<std::vector<int>>& corpus, const PretrainConfig& pc);

} // namespace steerlab
