#pragma once

#include <optional>
#include <string>
#include <vector>

#include "steerlab/adam.hpp"
#include "steerlab/model.hpp"
#include "steerlab/task.hpp"

namespace steerlab {

// Trainable steering: constant additive vectors at hook sites, or a rank-1
// adaptive update at an MLP output. Training is plain RLOO policy gradient
// with a per-prompt mean baseline; the base model stays frozen throughout.

enum class SteerKind { Constant, AdaptiveRank1 };

struct SiteSpec {
    HookSite site;
    SteerKind kind = SteerKind::Constant;
    bool trainable = true;
};

struct SteeringSpec {
    std::vector<SiteSpec> sites;
    void validate(const ModelConfig& cfg) const;
};

struct SteeringParams {
    struct Entry {
        HookSite site;
        SteerKind kind = SteerKind::Constant;
        Tensor s;    // Constant
        Tensor b, a; // AdaptiveRank1: direction b, gate row a
    };
    std::vector<Entry> entries;

    std::string donor_model = "unknown"; // hex hash of the weight store
    uint64_t training_seed = 0;
    int step_count = 0;

    // Lower to forward-pass hooks. force_gate pins every adaptive gate.
    SteeringSetup setup(std::optional<float> force_gate = std::nullopt) const;
    std::string param_name(size_t entry, const std::string& tensor) const;
};

SteeringParams init_steering(const SteeringSpec& spec, const ModelConfig& cfg);
void save_steering(const std::string& path, const SteeringParams& params);
SteeringParams load_steering(const std::string& path, const ModelConfig& cfg);

// Convenience specs used across the tools and tests.
SteeringSpec single_layer_spec(int layer);                  // constant at RESID_POST(layer)
SteeringSpec all_layer_spec(const ModelConfig& cfg);        // constant at every RESID_POST
SteeringSpec adaptive_spec(int layer);                      // rank-1 at MLP_OUT(layer)

// b(x) = mean reward of the prompt's samples; a = r - b. Needs N >= 2.
std::vector<float> compute_advantages(const std::vector<float>& rewards);

// Standalone mirror of the in-model adaptive update, used as an oracle:
// returns the [T,d] addition and optionally the per-token gates.
Tensor adaptive_apply(const Tensor& x, const Tensor& b, const Tensor& a,
                      std::vector<float>* gates_out = nullptr);

struct RlooConfig {
    int prompts_per_step = 32;
    int gens_per_prompt = 8;
    float temperature = 1.0f;
    int max_new = 24;
    int level = 1;
    AdamConfig adam{0.08f, 0.9f, 0.999f, 1e-8f};
    uint64_t seed = 0;
};

struct RolloutBatch {
    struct PromptRollouts {
        TaskInstance instance;
        std::vector<std::vector<int>> completions;
        std::vector<RewardRecord> records;
        std::vector<float> logprobs; // of each completion under current steering
        std::vector<float> advantages;
    };
    std::vector<PromptRollouts> prompts;
};

struct RlooStats {
    float mean_reward = 0.0f;
    float mean_abs_advantage = 0.0f;
    float grad_norm = 0.0f;
};

// One gradient step: sample N completions per prompt with steering active,
// form advantages, take one Adam step on the steering parameters only.
// Returns the rollout batch for inspection.
RolloutBatch rloo_step(const WeightStore& store, const ModelConfig& cfg, SteeringParams& params,
                       Adam& opt, int step_index, const RlooConfig& rc, RlooStats* stats = nullptr);

// Gradient of the RLOO surrogate sum a * log pi over a fixed rollout set,
// without an optimizer step. Exposed for the finite-difference oracle.
std::vector<Tensor> rloo_gradient(const WeightStore& store, const ModelConfig& cfg,
                                  const SteeringParams& params, const RolloutBatch& batch,
                                  float temperature, double* surrogate_out = nullptr);

struct SteerTrainResult {
    SteeringParams params;
    std::vector<RlooStats> curve;
};

SteerTrainResult train_steering(const WeightStore& store, const ModelConfig& cfg,
                                const SteeringSpec& spec, const RlooConfig& rc, int steps);

} // namespace steerlab
