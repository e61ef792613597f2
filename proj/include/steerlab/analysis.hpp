#pragma once

#include <map>
#include <string>
#include <vector>

#include "steerlab/model.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/task.hpp"

namespace steerlab {

// Zero-guarded cosine in double precision. cos(u, u) is exactly 1 for any
// nonzero u: the denominator is sqrt(dot(u,v)^2), which round-trips exactly.
double cosine_guarded(const float* a, const float* b, int n, bool* zero_flag = nullptr);
double cosine_guarded(const std::vector<double>& a, const std::vector<double>& b,
                      bool* zero_flag = nullptr);

// Centered mean over rows: exact when all rows are identical.
std::vector<double> mean_rows(const std::vector<const float*>& rows, int n);

struct LensEntry {
    int token = 0;
    std::string token_text;
    double dot = 0.0;
    double cosine = 0.0;
};

struct LensReport {
    std::vector<LensEntry> entries; // sorted by the ranking score, ties by id
    bool final_norm_applied = false;
    bool zero_vector = false;
    bool top_k_clamped = false;
};

// Scores a direction against every unembedding row. Ranks by dot product by
// default; the final norm is omitted unless asked for.
LensReport logit_lens(const Tensor& v, const WeightStore& store, const ModelConfig& cfg,
                      int top_k, bool apply_final_norm = false, bool rank_by_cosine = false);

// ---------------------------------------------------------------------------
// token probability shifts

struct DeltaPRow {
    int prompt_index = 0;
    int position = 0; // predictive position: row t scores the token at t+1
    bool first_generated = false;
    int token = 0;
    double p_base = 0.0;
    double p_steered = 0.0;
    double delta = 0.0;
};

// Per-position next-token probability change between steered and base
// forwards over the prompt tokens. The last position is the
// first-generated-token group.
std::vector<DeltaPRow> token_prob_delta(const WeightStore& store, const ModelConfig& cfg,
                                        const SteeringSetup& setup,
                                        const std::vector<std::vector<int>>& prompts);

double median(std::vector<double> values);

// ---------------------------------------------------------------------------
// hidden-state shifts

// Per-token change of the residual stream at `target` when `vec` is injected
// at RESID_POST(inject). At target == inject the change is the injected
// vector itself by definition; it is returned directly, exact to the bit.
std::map<int, Tensor> delta_f(const WeightStore& store, const ModelConfig& cfg, const Tensor& vec,
                              int inject, const std::vector<int>& tokens,
                              const std::vector<int>& targets);

struct PersistenceResult {
    // [inject][target]; NaN where target < inject or a vector is missing
    std::vector<std::vector<double>> diff_diff;
    std::vector<std::vector<double>> diff_vector;
    std::vector<int> layers_present;
};

// Per-layer constant vectors, one per RESID_POST layer; missing layers are
// skipped. Cosines pool every prompt position.
PersistenceResult persistence_matrices(const WeightStore& store, const ModelConfig& cfg,
                                       const std::vector<Tensor>& layer_vecs,
                                       const std::vector<std::vector<int>>& prompts);

struct BiasSimilarityResult {
    std::vector<std::vector<double>> cosine; // [i][j] over present layers
    std::vector<int> layers_present;
    std::vector<Tensor> mean_shifts;         // final-layer mean shift per layer
};

BiasSimilarityResult bias_similarity_matrix(const WeightStore& store, const ModelConfig& cfg,
                                            const std::vector<Tensor>& layer_vecs,
                                            const std::vector<std::vector<int>>& prompts);

// ---------------------------------------------------------------------------
// adaptive gate traces

struct GateTraceRow {
    uint64_t prompt_id = 0;
    int position = 0;
    int token = 0;
    Segment segment = Segment::Instruction;
    float gate = 0.0f;
};

// Samples a completion per instance with the adaptive steering active, then
// records the gate of every position of the full transcript.
std::vector<GateTraceRow> gate_magnitude_trace(const WeightStore& store, const ModelConfig& cfg,
                                               const SteeringParams& params,
                                               const std::vector<TaskInstance>& instances,
                                               float temperature, int max_new, uint64_t seed);

} // namespace steerlab
