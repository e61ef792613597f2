#pragma once

#include <string>
#include <vector>

#include "steerlab/model.hpp"
#include "steerlab/task.hpp"

namespace steerlab {

// Path-patching placements for one steering vector s, trained for the
// residual stream entering block `layer`:
//   Full          add s at RESID_POST(layer-1): the block and everything
//                 after it see the vector
//   SkipLayer     add s at RESID_POST(layer): the block is skipped
//   SkipAttn      add s at RESID_POST_ATTN(layer): attention is skipped
//   AfterInputNorm  add s right after the block's input norm (attention
//                 branch only)
//   SteerProj     one projection of one head reads the steered block input
//   SteerHead     every projection of one head reads the steered input
//   SkipHead      every head except one reads the steered input
// Steered input means norm(X + s): the block input plus the vector, passed
// through the block's input normalization. with_residual additionally puts
// s on the skip path around attention, which together with steering all
// projections reproduces Full exactly.
enum class Placement { Full, SkipLayer, SkipAttn, AfterInputNorm, SteerProj, SteerHead, SkipHead };

enum class Proj { Q = 0, K = 1, V = 2 };

struct PatchEntry {
    Placement placement = Placement::Full;
    int layer = 0;
    int head = -1;
    Proj proj = Proj::Q;
    bool with_residual = false;
};

struct PatchPlan {
    Tensor vec;
    std::vector<PatchEntry> entries;
};

std::string placement_str(const PatchEntry& e);

// Lowers a plan onto the generic intervention machinery; overlapping
// placements are rejected.
SteeringSetup lower_plan(const PatchPlan& plan, const ModelConfig& cfg);

ForwardResult patched_forward(const WeightStore& store, const ModelConfig& cfg,
                              const PatchPlan& plan, const std::vector<int>& tokens,
                              const TraceRequest& req = {});

// Appendix-style identity: with normalization bypassed, adding s to one
// head's value input shifts MHA by the constant row s^T Wv_h Wo_h,
// independent of the attention pattern. Returns max |lhs - rhs| over the
// [T, d_model] output. with_norm runs the same probe behind the input norm,
// where the identity is not expected to hold; the deviation is reported.
template <class S>
S value_linearity_check(const WeightStoreT<S>& store, const ModelConfig& cfg, int layer, int head,
                        const TensorT<S>& u, const TensorT<S>& s, bool with_norm = false);

struct SweepRow {
    std::string placement;
    int layer = 0;
    int head = -1;
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
    std::vector<double> per_seed;
    double mean_gen_len = 0.0;
    std::vector<std::array<long long, 4>> raw; // eval_seed, instance_seed, reward, gen_len
};

struct SweepConfig {
    float temperature = 1.0f;
    std::vector<uint64_t> seeds = {0, 1, 2};
    int max_new = 24;
};

// Evaluates placements of `vec` against block `layer`, one row each, with
// the unsteered baseline first. placements == nullptr runs the standard set;
// otherwise only the named placements run (an empty list leaves just the
// baseline row).
std::vector<SweepRow> patch_sweep(const WeightStore& store, const ModelConfig& cfg,
                                  const Tensor& vec, int layer,
                                  const std::vector<TaskInstance>& dataset,
                                  const SweepConfig& sc,
                                  const std::vector<std::string>* placements = nullptr);

} // namespace steerlab
