#pragma once

#include <string>
#include <vector>

#include "steerlab/adam.hpp"
#include "steerlab/model.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/task.hpp"

namespace steerlab {

// Sparse autoencoder over activation differences between a steered and a
// base forward. Linear encoder, BatchTopK sparsity, dead-feature auxiliary
// loss, unit-norm decoder columns.

struct SaeConfig {
    int d_in = 64;
    int dict_size = 1024; // F
    int k = 8;            // surviving latents per item, batch-pooled
    float aux_coef = 1.0f / 32.0f;
    int aux_k = 32;       // dead latents the auxiliary loss may use
    int dead_window = 256; // batches without a firing before a feature is dead

    void validate() const;
};

struct SaeParams {
    Tensor w_enc; // [F, d]
    Tensor b_enc; // [F]
    Tensor w_dec; // [d, F]
    Tensor b_dec; // [d]
};

SaeParams init_sae(const SaeConfig& cfg, uint64_t seed);
void normalize_decoder_columns(SaeParams& params);
std::vector<double> decoder_column_norms(const SaeParams& params);

// Keeps the k*batch largest pre-activations across the whole batch, zeroing
// the rest; ties go to the lower flat index. mask_out, when given, receives
// the 0/1 survivor mask.
Tensor batch_topk(const Tensor& pre, int k, Tensor* mask_out = nullptr);

Tensor sae_preacts(const SaeParams& params, const Tensor& batch); // [B,F]
Tensor sae_decode(const SaeParams& params, const Tensor& z);      // [B,d]

struct SaeLoss {
    double rec = 0.0; // mean over items of squared residual norm
    double aux = 0.0;
};

// dead[f] marks features inactive for a full dead window; empty means none.
SaeLoss sae_loss(const SaeParams& params, const SaeConfig& cfg, const Tensor& batch,
                 const std::vector<uint8_t>& dead = {});

struct SaeTrainConfig {
    int steps = 2000;
    int batch_size = 64;
    AdamConfig adam{1e-3f, 0.9f, 0.999f, 1e-8f};
    uint64_t seed = 0;
    float holdout_frac = 0.1f;
};

struct SaeTrainResult {
    SaeParams params;
    std::vector<float> loss_curve; // total loss per step
    float holdout_rec_initial = 0.0f;
    float holdout_rec_final = 0.0f;
    double dead_fraction = 0.0;
};

SaeTrainResult train_sae(const SaeConfig& cfg, const Tensor& dataset, const SaeTrainConfig& tc);

// ---------------------------------------------------------------------------
// diff collection

struct DiffDataset {
    Tensor data; // [rows, d_model]
    struct Row {
        uint64_t prompt_id = 0;
        int gen_index = 0;
        int position = 0;
        int correct = 0;
    };
    std::vector<Row> rows;
    int inject_layer = 0;
    int target_layer = 0;
};

// Steered generation per instance; the diff at target_layer between the
// steered and base forward of the same transcript, one row per position,
// labeled by the steered run's verifier outcome.
DiffDataset collect_diffs(const WeightStore& store, const ModelConfig& cfg,
                          const SteeringParams& steering, int inject_layer, int target_layer,
                          const std::vector<TaskInstance>& instances, float temperature,
                          int max_new, uint64_t seed);

void save_diff_dataset(const std::string& path, const DiffDataset& ds);
DiffDataset load_diff_dataset(const std::string& path);

// ---------------------------------------------------------------------------
// correctness association

struct FeatureStats {
    int feature = 0;
    int activation_count = 0; // rows with a strictly positive latent
    double r_correct = 0.0;
    double r_incorrect = 0.0;
    double cas = 0.0;
};

// Latents come from one whole-dataset BatchTopK pass, so scores do not
// depend on generation order. A feature activates on a generation when any
// of its tokens has a strictly positive surviving latent.
std::vector<FeatureStats> cas_scores(const SaeParams& params, const SaeConfig& cfg,
                                     const DiffDataset& ds);

// the bare CAS arithmetic, for fixtures
double cas_value(double r_correct, double r_incorrect);

} // namespace steerlab
