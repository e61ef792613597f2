#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "steerlab/model.hpp"
#include "steerlab/steering.hpp"
#include "steerlab/task.hpp"

namespace steerlab {

struct EvalConfig {
    float temperature = 1.0f;
    std::vector<uint64_t> seeds = {0, 1, 2};
    int max_new = 24;
    std::string dataset_id;
};

struct EvalReport {
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
    std::vector<double> per_seed;
    double mean_gen_len = 0.0;
    float temperature = 1.0f;
    std::string dataset_id;
    std::string params_hash = "none";

    struct Row {
        uint64_t eval_seed = 0;
        uint64_t instance_seed = 0;
        int reward = 0;
        int gen_len = 0;
    };
    std::vector<Row> rows; // raw dump, one per (seed, instance)
};

// One completion per instance per seed; temperature 0 decodes greedily.
EvalReport evaluate(const WeightStore& store, const ModelConfig& cfg, const SteeringSetup& setup,
                    const std::vector<TaskInstance>& dataset, const EvalConfig& ec);

// Base model with prefix tokens appended to every prompt before generation.
EvalReport prefix_eval(const WeightStore& store, const ModelConfig& cfg,
                       const std::vector<int>& prefix, const std::vector<TaskInstance>& dataset,
                       const EvalConfig& ec);

// gain = (Acc(recipient+donor) - Acc(recipient)) / (Acc(recipient+own) - Acc(recipient))
double transfer_gain_value(double acc_donor_applied, double acc_base, double acc_own,
                           bool* defined = nullptr);

struct TransferReport {
    double gain = 0.0;
    bool defined = false;
    EvalReport donor_applied, base, own;
};

TransferReport transfer_gain(const WeightStore& recipient, const ModelConfig& cfg,
                             const SteeringParams& donor, const SteeringParams& own,
                             const std::vector<TaskInstance>& dataset, const EvalConfig& ec);

// norm(si,sj) = (Acc(i,j) - max(Acc_i, Acc_j)) / (Acc(all) - max(Acc_i, Acc_j))
double compose_gain_value(double acc_pair, double acc_i, double acc_j, double acc_all,
                          bool* defined = nullptr);

struct ComposeReport {
    double gain = 0.0;
    bool defined = false;
    EvalReport pair, single_i, single_j;
    double acc_all = 0.0;
};

ComposeReport compose_gain(const WeightStore& store, const ModelConfig& cfg,
                           const SteeringParams& si, const SteeringParams& sj, double acc_all,
                           const std::vector<TaskInstance>& dataset, const EvalConfig& ec);

uint64_t setup_hash(const SteeringSetup& setup);

} // namespace steerlab
