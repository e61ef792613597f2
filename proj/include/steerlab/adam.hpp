#pragma once

#include <cmath>
#include <map>
#include <mutex>
#include <string>

#include "steerlab/tensor.hpp"

namespace steerlab {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Adam over a named parameter set. One state slot per name; per-element
// updates are independent, so distinct names may update concurrently. Only
// the state-slot lookup takes the lock.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step_begin() { ++t_; }

    void update(const std::string& name, Tensor& param, const Tensor& grad) {
        if (!same_shape(param, grad))
            throw ShapeError("adam: grad shape " + shape_str(grad.shape) +
                             " does not match param " + shape_str(param.shape));
        State& st = slot(name);
        if (st.m.data.empty()) {
            st.m = Tensor::zeros(param.shape);
            st.v = Tensor::zeros(param.shape);
        }
        const float b1 = cfg_.beta1, b2 = cfg_.beta2;
        const float corr1 = 1.0f - std::pow(b1, static_cast<float>(t_));
        const float corr2 = 1.0f - std::pow(b2, static_cast<float>(t_));
        for (size_t i = 0; i < param.data.size(); ++i) {
            const float g = grad.data[i];
            st.m.data[i] = b1 * st.m.data[i] + (1.0f - b1) * g;
            st.v.data[i] = b2 * st.v.data[i] + (1.0f - b2) * g * g;
            const float mhat = st.m.data[i] / corr1;
            const float vhat = st.v.data[i] / corr2;
            param.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }

    const AdamConfig& config() const { return cfg_; }
    int steps_taken() const { return t_; }

private:
    struct State {
        Tensor m, v;
    };

    State& slot(const std::string& name) {
        std::lock_guard<std::mutex> lock(mu_);
        return state_[name]; // map nodes stay put across inserts
    }

    AdamConfig cfg_;
    std::map<std::string, State> state_;
    std::mutex mu_;
    int t_ = 0;
};

} // namespace steerlab
