#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdlab {

struct OptimizerConfig {
    real_t learning_rate = 1e-3;
    real_t weight_decay = 1e-5;
    real_t epsilon = 1e-8;
    int warmup_steps = 100;
    int total_steps = 0;
    real_t beta1 = 0.9;
    real_t beta2 = 0.999;
    real_t max_grad_norm = 1.0; // global L2 clip; <= 0 disables

    void validate() const;
};

// linear warmup to base lr, then linear decay to zero at total_steps
real_t lr_at_step(const OptimizerConfig& cfg, int step);

// AdamW with decoupled weight decay over a fixed parameter list.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, OptimizerConfig cfg);

    // applies one update using the grads currently stored on the params;
    // `step` is 1-based and must not exceed total_steps
    void step(int step_index);
    void zero_grad();

    const OptimizerConfig& config() const { return cfg_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<real_t>> m_;
    std::vector<std::vector<real_t>> v_;
    OptimizerConfig cfg_;
};

} // namespace kdlab
