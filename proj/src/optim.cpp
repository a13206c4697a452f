#include "kdlab/optim.hpp"

#include <cmath>

namespace kdlab {

void OptimizerConfig::validate() const {
    kd_arg_check(learning_rate > 0, "OptimizerConfig: learning_rate must be > 0");
    kd_arg_check(warmup_steps >= 0 && warmup_steps <= total_steps,
                 "OptimizerConfig: need 0 <= warmup_steps <= total_steps");
}

real_t lr_at_step(const OptimizerConfig& cfg, int step) {
    kd_check(step <= cfg.total_steps, "lr_at_step: step beyond total_steps");
    real_t warm = cfg.warmup_steps > 0
                      ? static_cast<real_t>(step) / static_cast<real_t>(cfg.warmup_steps)
                      : real_t(1);
    real_t decay = cfg.total_steps > cfg.warmup_steps
                       ? static_cast<real_t>(cfg.total_steps - step) /
                             static_cast<real_t>(cfg.total_steps - cfg.warmup_steps)
                       : real_t(0);
    real_t f = std::min(warm, decay);
    if (f < 0) f = 0;
    return cfg.learning_rate * f;
}

AdamW::AdamW(std::vector<Tensor> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p.size(), real_t(0));
        v_.emplace_back(p.size(), real_t(0));
    }
}

void AdamW::step(int step_index) {
    kd_check(step_index >= 1 && step_index <= cfg_.total_steps,
             "AdamW::step: step outside [1, total_steps]");
    const real_t lr = lr_at_step(cfg_, step_index);

    if (cfg_.max_grad_norm > 0) {
        real_t sq = 0;
        for (const auto& p : params_) {
            if (!p.has_grad()) continue;
            for (real_t g : p.grad()) sq += g * g;
        }
        const real_t norm = std::sqrt(sq);
        if (norm > cfg_.max_grad_norm) {
            const real_t s = cfg_.max_grad_norm / norm;
            for (auto& p : params_) {
                if (!p.has_grad()) continue;
                for (auto& g : p.grad()) g *= s;
            }
        }
    }

    const real_t bc1 = 1 - std::pow(cfg_.beta1, static_cast<real_t>(step_index));
    const real_t bc2 = 1 - std::pow(cfg_.beta2, static_cast<real_t>(step_index));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.has_grad()) continue;
        auto& data = p.data();
        const auto& grad = p.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t j = 0; j < data.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * grad[j];
            v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * grad[j] * grad[j];
            const real_t mhat = m[j] / bc1;
            const real_t vhat = v[j] / bc2;
            data[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.epsilon) + cfg_.weight_decay * data[j]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

} // namespace kdlab
