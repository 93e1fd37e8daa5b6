#pragma once

#include "rollforge/denoiser.hpp"

namespace rollforge {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    // Global gradient-norm clip; 0 disables.
    double max_grad_norm = 0.0;
};

/// Adaptive moments with decoupled weight decay and bias correction.
class AdamW {
public:
    AdamW(const ParameterSet& like, AdamWConfig config);

    const AdamWConfig& config() const { return config_; }
    void set_lr(double lr) { config_.lr = lr; }
    long steps() const { return steps_; }

    // Applies one update; returns the gradient norm before clipping.
    double step(ParameterSet& params, const ParameterSet& grads);

private:
    AdamWConfig config_;
    ParameterSet m_;
    ParameterSet v_;
    long steps_ = 0;
};

}  // namespace rollforge
