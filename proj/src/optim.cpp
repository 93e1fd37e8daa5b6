#include "rollforge/optim.hpp"

#include <cmath>

#include "rollforge/errors.hpp"

namespace rollforge {

AdamW::AdamW(const ParameterSet& like, AdamWConfig config)
    : config_(config), m_(like.zeros_like()), v_(like.zeros_like()) {
    if (!(config_.lr > 0.0)) throw DomainError("learning rate must be positive");
    if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0 && config_.beta2 >= 0.0 && config_.beta2 < 1.0)) {
        throw DomainError("adam betas must lie in [0, 1)");
    }
}

double AdamW::step(ParameterSet& params, const ParameterSet& grads) {
    if (grads.size() != params.size() || m_.size() != params.size()) {
        throw ContractError("optimizer state does not match parameters");
    }
    const double norm = std::sqrt(grads.squared_norm());
    double scale = 1.0;
    if (config_.max_grad_norm > 0.0 && norm > config_.max_grad_norm) scale = config_.max_grad_norm / norm;
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (size_t i = 0; i < params.size(); ++i) {
        Mat& p = params[i];
        Mat& m = m_[i];
        Mat& v = v_[i];
        const Mat g = grads[i] * scale;
        m = config_.beta1 * m + (1.0 - config_.beta1) * g;
        v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseAbs2();
        if (config_.weight_decay != 0.0) p *= 1.0 - config_.lr * config_.weight_decay;
        p.array() -= config_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.eps);
    }
    return norm;
}

}  // namespace rollforge
