#include "lwtta/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace lwtta {

std::vector<double> exp_minmax_scale(std::span<const double> raw, double tau, double eps) {
    if (raw.size() < 2) throw std::invalid_argument("exp_minmax_scale: need at least 2 layers");
    if (!(tau >= 0.0)) throw std::invalid_argument("exp_minmax_scale: tau must be >= 0");
    if (!(eps > 0.0)) throw std::invalid_argument("exp_minmax_scale: eps must be > 0");
    if (tau == 0.0) return std::vector<double>(raw.size(), 1.0);

    const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
    const double w_min = *lo;
    const double denom = *hi - w_min + eps;
    std::vector<double> scaled;
    scaled.reserve(raw.size());
    for (double w : raw) {
        const double ratio = (w - w_min) / denom;
        scaled.push_back(tau == 1.0 ? ratio : std::pow(ratio, tau));
    }
    return scaled;
}

std::vector<double> layer_rates(std::span<const double> scaled, double eta) {
    if (!(eta > 0.0)) throw std::invalid_argument("layer_rates: eta must be > 0");
    std::vector<double> rates;
    rates.reserve(scaled.size());
    for (double s : scaled) rates.push_back(eta * s);
    return rates;
}

std::vector<double> naive_rates(std::span<const double> raw, double eta) { return layer_rates(raw, eta); }

bool gradients_finite(const LayerGradients& grads) {
    return std::all_of(grads.begin(), grads.end(), [](const auto& layer) {
        return std::all_of(layer.begin(), layer.end(), [](const Tensor& g) { return g.all_finite(); });
    });
}

namespace {

void check_layout(const Model& model, const LayerGradients& grads, std::span<const double> rates) {
    if (grads.size() != model.layer_count() || rates.size() != model.layer_count()) {
        throw std::invalid_argument("weighted_step: expected gradients and rates for " +
                                    std::to_string(model.layer_count()) + " layers, got " +
                                    std::to_string(grads.size()) + " and " + std::to_string(rates.size()));
    }
    for (std::size_t l = 0; l < grads.size(); ++l) {
        const auto& params = model.layer(l).params;
        if (grads[l].size() != params.size()) throw std::invalid_argument("weighted_step: parameter count mismatch");
        for (std::size_t p = 0; p < params.size(); ++p) {
            if (grads[l][p].shape() != params[p].shape()) {
                throw std::invalid_argument("weighted_step: gradient shape " + shape_str(grads[l][p].shape()) +
                                            " vs parameter " + shape_str(params[p].shape()) + " in layer " +
                                            model.layer(l).name);
            }
        }
    }
}

} // namespace

StepStatus weighted_step(Model& model, const LayerGradients& grads, std::span<const double> rates) {
    check_layout(model, grads, rates);
    if (!gradients_finite(grads)) return StepStatus::Rejected;
    for (std::size_t l = 0; l < grads.size(); ++l) {
        LayerParams& layer = model.layer(l);
        const double rate = rates[l];
        if (!layer.trainable || rate == 0.0) continue;
        for (std::size_t p = 0; p < layer.params.size(); ++p) {
            auto theta = layer.params[p].data();
            const auto g = grads[l][p].data();
            for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= rate * g[k];
        }
    }
    return StepStatus::Applied;
}

LayerwiseOptimizer::LayerwiseOptimizer(const Model& model, OptimizerKind kind, double base_rate, AdamConfig adam,
                                       RateMode mode)
    : kind_(kind), base_rate_(base_rate), adam_(adam), mode_(mode) {
    if (!(base_rate > 0.0)) throw std::invalid_argument("LayerwiseOptimizer: base rate must be > 0");
    if (kind_ == OptimizerKind::Adam) {
        for (std::size_t l = 0; l < model.layer_count(); ++l) {
            std::vector<Tensor> zeros;
            for (const Tensor& p : model.layer(l).params) zeros.emplace_back(p.shape());
            first_.push_back(zeros);
            second_.push_back(std::move(zeros));
        }
    }
}

StepStatus LayerwiseOptimizer::step(Model& model, const LayerGradients& grads, std::span<const double> rates) {
    if (kind_ == OptimizerKind::Sgd) return weighted_step(model, grads, rates);

    check_layout(model, grads, rates);
    if (!gradients_finite(grads)) return StepStatus::Rejected;
    ++t_;
    const double bias1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(t_));
    const double bias2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(t_));

    for (std::size_t l = 0; l < grads.size(); ++l) {
        LayerParams& layer = model.layer(l);
        if (!layer.trainable) continue;
        const double grad_scale = mode_ == RateMode::GradientScale ? rates[l] / base_rate_ : 1.0;
        const double step_size = mode_ == RateMode::GradientScale ? base_rate_ : rates[l];
        for (std::size_t p = 0; p < layer.params.size(); ++p) {
            auto theta = layer.params[p].data();
            auto m = first_[l][p].data();
            auto v = second_[l][p].data();
            const auto g = grads[l][p].data();
            for (std::size_t k = 0; k < theta.size(); ++k) {
                const double gk = g[k] * grad_scale;
                m[k] = adam_.beta1 * m[k] + (1.0 - adam_.beta1) * gk;
                v[k] = adam_.beta2 * v[k] + (1.0 - adam_.beta2) * gk * gk;
                if (step_size == 0.0) continue;
                const double m_hat = m[k] / bias1;
                const double v_hat = v[k] / bias2;
                theta[k] -= step_size * m_hat / (std::sqrt(v_hat) + adam_.eps);
            }
        }
    }
    return StepStatus::Applied;
}

} // namespace lwtta
