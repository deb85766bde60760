#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lwtta/model.hpp"
#include "lwtta/tensor.hpp"

namespace lwtta {

inline constexpr double kScalerEpsilon = 1e-8;

/// ((w - w_min) / (w_max - w_min + eps))^tau per layer. tau == 0 yields all ones.
/// Requires at least two layers, eps > 0 and tau >= 0.
std::vector<double> exp_minmax_scale(std::span<const double> raw, double tau, double eps = kScalerEpsilon);

/// eta^l = eta * scaled^l.
std::vector<double> layer_rates(std::span<const double> scaled, double eta);

/// Unbounded variant eta^l = eta * w^l (no scaler).
std::vector<double> naive_rates(std::span<const double> raw, double eta);

/// Gradients grouped as [layer][parameter], matching Model::layer(l).params.
using LayerGradients = std::vector<std::vector<Tensor>>;

enum class StepStatus { Applied, Rejected };

bool gradients_finite(const LayerGradients& grads);

/// theta^l <- theta^l - eta^l * grad^l. Layers with a zero rate, or marked
/// non-trainable, are left untouched. Non-finite gradients reject the whole step.
StepStatus weighted_step(Model& model, const LayerGradients& grads, std::span<const double> rates);

enum class OptimizerKind { Adam, Sgd };

/// How a per-layer rate enters Adam.
enum class RateMode {
    StepSize,       // eta^l is the layer's Adam step size
    GradientScale,  // gradient is scaled by eta^l / eta before the moment updates; step size eta
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Per-layer-rate optimizer. Adam moments persist across calls and are never reset.
class LayerwiseOptimizer {
public:
    LayerwiseOptimizer(const Model& model, OptimizerKind kind, double base_rate, AdamConfig adam = {},
                       RateMode mode = RateMode::StepSize);

    StepStatus step(Model& model, const LayerGradients& grads, std::span<const double> rates);

    OptimizerKind kind() const noexcept { return kind_; }
    std::size_t steps_taken() const noexcept { return t_; }

private:
    OptimizerKind kind_;
    double base_rate_;
    AdamConfig adam_;
    RateMode mode_;
    std::size_t t_ = 0;
    std::vector<std::vector<Tensor>> first_;
    std::vector<std::vector<Tensor>> second_;
};

} // namespace lwtta
