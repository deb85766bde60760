#include "lwtta/losses.hpp"

#include <stdexcept>
#include <string>

#include "lwtta/model.hpp"

namespace lwtta {

namespace {

Var reduce(Tape& tape, Var per_sample, Reduction reduction) {
    return reduction == Reduction::BatchMean ? tape.mean(per_sample) : tape.sum(per_sample);
}

void require_logits(const char* op, const Tensor& logits) {
    if (logits.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected logits [batch, C], got " + shape_str(logits.shape()));
    }
}

} // namespace

Var entropy_loss(Tape& tape, Var logits, Reduction reduction) {
    const Tensor& y = tape.value(logits);
    require_logits("entropy_loss", y);
    if (y.dim(1) < 2) throw std::invalid_argument("entropy_loss: need at least 2 classes, got " + std::to_string(y.dim(1)));
    const Var log_p = tape.log_softmax(logits);
    const Var p = tape.exp(log_p);
    const Var per_sample = tape.scale(tape.sum_rows(tape.mul(p, log_p)), -1.0);
    return reduce(tape, per_sample, reduction);
}

Var consistency_loss(Tape& tape, Var logits, Var augmented_logits, ConsistencyKind kind, Reduction reduction) {
    const Tensor& y = tape.value(logits);
    const Tensor& y_hat = tape.value(augmented_logits);
    require_logits("consistency_loss", y);
    if (y.shape() != y_hat.shape()) {
        throw std::invalid_argument("consistency_loss: shape mismatch " + shape_str(y.shape()) + " vs " +
                                    shape_str(y_hat.shape()));
    }
    Var target;
    Var log_q;
    if (kind == ConsistencyKind::Sigmoid) {
        target = tape.sigmoid(tape.detach(logits));
        log_q = tape.log_sigmoid(augmented_logits);
    } else {
        target = tape.constant(softmax_rows(y));
        log_q = tape.log_softmax(augmented_logits);
    }
    const Var per_sample = tape.scale(tape.sum_rows(tape.mul(target, log_q)), -1.0);
    return reduce(tape, per_sample, reduction);
}

Var combine_losses(Tape& tape, Var entropy, Var consistency, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("combine_losses: lambda must be >= 0");
    if (lambda == 0.0) return entropy;
    return tape.add(entropy, tape.scale(consistency, lambda));
}

Var total_loss(Tape& tape, Var logits, Var augmented_logits, const LossConfig& config) {
    if (config.lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
    const Var entropy = entropy_loss(tape, logits, config.reduction);
    if (config.lambda == 0.0) return entropy;
    const Var consistency = consistency_loss(tape, logits, augmented_logits, config.consistency, config.reduction);
    return combine_losses(tape, entropy, consistency, config.lambda);
}

Var nll_loss(Tape& tape, Var logits, std::span<const std::size_t> labels, Reduction reduction) {
    const Tensor& y = tape.value(logits);
    require_logits("nll_loss", y);
    for (auto label : labels) {
        if (label >= y.dim(1)) {
            throw std::out_of_range("nll_loss: label " + std::to_string(label) + " outside [0, " +
                                    std::to_string(y.dim(1)) + ")");
        }
    }
    const Var picked = tape.pick(tape.log_softmax(logits), labels);
    return tape.scale(reduce(tape, picked, reduction), -1.0);
}

Tensor augment(const Tensor& inputs, const AugmentConfig& config, std::mt19937_64& rng) {
    if (inputs.rank() != 2) throw std::invalid_argument("augment: expected [batch, d], got " + shape_str(inputs.shape()));
    Tensor out = inputs;
    const std::size_t m = inputs.dim(0), d = inputs.dim(1);
    if (config.feature_scaling) {
        std::uniform_real_distribution<double> factor(0.9, 1.1);
        std::vector<double> scales(d);
        for (auto& s : scales) s = factor(rng);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) out.at(i, j) *= scales[j];
    }
    if (config.noise_scale > 0.0) {
        std::normal_distribution<double> noise(0.0, config.noise_scale);
        for (double& v : out.data()) v += noise(rng);
    }
    return out;
}

} // namespace lwtta
