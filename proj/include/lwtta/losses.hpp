#pragma once

#include <cstddef>
#include <random>
#include <span>

#include "lwtta/autodiff.hpp"
#include "lwtta/tensor.hpp"

namespace lwtta {

enum class Reduction { BatchMean, BatchSum };

enum class ConsistencyKind {
    Sigmoid,  // elementwise sigmoid on both branches, as written for the consistency term
    Softmax,  // conventional soft-label cross-entropy
};

struct AugmentConfig {
    double noise_scale = 0.05;
    bool feature_scaling = true;  // per-feature factor drawn from [0.9, 1.1]
};

struct LossConfig {
    double lambda = 0.1;
    ConsistencyKind consistency = ConsistencyKind::Sigmoid;
    Reduction reduction = Reduction::BatchMean;
    AugmentConfig augment;
};

/// Shannon entropy of softmax(logits), reduced over the batch. Requires C >= 2.
Var entropy_loss(Tape& tape, Var logits, Reduction reduction = Reduction::BatchMean);

/// -sum_c sigma(y_c) log sigma(yhat_c) with `logits` detached as the pseudo-label.
Var consistency_loss(Tape& tape, Var logits, Var augmented_logits, ConsistencyKind kind = ConsistencyKind::Sigmoid,
                     Reduction reduction = Reduction::BatchMean);

/// entropy + lambda * consistency on already-recorded terms; returns `entropy` itself when lambda == 0.
Var combine_losses(Tape& tape, Var entropy, Var consistency, double lambda);

/// entropy + lambda * consistency. With lambda == 0 the consistency branch is not recorded at all.
Var total_loss(Tape& tape, Var logits, Var augmented_logits, const LossConfig& config);

/// Mean (or summed) -log softmax(logits)[label].
Var nll_loss(Tape& tape, Var logits, std::span<const std::size_t> labels, Reduction reduction = Reduction::BatchMean);

/// Gaussian jitter plus per-feature scaling in [0.9, 1.1]. Identity when both are disabled.
Tensor augment(const Tensor& inputs, const AugmentConfig& config, std::mt19937_64& rng);

} // namespace lwtta
