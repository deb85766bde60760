#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lwtta/autodiff.hpp"
#include "lwtta/model.hpp"
#include "lwtta/tensor.hpp"

namespace lwtta {

/// Flattened per-layer vectors, indexed by weight-bearing layer.
using LayerVectors = std::vector<Tensor>;
/// Per-sample score vectors: [sample][layer].
using SampleScores = std::vector<LayerVectors>;

/// Score of every sample in a batch: gradient of log p(argmax | x_i) with
/// respect to each layer, taken on the tape that already holds `pass`.
/// Each sample gets its own reverse sweep, so the normalization coupling
/// between samples of the batch is kept exactly. The model is not touched.
SampleScores per_sample_scores(Tape& tape, const ForwardPass& pass);
SampleScores per_sample_scores(const Model& model, const Tensor& inputs, NormMode mode);

/// Gradient of the batch-mean log-likelihood under hard pseudo-labels.
LayerVectors score(const Model& model, const Tensor& inputs, NormMode mode);

/// Tr(E[s s^T]) per layer, computed as E[||s||^2].
std::vector<double> layer_fim_trace(const SampleScores& scores);

/// diag(E[s s^T]) per layer. Used for dumps only.
LayerVectors fim_diagonal(const SampleScores& scores);

/// Decayed running sum of per-layer FIM traces (and optionally diagonals).
class FisherState {
public:
    FisherState(std::size_t layer_count, double gamma = 1.0, bool track_diagonal = false);

    /// trace <- gamma * trace + current; advances the step counter.
    void accumulate(std::span<const double> current);
    void accumulate(std::span<const double> current, const LayerVectors& current_diagonal);

    std::size_t layer_count() const noexcept { return trace_.size(); }
    std::span<const double> trace() const noexcept { return trace_; }
    const LayerVectors& diagonal() const noexcept { return diagonal_; }
    bool tracks_diagonal() const noexcept { return track_diagonal_; }
    double gamma() const noexcept { return gamma_; }
    std::size_t step() const noexcept { return step_; }

private:
    std::vector<double> trace_;
    LayerVectors diagonal_;
    double gamma_;
    bool track_diagonal_;
    std::size_t step_ = 0;
};

/// w^l = sqrt(accumulated trace).
std::vector<double> learning_weights(const FisherState& state);

} // namespace lwtta
