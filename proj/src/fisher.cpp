#include "lwtta/fisher.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace lwtta {

namespace {

Tensor flatten_layer_gradient(const Tape& tape, const std::vector<Var>& params) {
    std::size_t n = 0;
    for (Var v : params) n += tape.value(v).size();
    std::vector<double> flat;
    flat.reserve(n);
    for (Var v : params) {
        const auto g = tape.gradient(v).data();
        flat.insert(flat.end(), g.begin(), g.end());
    }
    return Tensor({n}, std::move(flat));
}

void require_samples(const char* op, const SampleScores& scores) {
    if (scores.empty()) throw std::invalid_argument(std::string(op) + ": empty sample list");
    const std::size_t layers = scores.front().size();
    for (const auto& s : scores) {
        if (s.size() != layers) throw std::invalid_argument(std::string(op) + ": inconsistent layer count across samples");
    }
}

} // namespace

SampleScores per_sample_scores(Tape& tape, const ForwardPass& pass) {
    const Tensor& logits = tape.value(pass.logits);
    const auto pseudo = argmax_rows(logits);
    const Var log_likelihood = tape.pick(tape.log_softmax(pass.logits), pseudo);
    const std::size_t batch = logits.dim(0);

    SampleScores scores(batch);
    Tensor seed({batch});
    for (std::size_t i = 0; i < batch; ++i) {
        seed[i] = 1.0;
        tape.backward_with_seed(log_likelihood, seed);
        seed[i] = 0.0;
        auto& per_layer = scores[i];
        per_layer.reserve(pass.params.size());
        for (const auto& layer : pass.params) per_layer.push_back(flatten_layer_gradient(tape, layer));
    }
    return scores;
}

SampleScores per_sample_scores(const Model& model, const Tensor& inputs, NormMode mode) {
    Tape tape;
    const ForwardPass pass = model.forward(tape, tape.constant(inputs), mode);
    return per_sample_scores(tape, pass);
}

LayerVectors score(const Model& model, const Tensor& inputs, NormMode mode) {
    Tape tape;
    const ForwardPass pass = model.forward(tape, tape.constant(inputs), mode);
    const auto pseudo = argmax_rows(tape.value(pass.logits));
    const Var mean_ll = tape.mean(tape.pick(tape.log_softmax(pass.logits), pseudo));
    tape.backward(mean_ll);
    LayerVectors out;
    for (const auto& layer : pass.params) out.push_back(flatten_layer_gradient(tape, layer));
    return out;
}

std::vector<double> layer_fim_trace(const SampleScores& scores) {
    require_samples("layer_fim_trace", scores);
    const std::size_t layers = scores.front().size();
    std::vector<double> trace(layers, 0.0);
    for (const auto& sample : scores) {
        for (std::size_t l = 0; l < layers; ++l) {
            double sq = 0.0;
            for (double v : sample[l].data()) sq += v * v;
            trace[l] += sq;
        }
    }
    for (double& t : trace) t /= static_cast<double>(scores.size());
    return trace;
}

LayerVectors fim_diagonal(const SampleScores& scores) {
    require_samples("fim_diagonal", scores);
    LayerVectors diag;
    for (const Tensor& t : scores.front()) diag.emplace_back(t.shape());
    for (const auto& sample : scores) {
        for (std::size_t l = 0; l < diag.size(); ++l) {
            const Tensor& s = sample[l];
            if (s.shape() != diag[l].shape()) throw std::invalid_argument("fim_diagonal: score shape mismatch");
            for (std::size_t k = 0; k < s.size(); ++k) diag[l][k] += s[k] * s[k];
        }
    }
    const double inv = 1.0 / static_cast<double>(scores.size());
    for (Tensor& d : diag)
        for (double& v : d.data()) v *= inv;
    return diag;
}

FisherState::FisherState(std::size_t layer_count, double gamma, bool track_diagonal)
    : trace_(layer_count, 0.0), gamma_(gamma), track_diagonal_(track_diagonal) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) {
        throw std::invalid_argument("FisherState: gamma must lie in [0, 1], got " + std::to_string(gamma));
    }
}

void FisherState::accumulate(std::span<const double> current) {
    if (current.size() != trace_.size()) {
        throw std::invalid_argument("FisherState::accumulate: expected " + std::to_string(trace_.size()) +
                                    " layers, got " + std::to_string(current.size()));
    }
    for (std::size_t l = 0; l < trace_.size(); ++l) trace_[l] = gamma_ * trace_[l] + current[l];
    ++step_;
}

void FisherState::accumulate(std::span<const double> current, const LayerVectors& current_diagonal) {
    if (track_diagonal_) {
        if (current_diagonal.size() != trace_.size()) {
            throw std::invalid_argument("FisherState::accumulate: diagonal layer count mismatch");
        }
        if (diagonal_.empty()) {
            for (const Tensor& d : current_diagonal) diagonal_.emplace_back(d.shape());
        }
        for (std::size_t l = 0; l < diagonal_.size(); ++l) {
            Tensor& acc = diagonal_[l];
            const Tensor& cur = current_diagonal[l];
            if (acc.shape() != cur.shape()) throw std::invalid_argument("FisherState::accumulate: diagonal shape mismatch");
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] = gamma_ * acc[k] + cur[k];
        }
    }
    accumulate(current);
}

std::vector<double> learning_weights(const FisherState& state) {
    std::vector<double> w;
    w.reserve(state.layer_count());
    for (double t : state.trace()) w.push_back(std::sqrt(t));
    return w;
}

} // namespace lwtta
