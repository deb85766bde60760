#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lwtta/tensor.hpp"

namespace lwtta {

/// Handle to a node recorded on a Tape. Only meaningful for the tape that produced it.
struct Var {
    std::size_t id = 0;
};

enum class OpKind : std::uint8_t {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Exp,
    Sigmoid,
    LogSigmoid,
    LogSoftmax,
    BatchNorm,
    FixedNorm,
    SumRows,
    Pick,
    Sum,
    Mean,
};

/// Reverse-mode tape over Tensors.
///
/// Nodes are appended in evaluation order, so creation order is a valid
/// topological order and backward is a single reverse sweep. A tape is
/// rebuilt per batch and must not be shared between threads.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    Var parameter(Tensor value);
    Var constant(Tensor value);
    /// Copy of `v`'s value as a constant; no gradient flows back through it.
    Var detach(Var v);

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    bool is_parameter(Var v) const { return nodes_.at(v.id).is_parameter; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var matmul(Var a, Var b);
    Var add_bias(Var x, Var bias);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var x, double factor);
    Var relu(Var x);
    Var exp(Var x);
    Var sigmoid(Var x);
    Var log_sigmoid(Var x);
    Var log_softmax(Var x);
    /// Normalizes each column of x[m, n] by its batch mean and biased variance, then applies gamma/beta.
    Var batch_norm(Var x, Var gamma, Var beta, double variance_eps);
    /// Normalization with externally supplied (non-differentiable) statistics.
    Var fixed_norm(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double variance_eps);
    Var sum_rows(Var x);
    Var pick(Var x, std::span<const std::size_t> columns);
    Var sum(Var x);
    Var mean(Var x);

    /// Batch mean and biased variance recorded by a batch_norm node.
    std::pair<const Tensor&, const Tensor&> batch_statistics(Var norm_output) const;

    /// Reverse sweep from a rank-0 output. Gradients from any earlier sweep are discarded.
    void backward(Var output);
    /// Reverse sweep seeded with an explicit output cotangent of the output's shape.
    void backward_with_seed(Var output, const Tensor& seed);

    /// True once a backward sweep has run and `v` is a differentiable parameter.
    bool has_gradient(Var v) const;
    const Tensor& gradient(Var v) const;

private:
    struct Node {
        OpKind op = OpKind::Leaf;
        std::array<std::size_t, 3> inputs{};
        std::uint8_t input_count = 0;
        bool requires_grad = false;
        bool is_parameter = false;
        double factor = 0.0;
        Tensor value;
        Tensor aux;   // cached forward quantity (normalized input, sigmoid, ...)
        Tensor aux2;  // inverse std for normalization nodes
        Tensor aux3;  // batch mean for batch_norm
        Tensor aux4;  // batch variance for batch_norm
        std::vector<std::size_t> columns;
    };

    Var push(Node node);
    void accumulate(std::size_t id, Tensor contribution);
    void accumulate_into(std::size_t id, const Tensor& contribution);
    void propagate(std::size_t id);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<char> has_grad_;
    bool backward_done_ = false;
};

} // namespace lwtta
