#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "lwtta/autodiff.hpp"
#include "lwtta/tensor.hpp"

namespace lwtta {

enum class LayerKind { Dense, Norm, Relu };

enum class NormMode {
    BatchStatistics,    // current-batch mean/variance (training and test-time adaptation)
    RunningStatistics,  // frozen source statistics
};

const char* to_string(LayerKind kind);

/// One weight-bearing layer: a dense layer's weight+bias or a normalization layer's scale+shift.
struct LayerParams {
    std::string name;
    std::vector<Tensor> params;
    std::vector<Tensor> grads;
    bool trainable = true;

    std::size_t parameter_count() const;
};

struct Module {
    LayerKind kind = LayerKind::Relu;
    LayerParams layer;     // empty for activations
    Tensor running_mean;   // Norm only
    Tensor running_var;    // Norm only
};

/// Tape bindings produced by one forward pass.
struct ForwardPass {
    Var logits;
    std::vector<std::vector<Var>> params;  // indexed by weight-bearing layer, then parameter
    std::vector<Var> norm_outputs;         // one per normalization module, in order
};

/// Dense -> Norm -> ReLU blocks followed by a dense head.
///
/// Layer index `l` in [0, layer_count()) always refers to the l-th
/// weight-bearing module in forward order. Activations are not counted.
class Model {
public:
    static constexpr double kVarianceEps = 1e-5;

    Model(std::size_t input_dim, std::vector<std::size_t> hidden_dims, std::size_t class_count);

    std::size_t input_dim() const noexcept { return input_dim_; }
    std::size_t class_count() const noexcept { return class_count_; }
    const std::vector<std::size_t>& hidden_dims() const noexcept { return hidden_dims_; }

    std::size_t layer_count() const noexcept { return weight_bearing_.size(); }
    LayerParams& layer(std::size_t l) { return modules_.at(weight_bearing_.at(l)).layer; }
    const LayerParams& layer(std::size_t l) const { return modules_.at(weight_bearing_.at(l)).layer; }
    LayerKind layer_kind(std::size_t l) const { return modules_.at(weight_bearing_.at(l)).kind; }

    std::vector<Module>& modules() noexcept { return modules_; }
    const std::vector<Module>& modules() const noexcept { return modules_; }

    std::size_t parameter_count() const;

    /// Records the forward computation on `tape`. Parameters are registered as
    /// differentiable leaves unless `differentiable` is false.
    ForwardPass forward(Tape& tape, Var inputs, NormMode mode, bool differentiable = true) const;

    /// Registers every parameter on `tape`, grouped per weight-bearing layer.
    std::vector<std::vector<Var>> bind_parameters(Tape& tape, bool differentiable = true) const;
    /// Forward pass reusing parameter leaves from bind_parameters (or an earlier pass),
    /// so gradients from several branches accumulate on the same leaves.
    ForwardPass forward_with(Tape& tape, Var inputs, NormMode mode, const std::vector<std::vector<Var>>& params) const;

    /// Exponential moving update of running statistics from a BatchStatistics forward pass.
    void update_running_stats(const Tape& tape, const ForwardPass& pass, double momentum);

private:
    std::size_t input_dim_;
    std::size_t class_count_;
    std::vector<std::size_t> hidden_dims_;
    std::vector<Module> modules_;
    std::vector<std::size_t> weight_bearing_;
};

Model build_classifier(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims, std::size_t class_count,
                       std::uint64_t seed);

/// Logits for a batch; no tape is retained.
Tensor predict(const Model& model, const Tensor& inputs, NormMode mode);

Tensor softmax_rows(const Tensor& logits);
std::vector<std::size_t> argmax_rows(const Tensor& logits);

/// All parameters and running statistics are bitwise identical.
bool bit_equal(const Model& a, const Model& b);

inline constexpr const char* kCheckpointHeader = "LWTTA-CHECKPOINT v1";

void save_checkpoint(const Model& model, std::ostream& out);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(std::istream& in);
Model load_checkpoint(const std::filesystem::path& path);

} // namespace lwtta
