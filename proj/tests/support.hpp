#pragma once

// Shared oracles for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "lwtta/autodiff.hpp"
#include "lwtta/model.hpp"
#include "lwtta/tensor.hpp"

namespace lwtta::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> normal(0.0, scale);
    for (double& v : t.data()) v = normal(rng);
    return t;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheck {
    double max_rel = 0.0;
    std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
/// derivative is zero from dividing roundoff by roundoff.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central finite differences of a scalar builder against reverse mode,
/// over every coordinate of every leaf.
inline GradCheck check_gradients(const Builder& build, const std::vector<Tensor>& leaves, double h = 1e-5) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : leaves) vars.push_back(tape.parameter(t));
    tape.backward(build(tape, vars));

    auto evaluate = [&](const std::vector<Tensor>& at) {
        Tape t;
        std::vector<Var> v;
        for (const Tensor& x : at) v.push_back(t.parameter(x));
        return t.value(build(t, v)).item();
    };

    GradCheck result;
    std::vector<Tensor> probe = leaves;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        const Tensor& g = tape.gradient(vars[k]);
        for (std::size_t i = 0; i < leaves[k].size(); ++i) {
            const double x = leaves[k][i];
            probe[k][i] = x + h;
            const double up = evaluate(probe);
            probe[k][i] = x - h;
            const double down = evaluate(probe);
            probe[k][i] = x;
            result.max_rel = std::max(result.max_rel, relative_error(g[i], (up - down) / (2.0 * h)));
            ++result.checked;
        }
    }
    return result;
}

/// Every model parameter tensor in layer order.
inline std::vector<Tensor> flatten_params(const Model& model) {
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < model.layer_count(); ++l)
        for (const Tensor& p : model.layer(l).params) out.push_back(p);
    return out;
}

/// Regroups flat leaves into the [layer][param] layout forward_with expects.
inline std::vector<std::vector<Var>> regroup(const Model& model, const std::vector<Var>& flat) {
    std::vector<std::vector<Var>> params;
    std::size_t k = 0;
    for (std::size_t l = 0; l < model.layer_count(); ++l) {
        std::vector<Var> layer;
        for (std::size_t p = 0; p < model.layer(l).params.size(); ++p) layer.push_back(flat[k++]);
        params.push_back(std::move(layer));
    }
    return params;
}

} // namespace lwtta::testing
