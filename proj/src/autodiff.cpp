#include "lwtta/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace lwtta {

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                    shape_str(t.shape()));
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_log_sigmoid(double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); }

} // namespace

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    backward_done_ = false;
    return Var{nodes_.size() - 1};
}

Var Tape::parameter(Tensor value) {
    Node n;
    n.requires_grad = true;
    n.is_parameter = true;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::detach(Var v) { return constant(value(v)); }

Var Tape::matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) shape_error("matmul", A.shape(), B.shape());
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor C({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = &C[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = &B[p * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    Node node;
    node.op = OpKind::MatMul;
    node.inputs = {a.id, b.id, 0};
    node.input_count = 2;
    node.requires_grad = requires_grad(a) || requires_grad(b);
    node.value = std::move(C);
    return push(std::move(node));
}

Var Tape::add_bias(Var x, Var bias) {
    const Tensor& X = value(x);
    const Tensor& b = value(bias);
    if (X.rank() != 2 || b.rank() != 1 || X.dim(1) != b.dim(0)) shape_error("add_bias", X.shape(), b.shape());
    Tensor Y = X;
    const std::size_t m = X.dim(0), n = X.dim(1);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) Y[i * n + j] += b[j];
    Node node;
    node.op = OpKind::AddBias;
    node.inputs = {x.id, bias.id, 0};
    node.input_count = 2;
    node.requires_grad = requires_grad(x) || requires_grad(bias);
    node.value = std::move(Y);
    return push(std::move(node));
}

namespace {
template <class F>
Tensor zip(const char* op, const Tensor& a, const Tensor& b, F f) {
    if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

template <class F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}
} // namespace

Var Tape::add(Var a, Var b) {
    Node node;
    node.op = OpKind::Add;
    node.value = zip("add", value(a), value(b), [](double x, double y) { return x + y; });
    node.inputs = {a.id, b.id, 0};
    node.input_count = 2;
    node.requires_grad = requires_grad(a) || requires_grad(b);
    return push(std::move(node));
}

Var Tape::sub(Var a, Var b) {
    Node node;
    node.op = OpKind::Sub;
    node.value = zip("sub", value(a), value(b), [](double x, double y) { return x - y; });
    node.inputs = {a.id, b.id, 0};
    node.input_count = 2;
    node.requires_grad = requires_grad(a) || requires_grad(b);
    return push(std::move(node));
}

Var Tape::mul(Var a, Var b) {
    Node node;
    node.op = OpKind::Mul;
    node.value = zip("mul", value(a), value(b), [](double x, double y) { return x * y; });
    node.inputs = {a.id, b.id, 0};
    node.input_count = 2;
    node.requires_grad = requires_grad(a) || requires_grad(b);
    return push(std::move(node));
}

Var Tape::scale(Var x, double factor) {
    Node node;
    node.op = OpKind::Scale;
    node.factor = factor;
    node.value = map(value(x), [factor](double v) { return v * factor; });
    node.inputs = {x.id, 0, 0};
    node.input_count = 1;
    node.requires_grad = requires_grad(x);
    return push(std::move(node));
}

Var Tape::relu(Var x) {
    Node node;
    node.op = OpKind::Relu;
    node.value = map(value(x), [](double v) { return v > 0.0 ? v : 0.0; });
    node.inputs = {x.id, 0, 0};
    node.input_count = 1;
    node.requires_grad = requires_grad(x);
    return push(std::move(node));
}

Var Tape::exp(Var x) {
    Node node;
    node.op = OpKind::Exp;
    node.value = map(value(x), [](double v) { return std::exp(v); });
    node.inputs = {x.id, 0, 0};
    node.input_count = 1;
    node.requires_grad = requires_grad(x);
    return push(std::move(node));
}

Var Tape::sigmoid(Var x) {
    Node node;
    node.op = OpKind::Sigmoid;
    node.value = map(value(x), stable_sigmoid);
    node.inputs = {x.id, 0, 0};
    node.input_count = 1;
    node.requires_grad = requires_grad(x);
    return push(std::move(node));
}

Var Tape::log_sigmoid(Var x) {
    Node node;
    node.op = OpKind::LogSigmoid;
    node.value = map(value(x), stable_log_sigmoid);
    // d/dx log sigmoid(x) = sigmoid(-x)
    node.aux = map(value(x), [](double v) { return stable_sigmoid(-v); });
    node.inputs = {x.id, 0, 0};
    node.input_count = 1;
    node.requires_grad = requires_grad(x);
    return push(std::move(node));
}

Var Tape::log_softmax(Var x) {
    const Tensor& X = value(x);
    require_rank("log_softmax", X, 2);
    const std::size_t m = X.dim(0), n = X.dim(1);
    Tensor Y(X.shape());
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &X[i * n];
        const double mx = *std::max_element(row, row + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) Y[i * n + j] = row[j] - lse;
    }
    Node node;
    node.op = OpKind::LogSoftmax;
    node.value = std::move(Y);
    node.inputs = {x.id, 0, 0};
    node.input_count = 1;
    node.requires_grad = requires_grad(x);
    return push(std::move(node));
}

Var Tape::batch_norm(Var x, Var gamma, Var beta, double variance_eps) {
    const Tensor& X = value(x);
    const Tensor& G = value(gamma);
    const Tensor& B = value(beta);
    require_rank("batch_norm", X, 2);
    const std::size_t m = X.dim(0), n = X.dim(1);
    if (G.shape() != Shape{n}) shape_error("batch_norm", X.shape(), G.shape());
    if (B.shape() != Shape{n}) shape_error("batch_norm", X.shape(), B.shape());

    Tensor mean({n}), var({n}), inv_std({n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) mean[j] += X[i * n + j];
    for (std::size_t j = 0; j < n; ++j) mean[j] /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double d = X[i * n + j] - mean[j];
            var[j] += d * d;
        }
    for (std::size_t j = 0; j < n; ++j) {
        var[j] /= static_cast<double>(m);
        inv_std[j] = 1.0 / std::sqrt(var[j] + variance_eps);
    }
    Tensor xhat(X.shape()), Y(X.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (X[i * n + j] - mean[j]) * inv_std[j];
            xhat[i * n + j] = h;
            Y[i * n + j] = G[j] * h + B[j];
        }

    Node node;
    node.op = OpKind::BatchNorm;
    node.inputs = {x.id, gamma.id, beta.id};
    node.input_count = 3;
    node.requires_grad = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    node.value = std::move(Y);
    node.aux = std::move(xhat);
    node.aux2 = std::move(inv_std);
    node.aux3 = std::move(mean);
    node.aux4 = std::move(var);
    return push(std::move(node));
}

Var Tape::fixed_norm(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double variance_eps) {
    const Tensor& X = value(x);
    const Tensor& G = value(gamma);
    const Tensor& B = value(beta);
    require_rank("fixed_norm", X, 2);
    const std::size_t m = X.dim(0), n = X.dim(1);
    for (const Tensor* t : {&G, &B, &mean, &var}) {
        if (t->shape() != Shape{n}) shape_error("fixed_norm", X.shape(), t->shape());
    }
    Tensor inv_std({n});
    for (std::size_t j = 0; j < n; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + variance_eps);
    Tensor xhat(X.shape()), Y(X.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (X[i * n + j] - mean[j]) * inv_std[j];
            xhat[i * n + j] = h;
            Y[i * n + j] = G[j] * h + B[j];
        }
    Node node;
    node.op = OpKind::FixedNorm;
    node.inputs = {x.id, gamma.id, beta.id};
    node.input_count = 3;
    node.requires_grad = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    node.value = std::move(Y);
    node.aux = std::move(xhat);
    node.aux2 = std::move(inv_std);
    return push(std::move(node));
}

Var Tape::sum_rows(Var x) {
    const Tensor& X = value(x);
    require_rank("sum_rows", X, 2);
    const std::size_t m = X.dim(0), n = X.dim(1);
    Tensor Y({m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) Y[i] += X[i * n + j];
    Node node;
    node.op = OpKind::SumRows;
    node.value = std::move(Y);
    node.inputs = {x.id, 0, 0};
    node.input_count = 1;
    node.requires_grad = requires_grad(x);
    return push(std::move(node));
}

Var Tape::pick(Var x, std::span<const std::size_t> columns) {
    const Tensor& X = value(x);
    require_rank("pick", X, 2);
    const std::size_t m = X.dim(0), n = X.dim(1);
    if (columns.size() != m) {
        throw std::invalid_argument("pick: " + std::to_string(columns.size()) + " indices for input of shape " +
                                    shape_str(X.shape()));
    }
    Tensor Y({m});
    for (std::size_t i = 0; i < m; ++i) {
        if (columns[i] >= n) {
            throw std::out_of_range("pick: index " + std::to_string(columns[i]) + " out of range for shape " +
                                    shape_str(X.shape()));
        }
        Y[i] = X[i * n + columns[i]];
    }
    Node node;
    node.op = OpKind::Pick;
    node.value = std::move(Y);
    node.columns.assign(columns.begin(), columns.end());
    node.inputs = {x.id, 0, 0};
    node.input_count = 1;
    node.requires_grad = requires_grad(x);
    return push(std::move(node));
}

Var Tape::sum(Var x) {
    double s = 0.0;
    for (double v : value(x).data()) s += v;
    Node node;
    node.op = OpKind::Sum;
    node.value = Tensor::scalar(s);
    node.inputs = {x.id, 0, 0};
    node.input_count = 1;
    node.requires_grad = requires_grad(x);
    return push(std::move(node));
}

Var Tape::mean(Var x) {
    double s = 0.0;
    for (double v : value(x).data()) s += v;
    Node node;
    node.op = OpKind::Mean;
    node.value = Tensor::scalar(s / static_cast<double>(value(x).size()));
    node.inputs = {x.id, 0, 0};
    node.input_count = 1;
    node.requires_grad = requires_grad(x);
    return push(std::move(node));
}

std::pair<const Tensor&, const Tensor&> Tape::batch_statistics(Var norm_output) const {
    const Node& n = nodes_.at(norm_output.id);
    if (n.op != OpKind::BatchNorm) throw std::invalid_argument("batch_statistics: node is not a batch_norm output");
    return {n.aux3, n.aux4};
}

void Tape::backward(Var output) {
    const Tensor& out = value(output);
    if (out.rank() != 0) {
        throw std::invalid_argument("backward: output must be a scalar, got shape " + shape_str(out.shape()));
    }
    backward_with_seed(output, Tensor::scalar(1.0));
}

void Tape::backward_with_seed(Var output, const Tensor& seed) {
    if (nodes_.empty()) throw std::logic_error("backward: empty tape");
    if (seed.shape() != value(output).shape()) shape_error("backward", value(output).shape(), seed.shape());

    grads_.assign(nodes_.size(), Tensor{});
    has_grad_.assign(nodes_.size(), 0);
    if (requires_grad(output)) {
        grads_[output.id] = seed;
        has_grad_[output.id] = 1;
        for (std::size_t id = output.id + 1; id-- > 0;) {
            if (has_grad_[id] && nodes_[id].op != OpKind::Leaf) propagate(id);
        }
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        if (nodes_[id].is_parameter && !has_grad_[id]) {
            grads_[id] = Tensor(nodes_[id].value.shape());
            has_grad_[id] = 1;
        }
    }
    backward_done_ = true;
}

bool Tape::has_gradient(Var v) const {
    return backward_done_ && v.id < nodes_.size() && nodes_[v.id].is_parameter;
}

const Tensor& Tape::gradient(Var v) const {
    if (!has_gradient(v)) throw std::logic_error("gradient: node is not a parameter or backward has not run");
    return grads_[v.id];
}

void Tape::accumulate(std::size_t id, Tensor contribution) {
    if (!nodes_[id].requires_grad) return;
    if (!has_grad_[id]) {
        grads_[id] = std::move(contribution);
        has_grad_[id] = 1;
        return;
    }
    Tensor& g = grads_[id];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

void Tape::accumulate_into(std::size_t id, const Tensor& contribution) {
    if (!nodes_[id].requires_grad) return;
    if (!has_grad_[id]) {
        grads_[id] = contribution;
        has_grad_[id] = 1;
        return;
    }
    Tensor& g = grads_[id];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

void Tape::propagate(std::size_t id) {
    const Node& node = nodes_[id];
    const Tensor& dy = grads_[id];
    const auto in0 = node.inputs[0];
    const auto in1 = node.inputs[1];
    const auto in2 = node.inputs[2];

    switch (node.op) {
    case OpKind::Leaf:
        break;
    case OpKind::MatMul: {
        const Tensor& A = nodes_[in0].value;
        const Tensor& B = nodes_[in1].value;
        const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
        if (nodes_[in0].requires_grad) {
            Tensor dA(A.shape());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* dyrow = &dy[i * n];
                    const double* brow = &B[p * n];
                    for (std::size_t j = 0; j < n; ++j) s += dyrow[j] * brow[j];
                    dA[i * k + p] = s;
                }
            accumulate(in0, std::move(dA));
        }
        if (nodes_[in1].requires_grad) {
            Tensor dB(B.shape());
            for (std::size_t i = 0; i < m; ++i) {
                const double* dyrow = &dy[i * n];
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    double* dbrow = &dB[p * n];
                    for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dyrow[j];
                }
            }
            accumulate(in1, std::move(dB));
        }
        break;
    }
    case OpKind::AddBias: {
        accumulate_into(in0, dy);
        if (nodes_[in1].requires_grad) {
            const std::size_t m = dy.dim(0), n = dy.dim(1);
            Tensor db({n});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
            accumulate(in1, std::move(db));
        }
        break;
    }
    case OpKind::Add:
        accumulate_into(in0, dy);
        accumulate_into(in1, dy);
        break;
    case OpKind::Sub: {
        accumulate_into(in0, dy);
        if (nodes_[in1].requires_grad) accumulate(in1, map(dy, [](double v) { return -v; }));
        break;
    }
    case OpKind::Mul: {
        const Tensor& a = nodes_[in0].value;
        const Tensor& b = nodes_[in1].value;
        if (nodes_[in0].requires_grad) accumulate(in0, zip("mul", dy, b, [](double g, double v) { return g * v; }));
        if (nodes_[in1].requires_grad) accumulate(in1, zip("mul", dy, a, [](double g, double v) { return g * v; }));
        break;
    }
    case OpKind::Scale: {
        const double f = node.factor;
        accumulate(in0, map(dy, [f](double g) { return g * f; }));
        break;
    }
    case OpKind::Relu: {
        const Tensor& x = nodes_[in0].value;
        accumulate(in0, zip("relu", dy, x, [](double g, double v) { return v > 0.0 ? g : 0.0; }));
        break;
    }
    case OpKind::Exp:
        accumulate(in0, zip("exp", dy, node.value, [](double g, double y) { return g * y; }));
        break;
    case OpKind::Sigmoid:
        accumulate(in0, zip("sigmoid", dy, node.value, [](double g, double s) { return g * s * (1.0 - s); }));
        break;
    case OpKind::LogSigmoid:
        accumulate(in0, zip("log_sigmoid", dy, node.aux, [](double g, double d) { return g * d; }));
        break;
    case OpKind::LogSoftmax: {
        const Tensor& Y = node.value;
        const std::size_t m = Y.dim(0), n = Y.dim(1);
        Tensor dx(Y.shape());
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += dy[i * n + j];
            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] = dy[i * n + j] - std::exp(Y[i * n + j]) * s;
        }
        accumulate(in0, std::move(dx));
        break;
    }
    case OpKind::BatchNorm:
    case OpKind::FixedNorm: {
        const Tensor& xhat = node.aux;
        const Tensor& inv_std = node.aux2;
        const Tensor& G = nodes_[in1].value;
        const std::size_t m = xhat.dim(0), n = xhat.dim(1);
        Tensor dgamma({n}), dbeta({n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                dgamma[j] += dy[i * n + j] * xhat[i * n + j];
                dbeta[j] += dy[i * n + j];
            }
        if (nodes_[in0].requires_grad) {
            Tensor dx(xhat.shape());
            if (node.op == OpKind::FixedNorm) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) dx[i * n + j] = dy[i * n + j] * G[j] * inv_std[j];
            } else {
                // dxhat = dy * gamma; dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                const double md = static_cast<double>(m);
                for (std::size_t j = 0; j < n; ++j) {
                    const double sum_dxhat = dbeta[j] * G[j];
                    const double sum_dxhat_xhat = dgamma[j] * G[j];
                    for (std::size_t i = 0; i < m; ++i) {
                        const double dxhat = dy[i * n + j] * G[j];
                        dx[i * n + j] =
                            inv_std[j] / md * (md * dxhat - sum_dxhat - xhat[i * n + j] * sum_dxhat_xhat);
                    }
                }
            }
            accumulate(in0, std::move(dx));
        }
        accumulate(in1, std::move(dgamma));
        accumulate(in2, std::move(dbeta));
        break;
    }
    case OpKind::SumRows: {
        const Tensor& X = nodes_[in0].value;
        const std::size_t m = X.dim(0), n = X.dim(1);
        Tensor dx(X.shape());
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] = dy[i];
        accumulate(in0, std::move(dx));
        break;
    }
    case OpKind::Pick: {
        const Tensor& X = nodes_[in0].value;
        const std::size_t n = X.dim(1);
        Tensor dx(X.shape());
        for (std::size_t i = 0; i < node.columns.size(); ++i) dx[i * n + node.columns[i]] = dy[i];
        accumulate(in0, std::move(dx));
        break;
    }
    case OpKind::Sum: {
        const double g = dy.item();
        accumulate(in0, Tensor(nodes_[in0].value.shape(), g));
        break;
    }
    case OpKind::Mean: {
        const Tensor& X = nodes_[in0].value;
        const double g = dy.item() / static_cast<double>(X.size());
        accumulate(in0, Tensor(X.shape(), g));
        break;
    }
    }
}

} // namespace lwtta
