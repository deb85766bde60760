#include "lwtta/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace lwtta {

const char* to_string(LayerKind kind) {
    switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Norm: return "norm";
    case LayerKind::Relu: return "relu";
    }
    return "unknown";
}

std::size_t LayerParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
}

namespace {

Module make_dense(std::string name, std::size_t in, std::size_t out) {
    Module m;
    m.kind = LayerKind::Dense;
    m.layer.name = std::move(name);
    m.layer.params = {Tensor({in, out}), Tensor({out})};
    return m;
}

Module make_norm(std::string name, std::size_t dim) {
    Module m;
    m.kind = LayerKind::Norm;
    m.layer.name = std::move(name);
    m.layer.params = {Tensor({dim}, 1.0), Tensor({dim})};
    m.running_mean = Tensor({dim});
    m.running_var = Tensor({dim}, 1.0);
    return m;
}

} // namespace

Model::Model(std::size_t input_dim, std::vector<std::size_t> hidden_dims, std::size_t class_count)
    : input_dim_(input_dim), class_count_(class_count), hidden_dims_(std::move(hidden_dims)) {
    if (input_dim_ == 0 || class_count_ == 0) throw std::invalid_argument("Model: dimensions must be >= 1");
    std::size_t prev = input_dim_;
    for (std::size_t i = 0; i < hidden_dims_.size(); ++i) {
        const std::size_t h = hidden_dims_[i];
        if (h == 0) throw std::invalid_argument("Model: hidden dimensions must be >= 1");
        modules_.push_back(make_dense("dense" + std::to_string(i), prev, h));
        modules_.push_back(make_norm("norm" + std::to_string(i), h));
        modules_.push_back(Module{});
        prev = h;
    }
    modules_.push_back(make_dense("head", prev, class_count_));
    for (std::size_t i = 0; i < modules_.size(); ++i) {
        if (modules_[i].kind != LayerKind::Relu) weight_bearing_.push_back(i);
    }
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layer_count(); ++l) n += layer(l).parameter_count();
    return n;
}

std::vector<std::vector<Var>> Model::bind_parameters(Tape& tape, bool differentiable) const {
    std::vector<std::vector<Var>> params;
    params.reserve(layer_count());
    for (std::size_t l = 0; l < layer_count(); ++l) {
        std::vector<Var> vars;
        for (const Tensor& p : layer(l).params) vars.push_back(differentiable ? tape.parameter(p) : tape.constant(p));
        params.push_back(std::move(vars));
    }
    return params;
}

ForwardPass Model::forward(Tape& tape, Var inputs, NormMode mode, bool differentiable) const {
    return forward_with(tape, inputs, mode, bind_parameters(tape, differentiable));
}

ForwardPass Model::forward_with(Tape& tape, Var inputs, NormMode mode,
                                const std::vector<std::vector<Var>>& params) const {
    const Tensor& x = tape.value(inputs);
    if (x.rank() != 2 || x.dim(1) != input_dim_) {
        throw std::invalid_argument("Model::forward: expected inputs [batch, " + std::to_string(input_dim_) +
                                    "], got " + shape_str(x.shape()));
    }
    if (params.size() != layer_count()) throw std::invalid_argument("Model::forward: parameter binding mismatch");
    ForwardPass pass;
    pass.params = params;
    Var h = inputs;
    std::size_t l = 0;
    for (const Module& m : modules_) {
        if (m.kind == LayerKind::Relu) {
            h = tape.relu(h);
            continue;
        }
        const auto& vars = params[l++];
        if (m.kind == LayerKind::Dense) {
            h = tape.add_bias(tape.matmul(h, vars[0]), vars[1]);
        } else if (mode == NormMode::BatchStatistics) {
            h = tape.batch_norm(h, vars[0], vars[1], kVarianceEps);
            pass.norm_outputs.push_back(h);
        } else {
            h = tape.fixed_norm(h, vars[0], vars[1], m.running_mean, m.running_var, kVarianceEps);
            pass.norm_outputs.push_back(h);
        }
    }
    pass.logits = h;
    return pass;
}

void Model::update_running_stats(const Tape& tape, const ForwardPass& pass, double momentum) {
    std::size_t k = 0;
    for (Module& m : modules_) {
        if (m.kind != LayerKind::Norm) continue;
        const auto [mean, var] = tape.batch_statistics(pass.norm_outputs.at(k++));
        for (std::size_t j = 0; j < mean.size(); ++j) {
            m.running_mean[j] = (1.0 - momentum) * m.running_mean[j] + momentum * mean[j];
            m.running_var[j] = (1.0 - momentum) * m.running_var[j] + momentum * var[j];
        }
    }
}

Model build_classifier(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims, std::size_t class_count,
                       std::uint64_t seed) {
    Model model(input_dim, hidden_dims, class_count);
    std::mt19937_64 rng(seed);
    for (Module& m : model.modules()) {
        if (m.kind != LayerKind::Dense) continue;
        Tensor& w = m.layer.params[0];
        const double stddev = std::sqrt(2.0 / static_cast<double>(w.dim(0)));
        std::normal_distribution<double> normal(0.0, stddev);
        for (double& v : w.data()) v = normal(rng);
    }
    return model;
}

Tensor predict(const Model& model, const Tensor& inputs, NormMode mode) {
    Tape tape;
    const Var x = tape.constant(inputs);
    const ForwardPass pass = model.forward(tape, x, mode, /*differentiable=*/false);
    return tape.value(pass.logits);
}

Tensor softmax_rows(const Tensor& logits) {
    const std::size_t m = logits.dim(0), n = logits.dim(1);
    Tensor p(logits.shape());
    for (std::size_t i = 0; i < m; ++i) {
        double mx = logits.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, logits.at(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += (p.at(i, j) = std::exp(logits.at(i, j) - mx));
        for (std::size_t j = 0; j < n; ++j) p.at(i, j) /= s;
    }
    return p;
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw std::invalid_argument("argmax_rows: expected rank 2, got " + shape_str(logits.shape()));
    const std::size_t m = logits.dim(0), n = logits.dim(1);
    std::vector<std::size_t> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        out[i] = best;
    }
    return out;
}

bool bit_equal(const Model& a, const Model& b) {
    if (a.modules().size() != b.modules().size()) return false;
    for (std::size_t i = 0; i < a.modules().size(); ++i) {
        const Module& x = a.modules()[i];
        const Module& y = b.modules()[i];
        if (x.kind != y.kind || x.layer.params.size() != y.layer.params.size()) return false;
        for (std::size_t p = 0; p < x.layer.params.size(); ++p)
            if (!bit_equal(x.layer.params[p], y.layer.params[p])) return false;
        if (x.kind == LayerKind::Norm &&
            (!bit_equal(x.running_mean, y.running_mean) || !bit_equal(x.running_var, y.running_var)))
            return false;
    }
    return true;
}

// Checkpoint layout (text, values as C99 hex floats so a round trip is exact):
//
//   LWTTA-CHECKPOINT v1
//   model <input_dim> <class_count> <hidden_count> <hidden dims...>
//   layer <name> <kind> <tensor_count>
//   tensor <label> <rank> <dims...>
//   <values...>
//   end

namespace {

void write_tensor(std::ostream& out, const char* label, const Tensor& t) {
    out << "tensor " << label << ' ' << t.rank();
    for (auto d : t.shape()) out << ' ' << d;
    out << '\n';
    char buf[64];
    for (std::size_t i = 0; i < t.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%a", t[i]);
        out << buf << (i + 1 == t.size() ? '\n' : ' ');
    }
}

[[noreturn]] void bad_checkpoint(const std::string& what) {
    throw std::runtime_error("checkpoint: " + what);
}

void expect_token(std::istream& in, const std::string& want) {
    std::string tok;
    if (!(in >> tok) || tok != want) bad_checkpoint("expected '" + want + "', got '" + tok + "'");
}

Tensor read_tensor(std::istream& in, const std::string& label, const Shape& expected) {
    expect_token(in, "tensor");
    std::string got_label;
    std::size_t rank = 0;
    if (!(in >> got_label >> rank) || got_label != label) bad_checkpoint("expected tensor '" + label + "'");
    Shape shape(rank);
    for (auto& d : shape)
        if (!(in >> d)) bad_checkpoint("truncated shape for '" + label + "'");
    if (shape != expected) {
        bad_checkpoint("tensor '" + label + "' has shape " + shape_str(shape) + ", model expects " +
                       shape_str(expected));
    }
    std::vector<double> values(shape_numel(shape));
    std::string tok;
    for (auto& v : values) {
        if (!(in >> tok)) bad_checkpoint("truncated values for '" + label + "'");
        char* end = nullptr;
        v = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0') bad_checkpoint("bad number '" + tok + "'");
    }
    return Tensor(std::move(shape), std::move(values));
}

} // namespace

void save_checkpoint(const Model& model, std::ostream& out) {
    out << kCheckpointHeader << '\n';
    out << "model " << model.input_dim() << ' ' << model.class_count() << ' ' << model.hidden_dims().size();
    for (auto h : model.hidden_dims()) out << ' ' << h;
    out << '\n';
    for (const Module& m : model.modules()) {
        if (m.kind == LayerKind::Relu) continue;
        const bool norm = m.kind == LayerKind::Norm;
        out << "layer " << m.layer.name << ' ' << to_string(m.kind) << ' ' << (norm ? 4 : 2) << '\n';
        if (norm) {
            write_tensor(out, "gamma", m.layer.params[0]);
            write_tensor(out, "beta", m.layer.params[1]);
            write_tensor(out, "running_mean", m.running_mean);
            write_tensor(out, "running_var", m.running_var);
        } else {
            write_tensor(out, "weight", m.layer.params[0]);
            write_tensor(out, "bias", m.layer.params[1]);
        }
    }
    out << "end\n";
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path.string() + "' for writing");
    save_checkpoint(model, out);
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path.string() + "'");
}

Model load_checkpoint(std::istream& in) {
    std::string header;
    std::getline(in, header);
    if (header != kCheckpointHeader) bad_checkpoint("unsupported header '" + header + "'");
    expect_token(in, "model");
    std::size_t input_dim = 0, classes = 0, hidden_count = 0;
    if (!(in >> input_dim >> classes >> hidden_count)) bad_checkpoint("malformed model line");
    std::vector<std::size_t> hidden(hidden_count);
    for (auto& h : hidden)
        if (!(in >> h)) bad_checkpoint("malformed hidden dims");
    Model model(input_dim, hidden, classes);
    for (Module& m : model.modules()) {
        if (m.kind == LayerKind::Relu) continue;
        expect_token(in, "layer");
        std::string name, kind;
        std::size_t count = 0;
        if (!(in >> name >> kind >> count)) bad_checkpoint("malformed layer line");
        if (name != m.layer.name || kind != to_string(m.kind)) {
            bad_checkpoint("layer '" + name + "' (" + kind + ") does not match expected '" + m.layer.name + "'");
        }
        if (m.kind == LayerKind::Norm) {
            m.layer.params[0] = read_tensor(in, "gamma", m.layer.params[0].shape());
            m.layer.params[1] = read_tensor(in, "beta", m.layer.params[1].shape());
            m.running_mean = read_tensor(in, "running_mean", m.running_mean.shape());
            m.running_var = read_tensor(in, "running_var", m.running_var.shape());
        } else {
            m.layer.params[0] = read_tensor(in, "weight", m.layer.params[0].shape());
            m.layer.params[1] = read_tensor(in, "bias", m.layer.params[1].shape());
        }
    }
    expect_token(in, "end");
    return model;
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path.string() + "'");
    return load_checkpoint(in);
}

} // namespace lwtta
