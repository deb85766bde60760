#include "lwtta/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace lwtta {

const char* to_string(Method method) {
    switch (method) {
    case Method::Layerwise: return "layerwise";
    case Method::Naive: return "naive";
    case Method::UniformTent: return "uniform_tent";
    case Method::Bn1: return "bn1";
    case Method::Source: return "source";
    }
    return "unknown";
}

Method parse_method(std::string_view name) {
    for (Method m : {Method::Layerwise, Method::Naive, Method::UniformTent, Method::Bn1, Method::Source})
        if (name == to_string(m)) return m;
    throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

void AdaptConfig::validate() const {
    if (!(eta > 0.0)) throw std::invalid_argument("config: eta must be > 0");
    if (!(tau >= 0.0)) throw std::invalid_argument("config: tau must be >= 0");
    if (!(lambda >= 0.0)) throw std::invalid_argument("config: lambda must be >= 0");
    if (!(epsilon > 0.0)) throw std::invalid_argument("config: epsilon must be > 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("config: gamma must lie in [0, 1]");
}

namespace {

bool learns(Method m) { return m == Method::Layerwise || m == Method::Naive || m == Method::UniformTent; }
bool uses_fisher(Method m) { return m == Method::Layerwise || m == Method::Naive; }

LayerGradients collect_gradients(const Tape& tape, const std::vector<std::vector<Var>>& params) {
    LayerGradients grads;
    grads.reserve(params.size());
    for (const auto& layer : params) {
        std::vector<Tensor> g;
        for (Var v : layer) g.push_back(tape.gradient(v));
        grads.push_back(std::move(g));
    }
    return grads;
}

const AdaptConfig& validated(const AdaptConfig& c) {
    c.validate();
    return c;
}

} // namespace

Adapter::Adapter(Model model, AdaptConfig config)
    : model_(std::move(model)),
      config_(validated(config)),
      fisher_(model_.layer_count(), config_.gamma, config_.track_diagonal),
      optimizer_(model_, config_.optimizer, config_.eta, AdamConfig{}, config_.rate_mode),
      rng_(config_.seed) {
    for (auto l : config_.frozen_layers) {
        if (l >= model_.layer_count()) throw std::invalid_argument("config: frozen layer index out of range");
    }
}

NormMode Adapter::norm_mode() const {
    return config_.method == Method::Source ? NormMode::RunningStatistics : NormMode::BatchStatistics;
}

StepOutcome Adapter::step(const TestBatch& batch) {
    const Method method = config_.method;
    const NormMode mode = norm_mode();
    StepOutcome out;

    Tape tape;
    const auto params = model_.bind_parameters(tape, learns(method));
    const ForwardPass pass = model_.forward_with(tape, tape.constant(batch.inputs), mode, params);
    out.logits = tape.value(pass.logits);

    const ForwardPass aug =
        model_.forward_with(tape, tape.constant(augment(batch.inputs, config_.augment, rng_)), mode, params);
    const Var entropy = entropy_loss(tape, pass.logits, config_.reduction);
    const Var consistency = consistency_loss(tape, pass.logits, aug.logits, config_.consistency, config_.reduction);
    out.entropy = tape.value(entropy).item();
    out.consistency = tape.value(consistency).item();
    if (!learns(method)) return out;

    const std::size_t layers = model_.layer_count();
    if (uses_fisher(method)) {
        // Scores, layer FIM, domain-level accumulation and weights all come from
        // the current parameters, before any update on this batch.
        const SampleScores scores = per_sample_scores(tape, pass);
        const std::vector<double> trace = layer_fim_trace(scores);
        if (config_.track_diagonal) {
            fisher_.accumulate(trace, fim_diagonal(scores));
            out.diagonal = fisher_.diagonal();
        } else {
            fisher_.accumulate(trace);
        }
        out.raw_weights = learning_weights(fisher_);
        if (method == Method::Layerwise) {
            out.scaled_weights = exp_minmax_scale(out.raw_weights, config_.tau, config_.epsilon);
            out.rates = layer_rates(out.scaled_weights, config_.eta);
        } else {
            out.scaled_weights = out.raw_weights;
            out.rates = naive_rates(out.raw_weights, config_.eta);
        }
    } else {
        out.scaled_weights.assign(layers, 1.0);
        out.rates = layer_rates(out.scaled_weights, config_.eta);
    }
    for (auto l : config_.frozen_layers) out.rates[l] = 0.0;

    // The uniform baseline is plain entropy minimization.
    const double lambda = method == Method::UniformTent ? 0.0 : config_.lambda;
    tape.backward(combine_losses(tape, entropy, consistency, lambda));
    const LayerGradients grads = collect_gradients(tape, pass.params);

    if (optimizer_.step(model_, grads, out.rates) == StepStatus::Rejected) {
        out.rejected = true;
        ++rejected_;
        std::clog << "[lwtta] batch " << batch.index << ": non-finite gradient, update skipped\n";
    }
    if (config_.post_update_error) out.logits = predict(model_, batch.inputs, mode);
    return out;
}

AdaptResult adapt_stream(const Model& source_model, DomainStream stream, const AdaptConfig& config) {
    Adapter adapter(source_model, config);
    AdaptResult result{{}, source_model, 0};
    result.records.reserve(stream.schedule().total_batches());
    while (auto item = stream.next()) {
        const auto start = std::chrono::steady_clock::now();
        StepOutcome outcome = adapter.step(item->batch);
        const auto stop = std::chrono::steady_clock::now();

        MetricsRecord rec;
        rec.step = item->batch.index;
        rec.domain = item->batch.domain;
        rec.severity = item->batch.severity;
        rec.error = item->labels.error_rate(outcome.logits);
        rec.entropy = outcome.entropy;
        rec.consistency = outcome.consistency;
        rec.raw_weights = std::move(outcome.raw_weights);
        rec.scaled_weights = std::move(outcome.scaled_weights);
        rec.diagonal = std::move(outcome.diagonal);
        rec.rejected = outcome.rejected;
        rec.seconds = std::chrono::duration<double>(stop - start).count();
        result.records.push_back(std::move(rec));
    }
    result.model = adapter.model();
    result.rejected_steps = adapter.rejected_steps();
    return result;
}

double accuracy(const Model& model, const Dataset& data, NormMode mode) {
    const auto predicted = argmax_rows(predict(model, data.inputs, mode));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == data.labels[i];
    return static_cast<double>(correct) / static_cast<double>(predicted.size());
}

PretrainResult pretrain(Model model, const Dataset& source, const PretrainConfig& config) {
    PretrainResult result{std::move(model), 0.0, {}};
    Model& m = result.model;
    const std::size_t n = source.labels.size();
    if (config.epochs > 0) {
        if (config.batch_size < 2) throw std::invalid_argument("pretrain: batch size must be >= 2");
        LayerwiseOptimizer optimizer(m, OptimizerKind::Adam, config.eta);
        const std::vector<double> rates(m.layer_count(), config.eta);
        std::mt19937_64 rng(config.seed);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        const std::size_t d = source.inputs.dim(1);

        for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), rng);
            double loss_sum = 0.0;
            std::size_t batches = 0;
            for (std::size_t start = 0; start + config.batch_size <= n; start += config.batch_size) {
                Tensor x({config.batch_size, d});
                std::vector<std::size_t> y(config.batch_size);
                for (std::size_t i = 0; i < config.batch_size; ++i) {
                    const std::size_t src = order[start + i];
                    for (std::size_t j = 0; j < d; ++j) x.at(i, j) = source.inputs.at(src, j);
                    y[i] = source.labels[src];
                }
                Tape tape;
                const ForwardPass pass = m.forward(tape, tape.constant(std::move(x)), NormMode::BatchStatistics);
                const Var loss = nll_loss(tape, pass.logits, y);
                const double value = tape.value(loss).item();
                if (!std::isfinite(value)) {
                    throw std::runtime_error("pretrain: loss diverged (" + std::to_string(value) + ") at epoch " +
                                             std::to_string(epoch) + ", batch " + std::to_string(batches));
                }
                tape.backward(loss);
                optimizer.step(m, collect_gradients(tape, pass.params), rates);
                m.update_running_stats(tape, pass, config.momentum);
                loss_sum += value;
                ++batches;
            }
            result.epoch_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
        }
    }
    result.train_accuracy = accuracy(m, source, NormMode::RunningStatistics);
    return result;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag) {
    std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {
enum SeedTag : std::uint64_t { kMixtureSeed = 1, kSourceSeed, kInitSeed, kPretrainSeed, kStreamSeed, kAdaptSeed };
}

MixtureGenerator make_generator(const ExperimentConfig& config) {
    return MixtureGenerator(derive_seed(config.seed, kMixtureSeed), config.dim, config.classes, config.margin);
}

PretrainResult pretrain_source_model(const ExperimentConfig& config) {
    const MixtureGenerator gen = make_generator(config);
    std::mt19937_64 rng(derive_seed(config.seed, kSourceSeed));
    const Dataset source = sample_dataset(gen, config.source_count, rng);
    Model init = build_classifier(config.dim, config.hidden, config.classes, derive_seed(config.seed, kInitSeed));
    PretrainConfig pc = config.pretrain;
    pc.seed = derive_seed(config.seed, kPretrainSeed);
    return pretrain(std::move(init), source, pc);
}

DomainStream make_stream(const ExperimentConfig& config) {
    ScheduleFile file = config.schedule;
    file.seed = derive_seed(derive_seed(config.seed, kStreamSeed), config.schedule.seed);
    return DomainStream(make_generator(config), file.resolve());
}

AdaptResult run_adaptation(const ExperimentConfig& config, const Model& source_model) {
    AdaptConfig adapt = config.adapt;
    adapt.seed = derive_seed(config.seed, kAdaptSeed);
    return adapt_stream(source_model, make_stream(config), adapt);
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

double parse_double(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != value.size()) throw std::invalid_argument("config: bad number for '" + key + "': " + value);
    return v;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
    const double v = parse_double(key, value);
    if (v < 0 || v != std::floor(v)) throw std::invalid_argument("config: expected a count for '" + key + "'");
    return static_cast<std::size_t>(v);
}

} // namespace

ExperimentConfig parse_experiment(std::string_view text) {
    ExperimentConfig config;
    std::string schedule_text;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("config: expected key=value, got '" + stripped + "'");
        const std::string key = trim(std::string_view(stripped).substr(0, eq));
        const std::string value = trim(std::string_view(stripped).substr(eq + 1));
        AdaptConfig& a = config.adapt;
        if (key == "kind" || key == "kinds" || key == "batches" || key == "batch_size" || key == "stream_seed") {
            schedule_text += (key == "stream_seed" ? std::string("seed") : key) + "=" + value + "\n";
        } else if (key == "seed") {
            config.seed = parse_size(key, value);
        } else if (key == "method") {
            a.method = parse_method(value);
        } else if (key == "eta") {
            a.eta = parse_double(key, value);
        } else if (key == "tau") {
            a.tau = parse_double(key, value);
        } else if (key == "lambda") {
            a.lambda = parse_double(key, value);
        } else if (key == "gamma") {
            a.gamma = parse_double(key, value);
        } else if (key == "epsilon") {
            a.epsilon = parse_double(key, value);
        } else if (key == "opt") {
            if (value == "adam") a.optimizer = OptimizerKind::Adam;
            else if (value == "sgd") a.optimizer = OptimizerKind::Sgd;
            else throw std::invalid_argument("config: opt must be adam or sgd");
        } else if (key == "rate_mode") {
            if (value == "step_size") a.rate_mode = RateMode::StepSize;
            else if (value == "gradient_scale") a.rate_mode = RateMode::GradientScale;
            else throw std::invalid_argument("config: rate_mode must be step_size or gradient_scale");
        } else if (key == "consistency") {
            if (value == "sigmoid") a.consistency = ConsistencyKind::Sigmoid;
            else if (value == "softmax") a.consistency = ConsistencyKind::Softmax;
            else throw std::invalid_argument("config: consistency must be sigmoid or softmax");
        } else if (key == "reduction") {
            if (value == "mean") a.reduction = Reduction::BatchMean;
            else if (value == "sum") a.reduction = Reduction::BatchSum;
            else throw std::invalid_argument("config: reduction must be mean or sum");
        } else if (key == "noise_scale") {
            a.augment.noise_scale = parse_double(key, value);
        } else if (key == "feature_scaling") {
            a.augment.feature_scaling = value == "1" || value == "true";
        } else if (key == "dim") {
            config.dim = parse_size(key, value);
        } else if (key == "classes") {
            config.classes = parse_size(key, value);
        } else if (key == "margin") {
            config.margin = parse_double(key, value);
        } else if (key == "hidden") {
            config.hidden.clear();
            std::istringstream list(value);
            std::string item;
            while (std::getline(list, item, ',')) {
                const std::string t = trim(item);
                if (!t.empty()) config.hidden.push_back(parse_size(key, t));
            }
        } else if (key == "source_count") {
            config.source_count = parse_size(key, value);
        } else if (key == "pretrain_epochs") {
            config.pretrain.epochs = parse_size(key, value);
        } else if (key == "pretrain_eta") {
            config.pretrain.eta = parse_double(key, value);
        } else {
            throw std::invalid_argument("config: unknown key '" + key + "'");
        }
    }
    config.schedule = parse_schedule(schedule_text);
    config.adapt.validate();
    return config;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_experiment(buf.str());
}

Summary summarize(const std::vector<MetricsRecord>& records) {
    Summary s;
    s.batches = records.size();
    double total = 0.0;
    for (const auto& r : records) {
        total += r.error;
        s.rejected_steps += r.rejected;
        const std::string name = to_string(r.domain);
        auto it = std::find_if(s.per_domain.begin(), s.per_domain.end(),
                               [&](const DomainError& d) { return d.domain == name; });
        if (it == s.per_domain.end()) {
            s.per_domain.push_back({name, 0.0, 0});
            it = std::prev(s.per_domain.end());
        }
        it->error += r.error;
        ++it->batches;
    }
    for (auto& d : s.per_domain) d.error /= static_cast<double>(d.batches);
    s.mean_error = records.empty() ? 0.0 : total / static_cast<double>(records.size());
    return s;
}

double mean_error_at_severity(const std::vector<MetricsRecord>& records, int severity) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : records) {
        if (r.severity != severity) continue;
        total += r.error;
        ++n;
    }
    if (n == 0) throw std::invalid_argument("mean_error_at_severity: no batches at severity " + std::to_string(severity));
    return total / static_cast<double>(n);
}

double weight_center_of_mass(const std::vector<double>& scaled_weights) {
    double mass = 0.0, moment = 0.0;
    for (std::size_t l = 0; l < scaled_weights.size(); ++l) {
        mass += scaled_weights[l];
        moment += static_cast<double>(l + 1) * scaled_weights[l];
    }
    return mass > 0.0 ? moment / mass : 0.0;
}

namespace {
std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}
} // namespace

void write_metrics_csv(const std::vector<MetricsRecord>& records, std::size_t layer_count, std::ostream& out) {
    out << "step,domain,severity,error,entropy,consistency";
    for (std::size_t l = 1; l <= layer_count; ++l) out << ",wbar_" << l;
    out << '\n';
    for (const auto& r : records) {
        out << r.step << ',' << to_string(r.domain) << ',' << r.severity << ',' << num(r.error) << ','
            << num(r.entropy) << ',' << num(r.consistency);
        for (std::size_t l = 0; l < layer_count; ++l)
            out << ',' << num(l < r.scaled_weights.size() ? r.scaled_weights[l] : 0.0);
        out << '\n';
    }
}

void write_weight_dump(const std::vector<MetricsRecord>& records, std::ostream& out) {
    for (const auto& r : records) {
        nlohmann::json j;
        j["step"] = r.step;
        j["domain"] = to_string(r.domain);
        j["severity"] = r.severity;
        j["w"] = r.raw_weights;
        j["wbar"] = r.scaled_weights;
        if (!r.diagonal.empty()) {
            auto& diag = j["diag"] = nlohmann::json::array();
            for (const Tensor& d : r.diagonal) diag.push_back(d.values());
        }
        out << j.dump() << '\n';
    }
}

void write_summary(const Summary& summary, std::string_view label, std::ostream& out) {
    out << "method";
    for (const auto& d : summary.per_domain) out << ',' << d.domain;
    out << ",mean\n" << label;
    char buf[32];
    for (const auto& d : summary.per_domain) {
        std::snprintf(buf, sizeof buf, ",%.2f", 100.0 * d.error);
        out << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.2f", 100.0 * summary.mean_error);
    out << buf << '\n';
    out << "# batches=" << summary.batches << " rejected_steps=" << summary.rejected_steps << '\n';
}

ExperimentArtifacts run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir) {
    config.adapt.validate();
    ExperimentArtifacts art;
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    art.metrics_csv = out_dir / "metrics.csv";
    art.weights_jsonl = out_dir / "weights.jsonl";
    art.summary_txt = out_dir / "summary.txt";
    std::ofstream csv(art.metrics_csv), jsonl(art.weights_jsonl), summary(art.summary_txt);
    if (!csv || !jsonl || !summary) {
        throw std::runtime_error("run_experiment: output directory '" + out_dir.string() + "' is not writable");
    }

    const PretrainResult pre = pretrain_source_model(config);
    const AdaptResult result = run_adaptation(config, pre.model);
    write_metrics_csv(result.records, pre.model.layer_count(), csv);
    write_weight_dump(result.records, jsonl);
    art.summary = summarize(result.records);
    write_summary(art.summary, to_string(config.adapt.method), summary);
    summary << "# source_train_accuracy=" << num(pre.train_accuracy) << '\n';
    if (!csv || !jsonl || !summary) throw std::runtime_error("run_experiment: failed writing artifacts");
    return art;
}

std::vector<AblationRow> ablate(const AblationGrid& grid, const ExperimentConfig& base, std::size_t seed_count) {
    if (grid.taus.empty() || grid.lambdas.empty() || grid.gammas.empty()) {
        throw std::invalid_argument("ablate: every grid axis needs at least one value");
    }
    if (seed_count == 0) throw std::invalid_argument("ablate: seed_count must be >= 1");
    std::vector<Model> models;
    for (std::size_t s = 0; s < seed_count; ++s) {
        ExperimentConfig c = base;
        c.seed = base.seed + s;
        models.push_back(pretrain_source_model(c).model);
    }
    std::vector<AblationRow> rows;
    for (double tau : grid.taus)
        for (double lambda : grid.lambdas)
            for (double gamma : grid.gammas) {
                std::vector<double> errors;
                for (std::size_t s = 0; s < seed_count; ++s) {
                    ExperimentConfig c = base;
                    c.seed = base.seed + s;
                    c.adapt.tau = tau;
                    c.adapt.lambda = lambda;
                    c.adapt.gamma = gamma;
                    errors.push_back(summarize(run_adaptation(c, models[s]).records).mean_error);
                }
                const double mean = std::accumulate(errors.begin(), errors.end(), 0.0) / errors.size();
                double var = 0.0;
                for (double e : errors) var += (e - mean) * (e - mean);
                const double sd = errors.size() > 1 ? std::sqrt(var / (errors.size() - 1)) : 0.0;
                rows.push_back({tau, lambda, gamma, mean, sd});
            }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const AblationRow& a, const AblationRow& b) { return a.mean_error < b.mean_error; });
    return rows;
}

void write_ablation_table(const std::vector<AblationRow>& rows, std::ostream& out) {
    out << "tau,lambda,gamma,mean_error,std_error\n";
    for (const auto& r : rows)
        out << num(r.tau) << ',' << num(r.lambda) << ',' << num(r.gamma) << ',' << num(r.mean_error) << ','
            << num(r.std_error) << '\n';
}

} // namespace lwtta
