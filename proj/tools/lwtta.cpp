#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lwtta/harness.hpp"

namespace fs = std::filesystem;
using namespace lwtta;

namespace {

struct Options {
    std::string schedule;
    std::string method;
    std::optional<double> eta, tau, lambda, gamma, epsilon;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::string opt;
    std::string consistency;
    std::size_t seeds = 1;
    std::string checkpoint;
};

void add_common(CLI::App* cmd, Options& o, bool with_method) {
    cmd->add_option("--schedule", o.schedule, "key=value experiment/schedule file")->check(CLI::ExistingFile);
    if (with_method)
        cmd->add_option("--method", o.method)
            ->check(CLI::IsMember({"layerwise", "naive", "uniform_tent", "bn1", "source"}));
    cmd->add_option("--eta", o.eta, "base learning rate");
    cmd->add_option("--tau", o.tau, "scaler exponent");
    cmd->add_option("--lambda", o.lambda, "consistency weight");
    cmd->add_option("--gamma", o.gamma, "FIM decay");
    cmd->add_option("--epsilon", o.epsilon, "scaler epsilon");
    cmd->add_option("--seed", o.seed, "master seed");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--opt", o.opt)->check(CLI::IsMember({"adam", "sgd"}));
    cmd->add_option("--consistency", o.consistency)->check(CLI::IsMember({"sigmoid", "softmax"}));
    cmd->add_option("--seeds", o.seeds, "repeat over N consecutive seeds and report mean +- std")
        ->check(CLI::PositiveNumber);
}

ExperimentConfig resolve(const Options& o) {
    ExperimentConfig c = o.schedule.empty() ? ExperimentConfig{} : load_experiment(o.schedule);
    if (!o.method.empty()) c.adapt.method = parse_method(o.method);
    if (o.eta) c.adapt.eta = *o.eta;
    if (o.tau) c.adapt.tau = *o.tau;
    if (o.lambda) c.adapt.lambda = *o.lambda;
    if (o.gamma) c.adapt.gamma = *o.gamma;
    if (o.epsilon) c.adapt.epsilon = *o.epsilon;
    if (o.seed) c.seed = *o.seed;
    if (!o.opt.empty()) c.adapt.optimizer = o.opt == "sgd" ? OptimizerKind::Sgd : OptimizerKind::Adam;
    if (!o.consistency.empty())
        c.adapt.consistency = o.consistency == "softmax" ? ConsistencyKind::Softmax : ConsistencyKind::Sigmoid;
    c.adapt.validate();
    return c;
}

void print_schedule(const ExperimentConfig& c) {
    std::cout << describe(make_stream(c).schedule());
    std::cout << "method=" << to_string(c.adapt.method) << " eta=" << c.adapt.eta << " tau=" << c.adapt.tau
              << " lambda=" << c.adapt.lambda << " gamma=" << c.adapt.gamma << " seed=" << c.seed << '\n';
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return {mean, v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0};
}

void print_mean_std(std::string_view label, const std::vector<double>& errors) {
    const auto [mean, sd] = mean_std(errors);
    std::printf("%s mean error %.2f+-%.2f%% over %zu seed(s)\n", std::string(label).c_str(), 100.0 * mean, 100.0 * sd,
                errors.size());
}

// Runs one method over o.seeds seeds; one artifact directory per seed when more than one.
std::vector<double> run_seeds(const ExperimentConfig& base, const Options& o, const fs::path& out) {
    std::vector<double> errors;
    for (std::size_t s = 0; s < o.seeds; ++s) {
        ExperimentConfig c = base;
        c.seed = base.seed + s;
        const fs::path dir = o.seeds > 1 ? out / ("seed_" + std::to_string(c.seed)) : out;
        if (!o.checkpoint.empty()) {
            const Model model = load_checkpoint(fs::path(o.checkpoint));
            fs::create_directories(dir);
            std::ofstream csv(dir / "metrics.csv"), jsonl(dir / "weights.jsonl"), sum(dir / "summary.txt");
            if (!csv || !jsonl || !sum) throw std::runtime_error("output directory '" + dir.string() + "' is not writable");
            const AdaptResult r = run_adaptation(c, model);
            write_metrics_csv(r.records, model.layer_count(), csv);
            write_weight_dump(r.records, jsonl);
            const Summary summary = summarize(r.records);
            write_summary(summary, to_string(c.adapt.method), sum);
            write_summary(summary, to_string(c.adapt.method), std::cout);
            errors.push_back(summary.mean_error);
        } else {
            const ExperimentArtifacts art = run_experiment(c, dir);
            write_summary(art.summary, to_string(c.adapt.method), std::cout);
            errors.push_back(art.summary.mean_error);
        }
    }
    return errors;
}

std::vector<double> parse_list(const std::string& text) {
    std::vector<double> v;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t comma = std::min(text.find(',', pos), text.size());
        if (comma > pos) v.push_back(std::stod(text.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return v;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Layer-wise auto-weighted test-time adaptation on synthetic domain-shift streams"};
    app.require_subcommand(1);

    Options o;

    auto* pre = app.add_subcommand("pretrain", "train the source model and write a checkpoint");
    pre->add_option("--schedule", o.schedule, "key=value experiment file")->check(CLI::ExistingFile);
    pre->add_option("--seed", o.seed, "master seed");
    pre->add_option("--out", o.out, "output directory");

    auto* adapt = app.add_subcommand("adapt", "adapt online over a domain stream");
    add_common(adapt, o, true);
    adapt->add_option("--checkpoint", o.checkpoint, "start from this checkpoint instead of pretraining")
        ->check(CLI::ExistingFile);

    auto* baseline = app.add_subcommand("baseline", "run source, bn1 and uniform_tent (or one of them)");
    add_common(baseline, o, false);
    baseline->add_option("--method", o.method)->check(CLI::IsMember({"source", "bn1", "uniform_tent"}));

    std::string sweep, taus, lambdas, gammas;
    auto* abl = app.add_subcommand("ablate", "full factorial sweep over tau, lambda and gamma");
    add_common(abl, o, false);
    abl->add_option("--sweep", sweep, "preset sweep")->check(CLI::IsMember({"lambda", "tau", "gamma"}));
    abl->add_option("--taus", taus, "comma-separated tau values");
    abl->add_option("--lambdas", lambdas, "comma-separated lambda values");
    abl->add_option("--gammas", gammas, "comma-separated gamma values");

    auto* dump = app.add_subcommand("dump-weights", "write per-batch w, w-bar and FIM diagonal as JSON lines");
    add_common(dump, o, true);

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) {
            ExperimentConfig c = o.schedule.empty() ? ExperimentConfig{} : load_experiment(o.schedule);
            if (o.seed) c.seed = *o.seed;
            fs::create_directories(o.out);
            const fs::path path = fs::path(o.out) / "source.ckpt";
            std::ofstream probe(path);
            if (!probe) throw std::runtime_error("cannot write '" + path.string() + "'");
            probe.close();
            const PretrainResult r = pretrain_source_model(c);
            save_checkpoint(r.model, path);
            std::printf("source train accuracy %.4f, final loss %.6g\nwrote %s\n", r.train_accuracy,
                        r.epoch_loss.empty() ? 0.0 : r.epoch_loss.back(), path.string().c_str());
        } else if (adapt->parsed()) {
            const ExperimentConfig c = resolve(o);
            print_schedule(c);
            print_mean_std(to_string(c.adapt.method), run_seeds(c, o, o.out));
        } else if (baseline->parsed()) {
            const ExperimentConfig c = resolve(o);
            std::vector<Method> methods = {Method::Source, Method::Bn1, Method::UniformTent};
            if (!o.method.empty()) methods = {parse_method(o.method)};
            ExperimentConfig shown = c;
            shown.adapt.method = methods.front();
            print_schedule(shown);
            for (Method m : methods) {
                ExperimentConfig cm = c;
                cm.adapt.method = m;
                print_mean_std(to_string(m), run_seeds(cm, o, fs::path(o.out) / to_string(m)));
            }
        } else if (abl->parsed()) {
            const ExperimentConfig c = resolve(o);
            AblationGrid grid{{c.adapt.tau}, {c.adapt.lambda}, {c.adapt.gamma}};
            if (sweep == "lambda") grid.lambdas = kLambdaSweep;
            if (sweep == "tau") grid.taus = kTauSweep;
            if (sweep == "gamma") grid.gammas = kGammaSweep;
            if (!taus.empty()) grid.taus = parse_list(taus);
            if (!lambdas.empty()) grid.lambdas = parse_list(lambdas);
            if (!gammas.empty()) grid.gammas = parse_list(gammas);
            print_schedule(c);
            fs::create_directories(o.out);
            const fs::path path = fs::path(o.out) / "ablation.csv";
            std::ofstream table(path);
            if (!table) throw std::runtime_error("cannot write '" + path.string() + "'");
            const auto rows = ablate(grid, c, o.seeds);
            write_ablation_table(rows, table);
            write_ablation_table(rows, std::cout);
        } else if (dump->parsed()) {
            ExperimentConfig c = resolve(o);
            if (o.method.empty()) c.adapt.method = Method::Layerwise;
            c.adapt.track_diagonal = true;
            print_schedule(c);
            fs::create_directories(o.out);
            const fs::path path = fs::path(o.out) / "weights.jsonl";
            std::ofstream out(path);
            if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
            const PretrainResult p = pretrain_source_model(c);
            const AdaptResult r = run_adaptation(c, p.model);
            write_weight_dump(r.records, out);
            std::printf("wrote %zu records to %s\n", r.records.size(), path.string().c_str());
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
