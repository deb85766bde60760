// End-to-end acceptance run: one PASS/FAIL line per criterion, exit status 1 on any FAIL.
// Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lwtta/fisher.hpp"
#include "lwtta/harness.hpp"
#include "lwtta/losses.hpp"
#include "lwtta/scheduler.hpp"
#include "support.hpp"

using namespace lwtta;
using lwtta::testing::check_gradients;
using lwtta::testing::flatten_params;
using lwtta::testing::random_tensor;
using lwtta::testing::regroup;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

constexpr int kSeeds = 5;

// ---------------------------------------------------------------------------
// Gradients of the three losses through random small models.

Verdict gradient_correctness() {
    const auto start = Clock::now();
    std::mt19937_64 rng(424242);
    std::uniform_int_distribution<std::size_t> small(2, 5), depth(0, 2), batch(4, 8), classes(2, 4);
    double worst = 0.0;
    std::size_t coords = 0;
    const int models = 60;
    for (int k = 0; k < models; ++k) {
        const std::size_t d = small(rng), c = classes(rng), b = batch(rng);
        std::vector<std::size_t> hidden(depth(rng));
        for (auto& h : hidden) h = small(rng);
        const Model m = build_classifier(d, hidden, c, rng());
        const Tensor x = random_tensor({b, d}, rng);
        const Tensor x_aug = augment(x, AugmentConfig{}, rng);
        std::vector<std::size_t> labels(b);
        for (auto& l : labels) l = std::uniform_int_distribution<std::size_t>(0, c - 1)(rng);
        // The consistency target is detached, so finite differences hold it fixed too.
        const Tensor y_fixed = predict(m, x, NormMode::BatchStatistics);

        auto logits = [&](Tape& t, const std::vector<Var>& v, const Tensor& in) {
            return m.forward_with(t, t.constant(in), NormMode::BatchStatistics, regroup(m, v)).logits;
        };
        const std::vector<lwtta::testing::Builder> losses = {
            [&](Tape& t, const std::vector<Var>& v) { return entropy_loss(t, logits(t, v, x)); },
            [&](Tape& t, const std::vector<Var>& v) {
                return consistency_loss(t, t.constant(y_fixed), logits(t, v, x_aug));
            },
            [&](Tape& t, const std::vector<Var>& v) { return nll_loss(t, logits(t, v, x), labels); },
        };
        for (const auto& loss : losses) {
            const auto r = check_gradients(loss, flatten_params(m), 1e-5);
            worst = std::max(worst, r.max_rel);
            coords += r.checked;
        }
    }
    const double secs = seconds_since(start);
    return {worst < 1e-4 && secs < 30.0,
            fmt("%d models, %zu coordinates, max rel err %.2e, %.1f s", models, coords, worst, secs)};
}

// ---------------------------------------------------------------------------
// Layer FIM trace against the explicit outer-product matrix.

double brute_force_trace(const SampleScores& scores, std::size_t layer) {
    const std::size_t n = scores.front()[layer].size();
    std::vector<double> mat(n * n, 0.0);
    for (const auto& s : scores)
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) mat[a * n + b] += s[layer][a] * s[layer][b];
    double tr = 0.0;
    for (std::size_t a = 0; a < n; ++a) tr += mat[a * n + a];
    return tr / static_cast<double>(scores.size());
}

Verdict fim_identities() {
    std::mt19937_64 rng(7);
    const Model m = build_classifier(3, {4, 4}, 3, 17);
    double worst = 0.0;
    std::size_t layers_checked = 0;
    const int batches = 120;
    for (int t = 0; t < batches; ++t) {
        const Tensor x = random_tensor({std::uniform_int_distribution<std::size_t>(4, 16)(rng), 3}, rng, 2.0);
        const SampleScores s = per_sample_scores(m, x, NormMode::BatchStatistics);
        const auto tr = layer_fim_trace(s);
        const auto diag = fim_diagonal(s);
        for (std::size_t l = 0; l < m.layer_count(); ++l) {
            if (m.layer(l).parameter_count() > 32) continue;
            double sum = 0.0;
            for (double v : diag[l].data()) sum += v;
            const double ref = brute_force_trace(s, l);
            const double denom = std::max(std::abs(ref), 1e-300);
            worst = std::max({worst, std::abs(tr[l] - ref) / denom, std::abs(sum - ref) / denom});
            ++layers_checked;
        }
    }
    return {worst < 1e-12 && layers_checked >= static_cast<std::size_t>(batches),
            fmt("%d batches, %zu layer checks, max rel err %.2e", batches, layers_checked, worst)};
}

// ---------------------------------------------------------------------------
// Scaler property suite.

Verdict scaler_contract() {
    const auto start = Clock::now();
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<int> len(2, 16);
    std::uniform_real_distribution<double> tau_dist(0.05, 3.0);
    std::lognormal_distribution<double> raw(0.0, 1.5);
    std::size_t cases = 0, violations = 0;
    for (int trial = 0; trial < 20000; ++trial) {
        std::vector<double> w(len(rng));
        for (double& v : w) v = raw(rng);
        const double tau = tau_dist(rng);
        const auto s = exp_minmax_scale(w, tau);
        for (double v : exp_minmax_scale(w, 0.0)) violations += v != 1.0;
        const auto s_hi = exp_minmax_scale(w, tau * 1.5);
        std::vector<double> w_out = w;
        *std::max_element(w_out.begin(), w_out.end()) *= 10.0;
        const auto s_out = exp_minmax_scale(w_out, tau);
        for (std::size_t a = 0; a < w.size(); ++a) {
            violations += !(s[a] >= 0.0 && s[a] <= 1.0);
            violations += !(s_out[a] >= 0.0 && s_out[a] <= 1.0);
            if (s[a] > 0.0 && s[a] < 1.0) violations += !(s_hi[a] < s[a]);
            for (std::size_t b = 0; b < w.size(); ++b) {
                if (w[a] <= w[b]) violations += !(s[a] <= s[b]);
                if (w[a] < w[b]) violations += !(s_out[a] <= s_out[b]);
            }
        }
        ++cases;
    }
    const double secs = seconds_since(start);
    return {violations == 0 && cases >= 10000 && secs < 5.0,
            fmt("%zu cases, %zu violations, %.2f s", cases, violations, secs)};
}

// ---------------------------------------------------------------------------
// Shared desk-scale setup: default experiment config, one pretrained model per seed.

ExperimentConfig desk_config(std::uint64_t seed) {
    ExperimentConfig c;
    c.seed = seed;
    return c;
}

std::map<std::uint64_t, Model>& source_models() {
    static std::map<std::uint64_t, Model> cache;
    return cache;
}

const Model& source_model(std::uint64_t seed) {
    auto& cache = source_models();
    auto it = cache.find(seed);
    if (it == cache.end()) it = cache.emplace(seed, pretrain_source_model(desk_config(seed)).model).first;
    return it->second;
}

// Independent uniform entropy minimization: forward with batch statistics,
// entropy, backward, theta <- theta - eta * g.
Verdict reduction_equivalence() {
    ExperimentConfig cfg = desk_config(0);
    cfg.schedule.kinds = {CorruptionKind::GaussianNoise, CorruptionKind::ImpulseNoise, CorruptionKind::FeatureBlur,
                          CorruptionKind::ContrastScale, CorruptionKind::FeatureDropout};
    cfg.schedule.batches = 10;
    cfg.adapt.method = Method::Layerwise;
    cfg.adapt.tau = 0.0;
    cfg.adapt.lambda = 0.0;
    cfg.adapt.optimizer = OptimizerKind::Sgd;
    const double eta = cfg.adapt.eta;

    Model reference = source_model(0);
    Adapter adapter(reference, cfg.adapt);
    DomainStream stream = make_stream(cfg);
    std::size_t batches = 0, mismatches = 0, nonuniform = 0;
    while (auto item = stream.next()) {
        const StepOutcome out = adapter.step(item->batch);
        for (double w : out.scaled_weights) nonuniform += w != 1.0;

        Tape tape;
        const ForwardPass pass = reference.forward(tape, tape.constant(item->batch.inputs), NormMode::BatchStatistics);
        tape.backward(entropy_loss(tape, pass.logits));
        for (std::size_t l = 0; l < reference.layer_count(); ++l)
            for (std::size_t p = 0; p < reference.layer(l).params.size(); ++p) {
                Tensor& theta = reference.layer(l).params[p];
                const Tensor& g = tape.gradient(pass.params[l][p]);
                for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= eta * g[i];
            }
        mismatches += !bit_equal(adapter.model(), reference);
        ++batches;
    }
    const bool moved = !bit_equal(reference, source_model(0));
    return {batches == 50 && mismatches == 0 && nonuniform == 0 && moved,
            fmt("%zu batches, %zu non-identical steps, %zu non-unit weights", batches, mismatches, nonuniform)};
}

// A layer with rate zero never changes: forced through the config, and
// whenever the scaler itself maps a layer to zero.
Verdict frozen_layer() {
    ExperimentConfig cfg = desk_config(1);
    cfg.schedule.batches = 17;  // 6 x 17 = 102 batches
    const std::size_t frozen = 2;
    cfg.adapt.frozen_layers = {frozen};
    const Model& source = source_model(1);
    Adapter adapter(source, cfg.adapt);
    DomainStream stream = make_stream(cfg);
    std::size_t batches = 0, forced_changes = 0, zero_rate_events = 0, zero_rate_changes = 0;
    while (auto item = stream.next()) {
        const Model before = adapter.model();
        const StepOutcome out = adapter.step(item->batch);
        for (std::size_t p = 0; p < source.layer(frozen).params.size(); ++p)
            forced_changes += !bit_equal(adapter.model().layer(frozen).params[p], source.layer(frozen).params[p]);
        for (std::size_t l = 0; l < out.rates.size(); ++l) {
            if (out.rates[l] != 0.0 || l == frozen) continue;
            ++zero_rate_events;
            for (std::size_t p = 0; p < before.layer(l).params.size(); ++p)
                zero_rate_changes += !bit_equal(adapter.model().layer(l).params[p], before.layer(l).params[p]);
        }
        ++batches;
    }
    return {batches >= 100 && forced_changes == 0 && zero_rate_changes == 0,
            fmt("%zu batches, frozen layer changed %zu times; %zu scaler-zero layer steps, %zu changed", batches,
                forced_changes, zero_rate_events, zero_rate_changes)};
}

// ---------------------------------------------------------------------------
// Desk-scale experiments.

struct Run {
    std::vector<MetricsRecord> records;
    std::string csv;
    double mean_error = 0.0;
};

Run run(const ExperimentConfig& cfg) {
    Run r;
    r.records = run_adaptation(cfg, source_model(cfg.seed)).records;
    std::ostringstream csv;
    write_metrics_csv(r.records, source_model(cfg.seed).layer_count(), csv);
    r.csv = csv.str();
    r.mean_error = summarize(r.records).mean_error;
    return r;
}

ExperimentConfig with_method(std::uint64_t seed, Method m) {
    ExperimentConfig c = desk_config(seed);
    c.adapt.method = m;
    return c;
}

constexpr Method kContinualMethods[] = {Method::Layerwise, Method::UniformTent, Method::Bn1, Method::Source};

std::map<std::pair<std::uint64_t, Method>, Run>& continual_runs() {
    static std::map<std::pair<std::uint64_t, Method>, Run> runs;
    return runs;
}

double continual_seconds = 0.0;

void ensure_continual_runs() {
    if (!continual_runs().empty()) return;
    const auto start = Clock::now();
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed)
        for (Method m : kContinualMethods) continual_runs()[{seed, m}] = run(with_method(seed, m));
    continual_seconds = seconds_since(start);
}

std::string per_seed(const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += fmt("%s%.4f", s.empty() ? "" : " ", x);
    return s;
}

Verdict continual_experiment() {
    source_models().clear();  // pretraining counts toward the runtime budget
    ensure_continual_runs();
    int beats_source = 0, beats_tent = 0, beats_bn1 = 0;
    std::vector<double> lw, src, tent, bn1;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        const auto& runs = continual_runs();
        lw.push_back(runs.at({seed, Method::Layerwise}).mean_error);
        src.push_back(runs.at({seed, Method::Source}).mean_error);
        tent.push_back(runs.at({seed, Method::UniformTent}).mean_error);
        bn1.push_back(runs.at({seed, Method::Bn1}).mean_error);
        beats_source += lw.back() < src.back();
        beats_tent += lw.back() <= tent.back();
        beats_bn1 += lw.back() <= bn1.back();
    }
    const bool pass = beats_source == 5 && beats_tent >= 4 && beats_bn1 >= 4 && continual_seconds < 120.0;
    return {pass, fmt("(a) %d/5 (b) %d/5 (c) %d/5, %.1f s; layerwise [%s] source [%s] uniform_tent [%s] bn1 [%s]",
                      beats_source, beats_tent, beats_bn1, continual_seconds, per_seed(lw).c_str(),
                      per_seed(src).c_str(), per_seed(tent).c_str(), per_seed(bn1).c_str())};
}

Verdict gradual_vs_continual() {
    ensure_continual_runs();
    int wins = 0;
    std::vector<double> grad, cont;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        ExperimentConfig cfg = with_method(seed, Method::Layerwise);
        cfg.schedule.kind = ScheduleKind::Gradual;
        grad.push_back(mean_error_at_severity(run(cfg).records, 5));
        cont.push_back(mean_error_at_severity(continual_runs().at({seed, Method::Layerwise}).records, 5));
        wins += grad.back() <= cont.back();
    }
    return {wins >= 4, fmt("%d/5 seeds; gradual sev-5 [%s] continual sev-5 [%s]", wins, per_seed(grad).c_str(),
                           per_seed(cont).c_str())};
}

Verdict gamma_direction() {
    ensure_continual_runs();
    double g1 = 0.0, g0 = 0.0;
    std::vector<double> e0, e1;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        ExperimentConfig cfg = with_method(seed, Method::Layerwise);
        cfg.adapt.gamma = 0.0;
        e0.push_back(run(cfg).mean_error);
        e1.push_back(continual_runs().at({seed, Method::Layerwise}).mean_error);
        g0 += e0.back() / kSeeds;
        g1 += e1.back() / kSeeds;
    }
    return {g1 <= g0, fmt("gamma=1 %.4f vs gamma=0 %.4f; per seed gamma=1 [%s] gamma=0 [%s]", g1, g0,
                          per_seed(e1).c_str(), per_seed(e0).c_str())};
}

Verdict determinism() {
    ensure_continual_runs();
    const auto first = continual_runs();
    continual_runs().clear();
    source_models().clear();
    ensure_continual_runs();
    std::size_t identical = 0;
    for (const auto& [key, r] : first) identical += continual_runs().at(key).csv == r.csv;
    return {identical == first.size() && !first.empty(),
            fmt("%zu/%zu CSVs byte-identical after re-pretraining and re-running", identical, first.size())};
}

Verdict weight_signature() {
    ensure_continual_runs();
    double blur = 0.0, noise = 0.0;
    std::vector<double> per_blur, per_noise;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        double b = 0.0, n = 0.0;
        std::size_t nb = 0, nn = 0;
        for (const auto& rec : continual_runs().at({seed, Method::Layerwise}).records) {
            if (rec.domain == CorruptionKind::FeatureBlur) b += weight_center_of_mass(rec.scaled_weights), ++nb;
            if (rec.domain == CorruptionKind::GaussianNoise) n += weight_center_of_mass(rec.scaled_weights), ++nn;
        }
        per_blur.push_back(b / nb);
        per_noise.push_back(n / nn);
        blur += per_blur.back() / kSeeds;
        noise += per_noise.back() / kSeeds;
    }
    return {blur < noise, fmt("centre of mass: feature_blur %.3f vs gaussian_noise %.3f; per seed blur [%s] noise [%s]",
                              blur, noise, per_seed(per_blur).c_str(), per_seed(per_noise).c_str())};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
        {"gradient correctness", gradient_correctness},
        {"FIM identities", fim_identities},
        {"scaler contract", scaler_contract},
        {"reduction to uniform entropy minimization", reduction_equivalence},
        {"frozen-layer guarantee", frozen_layer},
        {"desk-scale continual experiment", continual_experiment},
        {"gradual vs continual at severity 5", gradual_vs_continual},
        {"gamma ablation direction", gamma_direction},
        {"determinism", determinism},
        {"weight-distribution signature", weight_signature},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && !only.count(id)) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failures += !v.pass;
        std::printf("criterion %2d %-44s %s  %s\n", id, criteria[i].first, v.pass ? "PASS" : "FAIL", v.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
