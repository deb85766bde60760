#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "lwtta/fisher.hpp"
#include "lwtta/losses.hpp"
#include "lwtta/model.hpp"
#include "lwtta/scheduler.hpp"
#include "lwtta/stream.hpp"

namespace lwtta {

enum class Method {
    Layerwise,    // FIM trace weights through the exponential min-max scaler
    Naive,        // unscaled trace weights, eta^l = eta * w^l
    UniformTent,  // entropy minimization with one rate for every layer
    Bn1,          // current-batch normalization statistics, no gradient steps
    Source,       // frozen source model
};

const char* to_string(Method method);
Method parse_method(std::string_view name);

struct AdaptConfig {
    Method method = Method::Layerwise;
    double eta = 1e-3;
    double tau = 1.0;
    double lambda = 0.1;
    double epsilon = kScalerEpsilon;
    double gamma = 1.0;
    OptimizerKind optimizer = OptimizerKind::Adam;
    RateMode rate_mode = RateMode::StepSize;
    ConsistencyKind consistency = ConsistencyKind::Sigmoid;
    Reduction reduction = Reduction::BatchMean;
    AugmentConfig augment;
    std::uint64_t seed = 0;
    /// Layers whose rate is forced to zero for the whole run.
    std::vector<std::size_t> frozen_layers;
    /// Diagnostics: score the batch with the post-update model instead of the online (pre-update) one.
    bool post_update_error = false;
    /// Accumulate the per-parameter FIM diagonal for dumps.
    bool track_diagonal = false;

    void validate() const;
};

/// Outcome of adapting on one batch. `logits` are the predictions the
/// method commits to for this batch (before its update, unless post_update_error).
struct StepOutcome {
    Tensor logits;
    double entropy = 0.0;
    double consistency = 0.0;
    std::vector<double> raw_weights;     // w^l (empty for methods without FIM)
    std::vector<double> scaled_weights;  // w-bar^l
    std::vector<double> rates;           // eta^l
    LayerVectors diagonal;               // accumulated FIM diagonal when tracked
    bool rejected = false;
};

/// Online test-time adaptation state: model, domain-level FIM, optimizer, rng.
/// Holds no labels; `step` sees only the unlabelled batch.
class Adapter {
public:
    Adapter(Model model, AdaptConfig config);

    StepOutcome step(const TestBatch& batch);

    const Model& model() const noexcept { return model_; }
    const FisherState& fisher() const noexcept { return fisher_; }
    const AdaptConfig& config() const noexcept { return config_; }
    std::size_t rejected_steps() const noexcept { return rejected_; }

private:
    NormMode norm_mode() const;

    Model model_;
    AdaptConfig config_;
    FisherState fisher_;
    LayerwiseOptimizer optimizer_;
    std::mt19937_64 rng_;
    std::size_t rejected_ = 0;
};

struct MetricsRecord {
    std::size_t step = 0;
    CorruptionKind domain = CorruptionKind::GaussianNoise;
    int severity = 0;
    double error = 0.0;
    double entropy = 0.0;
    double consistency = 0.0;
    std::vector<double> raw_weights;
    std::vector<double> scaled_weights;
    LayerVectors diagonal;
    bool rejected = false;
    double seconds = 0.0;
};

struct AdaptResult {
    std::vector<MetricsRecord> records;
    Model model;
    std::size_t rejected_steps = 0;
};

/// Runs the online loop over the whole stream. The model is never reset.
AdaptResult adapt_stream(const Model& source_model, DomainStream stream, const AdaptConfig& config);

struct PretrainConfig {
    std::size_t epochs = 30;
    double eta = 3e-3;
    std::size_t batch_size = 64;
    double momentum = 0.1;  // running-statistics momentum
    std::uint64_t seed = 0;
};

struct PretrainResult {
    Model model;
    double train_accuracy = 0.0;
    std::vector<double> epoch_loss;
};

/// NLL minimization with Adam on the labelled source set. Throws on a non-finite loss.
PretrainResult pretrain(Model model, const Dataset& source, const PretrainConfig& config);

double accuracy(const Model& model, const Dataset& data, NormMode mode);

/// Everything needed to reproduce one run from one master seed.
struct ExperimentConfig {
    std::size_t dim = 16;
    std::size_t classes = 3;
    std::vector<std::size_t> hidden = {32, 32, 32, 32};
    double margin = kDefaultMargin;
    std::size_t source_count = 3000;
    PretrainConfig pretrain;
    ScheduleFile schedule;
    AdaptConfig adapt;
    std::uint64_t seed = 0;
};

/// splitmix64 of (master, tag); gives independent seeds for data, init, stream and adaptation.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag);

MixtureGenerator make_generator(const ExperimentConfig& config);
/// Source data, initialization and pretraining for config.seed.
PretrainResult pretrain_source_model(const ExperimentConfig& config);
DomainStream make_stream(const ExperimentConfig& config);
AdaptResult run_adaptation(const ExperimentConfig& config, const Model& source_model);

/// Parses key=value lines covering schedule keys and adaptation/experiment keys.
ExperimentConfig parse_experiment(std::string_view text);
ExperimentConfig load_experiment(const std::filesystem::path& path);

struct DomainError {
    std::string domain;
    double error = 0.0;
    std::size_t batches = 0;
};

struct Summary {
    double mean_error = 0.0;
    std::vector<DomainError> per_domain;  // in first-appearance order
    std::size_t batches = 0;
    std::size_t rejected_steps = 0;
};

Summary summarize(const std::vector<MetricsRecord>& records);
/// Mean error over the records with the given severity.
double mean_error_at_severity(const std::vector<MetricsRecord>& records, int severity);
/// Weight-mass centre of layer indices: sum_l l * wbar_l / sum_l wbar_l (1-based layer index).
double weight_center_of_mass(const std::vector<double>& scaled_weights);

void write_metrics_csv(const std::vector<MetricsRecord>& records, std::size_t layer_count, std::ostream& out);
void write_weight_dump(const std::vector<MetricsRecord>& records, std::ostream& out);
void write_summary(const Summary& summary, std::string_view label, std::ostream& out);

struct ExperimentArtifacts {
    std::filesystem::path metrics_csv;
    std::filesystem::path weights_jsonl;
    std::filesystem::path summary_txt;
    Summary summary;
};

/// Pretrains, adapts and writes metrics.csv, weights.jsonl and summary.txt into `out_dir`.
/// The directory is checked for writability before any work starts.
ExperimentArtifacts run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);

struct AblationGrid {
    std::vector<double> taus;
    std::vector<double> lambdas;
    std::vector<double> gammas;
};

inline const std::vector<double> kLambdaSweep = {0.0, 0.01, 0.1, 1.0, 10.0, 100.0};
inline const std::vector<double> kTauSweep = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2};
inline const std::vector<double> kGammaSweep = {0.0, 0.3, 0.6, 0.9, 1.0};

struct AblationRow {
    double tau = 0.0;
    double lambda = 0.0;
    double gamma = 0.0;
    double mean_error = 0.0;
    double std_error = 0.0;  // across seeds
};

/// Full factorial over the grid; every grid point reuses the same pretrained
/// models and stream seeds. Rows sorted by mean error (stable).
std::vector<AblationRow> ablate(const AblationGrid& grid, const ExperimentConfig& base, std::size_t seed_count = 1);

void write_ablation_table(const std::vector<AblationRow>& rows, std::ostream& out);

} // namespace lwtta
