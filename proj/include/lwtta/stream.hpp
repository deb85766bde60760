#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "lwtta/tensor.hpp"

namespace lwtta {

/// Isotropic Gaussian mixture with C classes in d dimensions. Class means
/// are fixed by the seed; `margin` is the distance of each mean from the origin.
class MixtureGenerator {
public:
    MixtureGenerator(std::uint64_t seed, std::size_t dim, std::size_t class_count, double margin);

    std::size_t dim() const noexcept { return dim_; }
    std::size_t class_count() const noexcept { return class_count_; }
    double margin() const noexcept { return margin_; }
    std::uint64_t seed() const noexcept { return seed_; }
    const Tensor& means() const noexcept { return means_; }

    /// Draws inputs for the given labels.
    Tensor sample(const std::vector<std::size_t>& labels, std::mt19937_64& rng) const;

private:
    std::uint64_t seed_;
    std::size_t dim_;
    std::size_t class_count_;
    double margin_;
    Tensor means_;  // [C, d]
};

struct Dataset {
    Tensor inputs;  // [N, d]
    std::vector<std::size_t> labels;
    std::uint64_t seed = 0;
    std::size_t class_count = 0;
    double margin = 0.0;
};

inline constexpr double kDefaultMargin = 3.0;

/// Balanced labelled sample (labels i mod C, shuffled) drawn from `generator`.
Dataset sample_dataset(const MixtureGenerator& generator, std::size_t count, std::mt19937_64& rng);

/// Labelled source-domain sample with class counts balanced within one.
Dataset gen_source(std::uint64_t seed, std::size_t dim, std::size_t class_count, std::size_t count,
                   double margin = kDefaultMargin);

enum class CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    FeatureBlur,
    ContrastScale,
    FeatureDropout,
    AffineWarp,
};

inline constexpr std::size_t kCorruptionKindCount = 6;

const char* to_string(CorruptionKind kind);
CorruptionKind parse_corruption_kind(std::string_view name);
std::vector<CorruptionKind> all_corruption_kinds();

struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::GaussianNoise;
    int severity = 5;
    /// Seeds the domain-fixed part of a corruption (the rotation of affine_warp).
    std::uint64_t domain_seed = 0;
};

/// Severity -> strength parameter tables. Monotone in severity for every kind.
double corruption_strength(CorruptionKind kind, int severity);

/// Applies a corruption to a batch [n, d]. Stochastic parts draw from `rng`.
Tensor corrupt(const Tensor& inputs, const CorruptionSpec& spec, std::mt19937_64& rng);
/// Same, with an explicit strength instead of the severity table (strength 0 is the identity).
Tensor corrupt_with_strength(const Tensor& inputs, CorruptionKind kind, double strength, std::uint64_t domain_seed,
                             std::mt19937_64& rng);

enum class ScheduleKind { Continual, Gradual };

const char* to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(std::string_view name);

struct Segment {
    CorruptionSpec corruption;
    std::size_t batch_count = 0;
};

struct DomainSchedule {
    ScheduleKind kind = ScheduleKind::Continual;
    std::vector<Segment> segments;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;

    std::size_t total_batches() const;
};

/// Continual: one severity-5 segment per kind. Gradual: severities 1..5..1 per kind.
DomainSchedule make_schedule(ScheduleKind kind, const std::vector<CorruptionKind>& corruptions,
                             std::size_t batches_per_segment, std::size_t batch_size, std::uint64_t seed);

/// Plain key=value description: kind, kinds, batches, batch_size, seed.
struct ScheduleFile {
    ScheduleKind kind = ScheduleKind::Continual;
    std::vector<CorruptionKind> kinds = all_corruption_kinds();
    std::size_t batches = 20;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;

    DomainSchedule resolve() const { return make_schedule(kind, kinds, batches, batch_size, seed); }
};

ScheduleFile parse_schedule(std::string_view text);
ScheduleFile load_schedule(const std::filesystem::path& path);
std::string describe(const DomainSchedule& schedule);

/// Unlabelled test batch as seen by the adaptation path.
struct TestBatch {
    std::size_t index = 0;
    CorruptionKind domain = CorruptionKind::GaussianNoise;
    int severity = 0;
    Tensor inputs;
};

/// Held-out labels for one batch. Labels cannot be read back; they can only
/// score predictions, so nothing downstream of the stream can train on them.
class EvalLabels {
public:
    EvalLabels() = default;
    explicit EvalLabels(std::vector<std::size_t> labels) : labels_(std::move(labels)) {}

    std::size_t size() const noexcept { return labels_.size(); }
    /// Fraction of rows whose argmax disagrees with the held-out label.
    double error_rate(const Tensor& logits) const;

private:
    std::vector<std::size_t> labels_;
};

struct StreamItem {
    TestBatch batch;
    EvalLabels labels;
};

/// Single-pass iterator over a schedule. Each batch is a function of
/// (schedule seed, batch index) only, so the sequence is reproducible.
class DomainStream {
public:
    DomainStream(MixtureGenerator generator, DomainSchedule schedule);

    std::optional<StreamItem> next();
    std::size_t position() const noexcept { return position_; }
    const DomainSchedule& schedule() const noexcept { return schedule_; }

private:
    MixtureGenerator generator_;
    DomainSchedule schedule_;
    std::size_t segment_ = 0;
    std::size_t in_segment_ = 0;
    std::size_t position_ = 0;
};

} // namespace lwtta
