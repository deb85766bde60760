#include "lwtta/stream.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "lwtta/model.hpp"

namespace lwtta {

MixtureGenerator::MixtureGenerator(std::uint64_t seed, std::size_t dim, std::size_t class_count, double margin)
    : seed_(seed), dim_(dim), class_count_(class_count), margin_(margin), means_({class_count, dim}) {
    if (dim < 2) throw std::invalid_argument("MixtureGenerator: dim must be >= 2");
    if (class_count < 2) throw std::invalid_argument("MixtureGenerator: class_count must be >= 2");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t c = 0; c < class_count; ++c) {
        double norm = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            means_.at(c, j) = normal(rng);
            norm += means_.at(c, j) * means_.at(c, j);
        }
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < dim; ++j) means_.at(c, j) *= margin / norm;
    }
}

Tensor MixtureGenerator::sample(const std::vector<std::size_t>& labels, std::mt19937_64& rng) const {
    Tensor x({labels.size(), dim_});
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= class_count_) throw std::out_of_range("MixtureGenerator::sample: label out of range");
        for (std::size_t j = 0; j < dim_; ++j) x.at(i, j) = means_.at(labels[i], j) + normal(rng);
    }
    return x;
}

Dataset sample_dataset(const MixtureGenerator& generator, std::size_t count, std::mt19937_64& rng) {
    const std::size_t classes = generator.class_count();
    if (count < classes) throw std::invalid_argument("sample_dataset: need at least one sample per class");
    std::vector<std::size_t> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = i % classes;
    std::shuffle(labels.begin(), labels.end(), rng);
    Dataset ds;
    ds.inputs = generator.sample(labels, rng);
    ds.labels = std::move(labels);
    ds.seed = generator.seed();
    ds.class_count = classes;
    ds.margin = generator.margin();
    return ds;
}

Dataset gen_source(std::uint64_t seed, std::size_t dim, std::size_t class_count, std::size_t count, double margin) {
    const MixtureGenerator gen(seed, dim, class_count, margin);
    std::mt19937_64 rng(seed ^ 0x5eed5eed5eed5eedULL);
    return sample_dataset(gen, count, rng);
}

namespace {

constexpr std::array<const char*, kCorruptionKindCount> kKindNames = {
    "gaussian_noise", "impulse_noise", "feature_blur", "contrast_scale", "feature_dropout", "affine_warp",
};

// Rows: kind (enum order). Columns: severity 1..5.
constexpr std::array<std::array<double, 5>, kCorruptionKindCount> kStrength = {{
    {0.75, 1.5, 2.5, 4.0, 6.0},      // gaussian_noise: noise stddev
    {0.03, 0.10, 0.20, 0.35, 0.55},  // impulse_noise: corrupted fraction
    {0.7, 1.5, 3.0, 5.0, 8.0},       // feature_blur: kernel stddev in coordinates
    {0.6, 0.8, 0.9, 0.95, 0.98},     // contrast_scale: 1 - contrast factor
    {0.3, 0.5, 0.7, 0.8, 0.9},       // feature_dropout: zeroed fraction
    {0.5, 0.8, 1.0, 1.2, 1.4},       // affine_warp: rotation angle (radians)
}};

constexpr double kImpulseMagnitude = 5.0;

std::size_t reflect(long j, long n) {
    while (j < 0 || j >= n) j = j < 0 ? -j - 1 : 2 * n - j - 1;
    return static_cast<std::size_t>(j);
}

Tensor blur(const Tensor& x, double sigma) {
    const long radius = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    for (long k = -radius; k <= radius; ++k) kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    const double total = std::accumulate(kernel.begin(), kernel.end(), 0.0);
    for (double& k : kernel) k /= total;
    const std::size_t m = x.dim(0), d = x.dim(1);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (long k = -radius; k <= radius; ++k)
                s += kernel[k + radius] * x.at(i, reflect(static_cast<long>(j) + k, static_cast<long>(d)));
            out.at(i, j) = s;
        }
    return out;
}

Tensor rotate_pairs(const Tensor& x, double angle, std::uint64_t domain_seed) {
    const std::size_t d = x.dim(1);
    std::vector<std::size_t> perm(d);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(domain_seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    const double c = std::cos(angle), s = std::sin(angle);
    Tensor out = x;
    for (std::size_t i = 0; i < x.dim(0); ++i)
        for (std::size_t p = 0; p + 1 < d; p += 2) {
            const std::size_t a = perm[p], b = perm[p + 1];
            const double xa = x.at(i, a), xb = x.at(i, b);
            out.at(i, a) = c * xa - s * xb;
            out.at(i, b) = s * xa + c * xb;
        }
    return out;
}

} // namespace

const char* to_string(CorruptionKind kind) { return kKindNames.at(static_cast<std::size_t>(kind)); }

CorruptionKind parse_corruption_kind(std::string_view name) {
    for (std::size_t i = 0; i < kKindNames.size(); ++i)
        if (name == kKindNames[i]) return static_cast<CorruptionKind>(i);
    throw std::invalid_argument("unknown corruption kind '" + std::string(name) + "'");
}

std::vector<CorruptionKind> all_corruption_kinds() {
    std::vector<CorruptionKind> kinds;
    for (std::size_t i = 0; i < kCorruptionKindCount; ++i) kinds.push_back(static_cast<CorruptionKind>(i));
    return kinds;
}

double corruption_strength(CorruptionKind kind, int severity) {
    if (severity < 1 || severity > 5) throw std::invalid_argument("severity must be in 1..5, got " + std::to_string(severity));
    return kStrength.at(static_cast<std::size_t>(kind))[static_cast<std::size_t>(severity - 1)];
}

Tensor corrupt(const Tensor& inputs, const CorruptionSpec& spec, std::mt19937_64& rng) {
    return corrupt_with_strength(inputs, spec.kind, corruption_strength(spec.kind, spec.severity), spec.domain_seed, rng);
}

Tensor corrupt_with_strength(const Tensor& inputs, CorruptionKind kind, double strength, std::uint64_t domain_seed,
                             std::mt19937_64& rng) {
    if (inputs.rank() != 2) throw std::invalid_argument("corrupt: expected [n, d], got " + shape_str(inputs.shape()));
    if (strength < 0.0) throw std::invalid_argument("corrupt: strength must be >= 0");
    if (strength == 0.0) return inputs;
    Tensor out = inputs;
    switch (kind) {
    case CorruptionKind::GaussianNoise: {
        std::normal_distribution<double> noise(0.0, strength);
        for (double& v : out.data()) v += noise(rng);
        break;
    }
    case CorruptionKind::ImpulseNoise: {
        std::bernoulli_distribution hit(strength);
        std::bernoulli_distribution sign(0.5);
        for (double& v : out.data())
            if (hit(rng)) v = sign(rng) ? kImpulseMagnitude : -kImpulseMagnitude;
        break;
    }
    case CorruptionKind::FeatureBlur:
        out = blur(inputs, strength);
        break;
    case CorruptionKind::ContrastScale: {
        const double factor = 1.0 - strength;
        const std::size_t m = out.dim(0), d = out.dim(1);
        for (std::size_t i = 0; i < m; ++i) {
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += out.at(i, j);
            mean /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) out.at(i, j) = mean + factor * (out.at(i, j) - mean);
        }
        break;
    }
    case CorruptionKind::FeatureDropout: {
        std::bernoulli_distribution drop(strength);
        for (double& v : out.data())
            if (drop(rng)) v = 0.0;
        break;
    }
    case CorruptionKind::AffineWarp:
        out = rotate_pairs(inputs, strength, domain_seed);
        break;
    }
    return out;
}

const char* to_string(ScheduleKind kind) { return kind == ScheduleKind::Continual ? "continual" : "gradual"; }

ScheduleKind parse_schedule_kind(std::string_view name) {
    if (name == "continual") return ScheduleKind::Continual;
    if (name == "gradual") return ScheduleKind::Gradual;
    throw std::invalid_argument("unknown schedule kind '" + std::string(name) + "'");
}

std::size_t DomainSchedule::total_batches() const {
    std::size_t n = 0;
    for (const auto& s : segments) n += s.batch_count;
    return n;
}

DomainSchedule make_schedule(ScheduleKind kind, const std::vector<CorruptionKind>& corruptions,
                             std::size_t batches_per_segment, std::size_t batch_size, std::uint64_t seed) {
    if (corruptions.empty()) throw std::invalid_argument("make_schedule: no corruption kinds");
    if (batches_per_segment == 0 || batch_size == 0) throw std::invalid_argument("make_schedule: empty segments");
    DomainSchedule schedule;
    schedule.kind = kind;
    schedule.batch_size = batch_size;
    schedule.seed = seed;
    static constexpr std::array<int, 9> kRamp = {1, 2, 3, 4, 5, 4, 3, 2, 1};
    for (std::size_t d = 0; d < corruptions.size(); ++d) {
        const std::uint64_t domain_seed = seed * 0x9E3779B97F4A7C15ULL + d + 1;
        if (kind == ScheduleKind::Continual) {
            schedule.segments.push_back({{corruptions[d], 5, domain_seed}, batches_per_segment});
        } else {
            for (int sev : kRamp) schedule.segments.push_back({{corruptions[d], sev, domain_seed}, batches_per_segment});
        }
    }
    return schedule;
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_count(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != value.size()) throw std::invalid_argument("schedule: bad value for '" + key + "': " + value);
    return static_cast<std::size_t>(v);
}

} // namespace

ScheduleFile parse_schedule(std::string_view text) {
    ScheduleFile file;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("schedule: expected key=value, got '" + stripped + "'");
        const std::string key = trim(std::string_view(stripped).substr(0, eq));
        const std::string value = trim(std::string_view(stripped).substr(eq + 1));
        if (key == "kind") {
            file.kind = parse_schedule_kind(value);
        } else if (key == "kinds") {
            file.kinds.clear();
            std::istringstream list(value);
            std::string item;
            while (std::getline(list, item, ',')) file.kinds.push_back(parse_corruption_kind(trim(item)));
        } else if (key == "batches") {
            file.batches = parse_count(key, value);
        } else if (key == "batch_size") {
            file.batch_size = parse_count(key, value);
        } else if (key == "seed") {
            file.seed = parse_count(key, value);
        } else {
            throw std::invalid_argument("schedule: unknown key '" + key + "'");
        }
    }
    return file;
}

ScheduleFile load_schedule(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open schedule file '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_schedule(buf.str());
}

std::string describe(const DomainSchedule& schedule) {
    std::ostringstream out;
    out << "schedule kind=" << to_string(schedule.kind) << " batch_size=" << schedule.batch_size
        << " seed=" << schedule.seed << " segments=" << schedule.segments.size()
        << " batches=" << schedule.total_batches() << '\n';
    for (std::size_t i = 0; i < schedule.segments.size(); ++i) {
        const auto& s = schedule.segments[i];
        out << "  [" << i << "] " << to_string(s.corruption.kind) << " severity=" << s.corruption.severity
            << " batches=" << s.batch_count << '\n';
    }
    return out.str();
}

double EvalLabels::error_rate(const Tensor& logits) const {
    const auto predicted = argmax_rows(logits);
    if (predicted.size() != labels_.size()) throw std::invalid_argument("EvalLabels::error_rate: batch size mismatch");
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < labels_.size(); ++i) wrong += predicted[i] != labels_[i];
    return static_cast<double>(wrong) / static_cast<double>(labels_.size());
}

DomainStream::DomainStream(MixtureGenerator generator, DomainSchedule schedule)
    : generator_(std::move(generator)), schedule_(std::move(schedule)) {}

std::optional<StreamItem> DomainStream::next() {
    while (segment_ < schedule_.segments.size() && in_segment_ >= schedule_.segments[segment_].batch_count) {
        ++segment_;
        in_segment_ = 0;
    }
    if (segment_ >= schedule_.segments.size()) return std::nullopt;
    const Segment& seg = schedule_.segments[segment_];

    std::seed_seq seq{static_cast<std::uint32_t>(schedule_.seed), static_cast<std::uint32_t>(schedule_.seed >> 32),
                      static_cast<std::uint32_t>(position_), 0x7e57u};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::size_t> pick_class(0, generator_.class_count() - 1);
    std::vector<std::size_t> labels(schedule_.batch_size);
    for (auto& l : labels) l = pick_class(rng);
    const Tensor clean = generator_.sample(labels, rng);

    StreamItem item;
    item.batch.index = position_;
    item.batch.domain = seg.corruption.kind;
    item.batch.severity = seg.corruption.severity;
    item.batch.inputs = corrupt(clean, seg.corruption, rng);
    item.labels = EvalLabels(std::move(labels));
    ++in_segment_;
    ++position_;
    return item;
}

} // namespace lwtta
