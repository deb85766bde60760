#include "lwtta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace lwtta {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    for (auto d : shape_) {
        if (d == 0) throw std::invalid_argument("Tensor: zero-sized dimension in shape " + shape_str(shape_));
    }
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_) {
        if (d == 0) throw std::invalid_argument("Tensor: zero-sized dimension in shape " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data_.size()) {
        throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match " +
                                    std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty() || rows.front().empty()) throw std::invalid_argument("Tensor::from_rows: empty input");
    const std::size_t cols = rows.front().size();
    std::vector<double> flat;
    flat.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        if (r.size() != cols) throw std::invalid_argument("Tensor::from_rows: ragged rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(flat));
}

double Tensor::item() const {
    if (data_.size() != 1) throw std::logic_error("Tensor::item on tensor of shape " + shape_str(shape_));
    return data_[0];
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::row(std::size_t r) const {
    if (rank() != 2 || r >= shape_[0]) throw std::out_of_range("Tensor::row: bad row index");
    const std::size_t cols = shape_[1];
    return Tensor({1, cols}, std::vector<double>(data_.begin() + r * cols, data_.begin() + (r + 1) * cols));
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("max_abs_diff: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace lwtta
