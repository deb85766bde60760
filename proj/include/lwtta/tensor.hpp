#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace lwtta {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. A rank-0 tensor (shape {}) holds one value.
class Tensor {
public:
    Tensor() : data_(1, 0.0) {}
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor identity(std::size_t n);
    static Tensor from_rows(const std::vector<std::vector<double>>& rows);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    const double& operator[](std::size_t i) const { return data_[i]; }

    // 2-D element access
    double& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
    double at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }

    double item() const;
    bool all_finite() const noexcept;

    Tensor reshaped(Shape shape) const;
    Tensor row(std::size_t r) const;

    void fill(double value);

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Elementwise bit-level equality (distinguishes -0.0 from 0.0 and matches identical NaNs).
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

double max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace lwtta
