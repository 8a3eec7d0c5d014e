#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace martpost {

// Minimal row-major dense matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(long rows, long cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows * cols), fill) {}

    long rows() const { return rows_; }
    long cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(long r, long c) { return data_[static_cast<std::size_t>(r * cols_ + c)]; }
    double operator()(long r, long c) const { return data_[static_cast<std::size_t>(r * cols_ + c)]; }

    std::span<double> row(long r) { return {data_.data() + r * cols_, static_cast<std::size_t>(cols_)}; }
    std::span<const double> row(long r) const {
        return {data_.data() + r * cols_, static_cast<std::size_t>(cols_)};
    }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

private:
    long rows_ = 0;
    long cols_ = 0;
    std::vector<double> data_;
};

} // namespace martpost
