#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace compatfam {

// Error taxonomy shared across the library. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct BindError : Error {
    using Error::Error;
};
struct NonFiniteError : Error {
    NonFiniteError(const std::string& msg, int node_id) : Error(msg), node(node_id) {}
    int node;
};
struct IoError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct UsageError : Error {
    using Error::Error;
};

/// Dense row-major tensor of 64-bit floats. Rank is arbitrary for storage
/// (item stacks are [n,H,W]) but all graph math works on rank-2 views.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(numel_of(shape_)), 0.0);
    }

    Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (numel_of(shape_) != static_cast<std::int64_t>(data_.size()))
            throw ShapeError("tensor data length does not match shape");
    }

    static Tensor zeros(std::int64_t r, std::int64_t c) { return Tensor({r, c}); }

    static Tensor full(std::int64_t r, std::int64_t c, double v) {
        Tensor t({r, c});
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }

    /// 1 x n row vector.
    static Tensor row(std::vector<double> v) {
        auto n = static_cast<std::int64_t>(v.size());
        return Tensor({1, n}, std::move(v));
    }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    std::int64_t rows() const {
        require_rank2();
        return shape_[0];
    }
    std::int64_t cols() const {
        require_rank2();
        return shape_[1];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    double& at(std::int64_t r, std::int64_t c) {
        return data_[static_cast<std::size_t>(r * cols() + c)];
    }
    double at(std::int64_t r, std::int64_t c) const {
        return data_[static_cast<std::size_t>(r * cols() + c)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// Copy of row r as a [1,c] tensor (rank-2 only).
    Tensor row_copy(std::int64_t r) const;

    static std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (auto d : shape) {
            if (d <= 0) throw ShapeError("non-positive dimension");
            n *= d;
        }
        return n;
    }

private:
    void require_rank2() const {
        if (shape_.size() != 2) throw ShapeError("rank-2 tensor required");
    }

    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

std::string shape_str(const std::vector<std::int64_t>& s);

}  // namespace compatfam
