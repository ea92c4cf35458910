#include "ltp/tensor.hpp"

#include <cmath>
#include <cstring>

#include "ltp/error.hpp"

namespace ltp {

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            out += ", ";
        }
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

namespace {

void check_dims(const Shape& shape) {
    if (shape.empty()) {
        throw ShapeError("tensor: shape must have at least one dimension");
    }
    for (auto d : shape) {
        if (d == 0) {
            throw ShapeError("tensor: dimensions must be positive, got " + shape_str(shape));
        }
    }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_dims(shape_);
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims(shape_);
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::row(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ShapeError("tensor: item() on tensor of shape " + shape_str(shape_));
    }
    return data_[0];
}

void Tensor::fill(double v) {
    for (auto& x : data_) {
        x = v;
    }
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

bool Tensor::bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

}  // namespace ltp
