#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "ctseg/error.hpp"

namespace ctseg {

// Dense row-major tensor. Rank is small (<= 5): feature maps are (C,D,H,W),
// conv weights (O,I,kd,kh,kw), FC weights (O,I), vectors (C).
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        size_t n = 1;
        for (int d : shape_) {
            if (d <= 0) throw ShapeError("Tensor: non-positive dimension");
            n *= size_t(d);
        }
        data_.assign(n, T(0));
    }

    Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return int(shape_.size()); }
    int dim(int i) const { return shape_[size_t(i)]; }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T(0)); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // (C,D,H,W) accessors for the common feature-map case.
    T& at4(int c, int z, int y, int x) {
        return data_[((size_t(c) * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
    }
    T at4(int c, int z, int y, int x) const {
        return data_[((size_t(c) * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '(';
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ')';
        return os.str();
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (size_t i = 0; i < data_.size(); ++i) out[i] = U(data_[i]);
        return out;
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

}  // namespace ctseg
