#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace bsentinel {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

/// Dense row-major array. Rank 0 is a scalar, rank 1 a vector and rank 2 a
/// matrix; nothing in the library needs higher ranks.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() : shape_{}, data_(1, T{0}) {}

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
        for (std::size_t d : shape_) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
        }
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("shape " + shape_string(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
        }
    }

    static Tensor zeros(Shape shape) { return full(std::move(shape), T{0}); }

    static Tensor full(Shape shape, T value) {
        const std::size_t n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value));
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

    static Tensor vector(std::vector<T> values) {
        const std::size_t n = values.size();
        return Tensor(Shape{n}, std::move(values));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
        return Tensor(Shape{rows, cols}, std::move(values));
    }

    static Tensor identity(std::size_t n) {
        Tensor out = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
        return out;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

    bool requires_grad() const noexcept { return requires_grad_; }
    Tensor& set_requires_grad(bool value) noexcept {
        requires_grad_ = value;
        return *this;
    }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    std::span<const T> row(std::size_t r) const { return std::span<const T>(data_).subspan(r * cols(), cols()); }
    std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }

    Tensor reshaped(Shape shape) const {
        Tensor out(std::move(shape), data_);
        out.requires_grad_ = requires_grad_;
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out), requires_grad_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
    bool requires_grad_ = false;
};

/// Plain forward kernels shared by the tape operations and by code paths that
/// never need gradients (the image encoder, inference).
namespace kernels {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(std::string(what) + " expects a matrix, got " + shape_string(t.shape()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ShapeError("matmul shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        T* dst = &out(i, 0);
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a(i, p);
            if (aip == T{0}) continue;
            const T* src = &b(p, 0);
            for (std::size_t j = 0; j < n; ++j) dst[j] += aip * src[j];
        }
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
    return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    require_matrix(x, "add_bias");
    if (bias.size() != x.cols()) {
        throw ShapeError("bias " + shape_string(bias.shape()) + " does not match rows of " + shape_string(x.shape()));
    }
    Tensor<T> out = x;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out = x;
    for (auto& v : out.data()) v = v > T{0} ? v : T{0};
    return out;
}

template <typename T>
T gelu_value(T x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    return T(0.5) * x * (T{1} + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
    constexpr T c = T(0.7978845608028654);
    const T inner = c * (x + T(0.044715) * x * x * x);
    const T th = std::tanh(inner);
    const T dinner = c * (T{1} + T(3 * 0.044715) * x * x);
    return T(0.5) * (T{1} + th) + T(0.5) * x * (T{1} - th * th) * dinner;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out = x;
    for (auto& v : out.data()) v = gelu_value(v);
    return out;
}

/// Row-wise softmax with the row maximum subtracted first.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    Tensor<T> out = x.rank() == 2 ? x : x.reshaped({1, x.size()});
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        const T mx = *std::max_element(r.begin(), r.end());
        T total{0};
        for (auto& v : r) {
            v = std::exp(v - mx);
            total += v;
        }
        for (auto& v : r) v /= total;
    }
    return x.rank() == 2 ? out : out.reshaped(x.shape());
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
    T acc{0};
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
T l2_norm(std::span<const T> v) {
    return std::sqrt(dot(v, v));
}

}  // namespace kernels
}  // namespace bsentinel
