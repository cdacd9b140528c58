#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmclip {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense n-dimensional array, row-major. The sole numeric carrier for
/// images, activations and gradients. Scalar is float in normal builds
/// and double in verification mode.
template <typename S>
struct Tensor {
    Shape shape;
    std::vector<S> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<S> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != data.size())
            throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                        " does not match data length " + std::to_string(data.size()));
    }

    static Tensor zeros(Shape s) {
        std::size_t n = numel(s);
        return Tensor(std::move(s), std::vector<S>(n, S(0)));
    }

    static Tensor full(Shape s, S v) {
        std::size_t n = numel(s);
        return Tensor(std::move(s), std::vector<S>(n, v));
    }

    /// Construction with the checked-mode invariant: every entry finite.
    static Tensor checked(Shape s, std::vector<S> d) {
        Tensor t(std::move(s), std::move(d));
        for (S v : t.data)
            if (!std::isfinite(v)) throw std::invalid_argument("tensor: non-finite entry rejected");
        return t;
    }

    std::size_t size() const { return data.size(); }
    S& operator[](std::size_t i) { return data[i]; }
    const S& operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Shape& other) const { return shape == other; }

    template <typename T>
    Tensor<T> cast() const {
        std::vector<T> out(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out[i] = static_cast<T>(data[i]);
        return Tensor<T>(shape, std::move(out));
    }

    Tensor reshaped(Shape s) const {
        if (numel(s) != data.size())
            throw std::invalid_argument("tensor: reshape to incompatible shape " + shape_str(s));
        return Tensor(std::move(s), data);
    }
};

template <typename S>
bool all_finite(const Tensor<S>& t) {
    for (S v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace mmclip
