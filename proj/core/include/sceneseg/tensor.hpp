#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "sceneseg/errors.hpp"

namespace sceneseg {

/// Rank-4 array in (batch, channel, height, width) order, row-major.
/// The single value container shared by every kernel in the library.
/// Instantiated with float for production and double for the
/// finite-difference checker.
template <typename T>
class TensorT {
public:
    TensorT() : shape_{0, 0, 0, 0} {}

    TensorT(size_t n, size_t c, size_t h, size_t w)
        : shape_{n, c, h, w}, data_(n * c * h * w, T(0)) {}

    explicit TensorT(const std::array<size_t, 4>& s)
        : shape_(s), data_(s[0] * s[1] * s[2] * s[3], T(0)) {}

    TensorT(const std::array<size_t, 4>& s, std::vector<T> values) : shape_(s), data_(std::move(values)) {
        if (data_.size() != count())
            throw ShapeError(detail::msg("tensor data length ", data_.size(),
                                         " does not match shape product ", count()));
    }

    const std::array<size_t, 4>& shape() const { return shape_; }
    size_t n() const { return shape_[0]; }
    size_t c() const { return shape_[1]; }
    size_t h() const { return shape_[2]; }
    size_t w() const { return shape_[3]; }
    size_t count() const { return shape_[0] * shape_[1] * shape_[2] * shape_[3]; }
    size_t plane() const { return shape_[2] * shape_[3]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& at(size_t in, size_t ic, size_t ih, size_t iw) {
        return data_[((in * shape_[1] + ic) * shape_[2] + ih) * shape_[3] + iw];
    }
    T at(size_t in, size_t ic, size_t ih, size_t iw) const {
        return data_[((in * shape_[1] + ic) * shape_[2] + ih) * shape_[3] + iw];
    }

    /// Pointer to the (n, c) spatial plane.
    T* plane_ptr(size_t in, size_t ic) { return data_.data() + (in * shape_[1] + ic) * plane(); }
    const T* plane_ptr(size_t in, size_t ic) const {
        return data_.data() + (in * shape_[1] + ic) * plane();
    }

    /// Pointer to sample n, a contiguous (c, h, w) block.
    T* sample_ptr(size_t in) { return data_.data() + in * shape_[1] * plane(); }
    const T* sample_ptr(size_t in) const { return data_.data() + in * shape_[1] * plane(); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape_);
        for (size_t i = 0; i < data_.size(); ++i) out.values()[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::array<size_t, 4> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
void require_shape(const TensorT<T>& t, size_t n, size_t c, size_t h, size_t w, const char* what) {
    const auto& s = t.shape();
    const size_t want[4] = {n, c, h, w};
    for (int d = 0; d < 4; ++d) {
        if (s[d] != want[d])
            throw ShapeError(detail::msg(what, ": dim ", d, " is ", s[d], ", expected ", want[d]));
    }
}

}  // namespace sceneseg
