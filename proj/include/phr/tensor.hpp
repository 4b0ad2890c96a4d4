#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "phr/common.hpp"
#include "phr/rng.hpp"

namespace phr {

/// Dense row-major tensor. Rank is dynamic; the networks use {N,C,H,W},
/// sequences use {N,L,D}, plain images use {H,W}.
template <class T>
struct Tensor {
    std::vector<i64> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<i64> s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
    }
    Tensor(std::vector<i64> s, T fill_value) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), fill_value);
    }

    static i64 numel_of(const std::vector<i64>& s) {
        i64 n = 1;
        for (i64 d : s) {
            require(d >= 0, "tensor dimension must be non-negative");
            n *= d;
        }
        return n;
    }

    i64 numel() const { return static_cast<i64>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    i64 dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    // 2-D access (rows, cols)
    T& at(i64 r, i64 c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
    T at(i64 r, i64 c) const { return data[static_cast<std::size_t>(r * shape[1] + c)]; }

    // 4-D access (n, c, h, w)
    T& at(i64 n, i64 c, i64 h, i64 w) {
        return data[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    T at(i64 n, i64 c, i64 h, i64 w) const {
        return data[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    Tensor reshaped(std::vector<i64> s) const {
        require(numel_of(s) == numel(), "reshape: element count mismatch");
        Tensor out;
        out.shape = std::move(s);
        out.data = data;
        return out;
    }

    T min() const { return *std::min_element(data.begin(), data.end()); }
    T max() const { return *std::max_element(data.begin(), data.end()); }

    static Tensor randn(std::vector<i64> s, Rng& rng, double scale = 1.0) {
        Tensor out(std::move(s));
        for (auto& v : out.data) v = static_cast<T>(rng.gaussian() * scale);
        return out;
    }
};

using ImageF = Tensor<float>;
using MaskU8 = Tensor<u8>;

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape && a.data == b.data;
}

/// Left-right flip about the vertical midline of a 2-D tensor.
template <class T>
Tensor<T> fliplr(const Tensor<T>& img) {
    require(img.rank() == 2, "fliplr: expected 2-D tensor");
    Tensor<T> out(img.shape);
    i64 h = img.dim(0), w = img.dim(1);
    for (i64 r = 0; r < h; ++r)
        for (i64 c = 0; c < w; ++c) out.at(r, c) = img.at(r, w - 1 - c);
    return out;
}

}  // namespace phr
