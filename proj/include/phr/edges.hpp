#pragma once

#include <cmath>
#include <deque>
#include <vector>

#include "phr/common.hpp"
#include "phr/tensor.hpp"

namespace phr {

enum class EdgeSource { native, mirrored_composite };

/// Binary structural condition extracted from a slice.
struct EdgeMap {
    MaskU8 edges;
    EdgeSource source = EdgeSource::native;
};

namespace detail {
inline i64 reflect(i64 i, i64 n) {
    // reflect-101 style border: ..., 2, 1, 0, 1, 2, ...
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
}
}  // namespace detail

/// Normalized Gaussian kernel of odd size. Exposed so tests can check the
/// impulse response against the closed form.
inline std::vector<double> gaussian_kernel(i64 kernel, double sigma) {
    require(kernel % 2 == 1, "gaussian kernel size must be odd");
    require(sigma > 0.0, "gaussian sigma must be positive");
    std::vector<double> k(static_cast<std::size_t>(kernel));
    i64 half = kernel / 2;
    double sum = 0.0;
    for (i64 i = 0; i < kernel; ++i) {
        double x = static_cast<double>(i - half);
        k[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * sigma * sigma));
        sum += k[static_cast<std::size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

/// Separable Gaussian blur with reflected borders.
inline ImageF gaussian_smooth(const ImageF& image, i64 kernel = 5, double sigma = 1.0) {
    require(image.rank() == 2, "gaussian_smooth: expected 2-D image");
    auto k = gaussian_kernel(kernel, sigma);
    i64 h = image.dim(0), w = image.dim(1), half = kernel / 2;
    ImageF tmp(image.shape), out(image.shape);
    for (i64 r = 0; r < h; ++r)
        for (i64 c = 0; c < w; ++c) {
            double acc = 0.0;
            for (i64 d = -half; d <= half; ++d)
                acc += k[static_cast<std::size_t>(d + half)] *
                       image.at(r, detail::reflect(c + d, w));
            tmp.at(r, c) = static_cast<float>(acc);
        }
    for (i64 r = 0; r < h; ++r)
        for (i64 c = 0; c < w; ++c) {
            double acc = 0.0;
            for (i64 d = -half; d <= half; ++d)
                acc += k[static_cast<std::size_t>(d + half)] *
                       tmp.at(detail::reflect(r + d, h), c);
            out.at(r, c) = static_cast<float>(acc);
        }
    return out;
}

/// Canny on a [-1,1]-domain slice: the input is first mapped linearly to
/// [0,255] so the usual threshold scale applies, then Sobel gradients,
/// 4-direction non-maximum suppression, double thresholding and 8-connected
/// hysteresis. No smoothing here; compose with gaussian_smooth upstream.
inline EdgeMap canny_edges(const ImageF& image, double low = 30.0, double high = 80.0) {
    require(image.rank() == 2, "canny_edges: expected 2-D image");
    require(low < high, "canny_edges: low threshold must be below high");
    i64 h = image.dim(0), w = image.dim(1);

    // [-1,1] -> [0,255]; constant offsets shift values but not gradients
    std::vector<double> g(static_cast<std::size_t>(h * w));
    for (i64 i = 0; i < h * w; ++i)
        g[static_cast<std::size_t>(i)] =
            (static_cast<double>(image.data[static_cast<std::size_t>(i)]) + 1.0) * 0.5 * 255.0;

    auto at = [&](i64 r, i64 c) {
        return g[static_cast<std::size_t>(detail::reflect(r, h) * w + detail::reflect(c, w))];
    };

    std::vector<double> mag(static_cast<std::size_t>(h * w), 0.0);
    std::vector<u8> dir(static_cast<std::size_t>(h * w), 0);  // 0:E-W 1:NE-SW 2:N-S 3:NW-SE
    for (i64 r = 0; r < h; ++r)
        for (i64 c = 0; c < w; ++c) {
            double gx = at(r - 1, c + 1) + 2 * at(r, c + 1) + at(r + 1, c + 1) -
                        at(r - 1, c - 1) - 2 * at(r, c - 1) - at(r + 1, c - 1);
            double gy = at(r + 1, c - 1) + 2 * at(r + 1, c) + at(r + 1, c + 1) -
                        at(r - 1, c - 1) - 2 * at(r - 1, c) - at(r - 1, c + 1);
            double m = std::sqrt(gx * gx + gy * gy);
            mag[static_cast<std::size_t>(r * w + c)] = m;
            double ang = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
            if (ang < 0) ang += 180.0;
            u8 q = 0;
            if (ang < 22.5 || ang >= 157.5) q = 0;
            else if (ang < 67.5) q = 1;
            else if (ang < 112.5) q = 2;
            else q = 3;
            dir[static_cast<std::size_t>(r * w + c)] = q;
        }

    auto mag_at = [&](i64 r, i64 c) {
        if (r < 0 || r >= h || c < 0 || c >= w) return 0.0;
        return mag[static_cast<std::size_t>(r * w + c)];
    };

    // non-maximum suppression; ties broken asymmetrically so a flat two-pixel
    // ridge keeps a single pixel
    std::vector<u8> strength(static_cast<std::size_t>(h * w), 0);  // 0 none, 1 weak, 2 strong
    for (i64 r = 0; r < h; ++r)
        for (i64 c = 0; c < w; ++c) {
            double m = mag[static_cast<std::size_t>(r * w + c)];
            if (m < low) continue;
            double n1 = 0, n2 = 0;
            switch (dir[static_cast<std::size_t>(r * w + c)]) {
                case 0: n1 = mag_at(r, c - 1); n2 = mag_at(r, c + 1); break;
                case 1: n1 = mag_at(r - 1, c + 1); n2 = mag_at(r + 1, c - 1); break;
                case 2: n1 = mag_at(r - 1, c); n2 = mag_at(r + 1, c); break;
                default: n1 = mag_at(r - 1, c - 1); n2 = mag_at(r + 1, c + 1); break;
            }
            if (m > n1 && m >= n2) strength[static_cast<std::size_t>(r * w + c)] = m >= high ? 2 : 1;
        }

    // hysteresis: weak pixels survive only when 8-connected to a strong one
    EdgeMap out;
    out.edges = MaskU8(image.shape);
    std::deque<i64> queue;
    for (i64 i = 0; i < h * w; ++i)
        if (strength[static_cast<std::size_t>(i)] == 2) {
            out.edges.data[static_cast<std::size_t>(i)] = 1;
            queue.push_back(i);
        }
    while (!queue.empty()) {
        i64 i = queue.front();
        queue.pop_front();
        i64 r = i / w, c = i % w;
        for (i64 dr = -1; dr <= 1; ++dr)
            for (i64 dc = -1; dc <= 1; ++dc) {
                i64 rr = r + dr, cc = c + dc;
                if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                i64 j = rr * w + cc;
                if (strength[static_cast<std::size_t>(j)] == 1 &&
                    !out.edges.data[static_cast<std::size_t>(j)]) {
                    out.edges.data[static_cast<std::size_t>(j)] = 1;
                    queue.push_back(j);
                }
            }
    }
    return out;
}

/// Composite of flipped and native edges: inside the inpaint mask the
/// left-right mirrored edges are substituted, outside the native edges are
/// kept untouched.
inline EdgeMap mirror_composite(const EdgeMap& edge_map, const MaskU8& inpaint_mask) {
    require(edge_map.edges.shape == inpaint_mask.shape, "mirror_composite: dimension mismatch");
    EdgeMap out;
    out.source = EdgeSource::mirrored_composite;
    out.edges = edge_map.edges;
    i64 h = out.edges.dim(0), w = out.edges.dim(1);
    for (i64 r = 0; r < h; ++r)
        for (i64 c = 0; c < w; ++c)
            if (inpaint_mask.at(r, c)) out.edges.at(r, c) = edge_map.edges.at(r, w - 1 - c);
    return out;
}

}  // namespace phr
