#pragma once

#include <cmath>
#include <vector>

#include "phr/common.hpp"
#include "phr/tensor.hpp"

namespace phr {

enum class ScheduleKind { linear_beta, cosine };

inline const char* to_string(ScheduleKind k) {
    return k == ScheduleKind::linear_beta ? "linear_beta" : "cosine";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear_beta") return ScheduleKind::linear_beta;
    if (s == "cosine") return ScheduleKind::cosine;
    throw contract_error("unknown schedule kind: " + s);
}

/// Cumulative signal coefficients for the forward/reverse process.
/// alpha_bar[t] is the signal retention at timestep t; alpha_bar[0] == 1 and
/// the sequence is strictly decreasing.
struct NoiseSchedule {
    i64 T = 0;
    std::vector<double> alpha_bar;  // size T+1
    ScheduleKind kind = ScheduleKind::linear_beta;

    double at(i64 t) const {
        require(t >= 0 && t <= T, "schedule: timestep out of range");
        return alpha_bar[static_cast<std::size_t>(t)];
    }
};

/// linear_beta: beta_t linearly spaced in [1e-4, 2e-2] over T steps.
/// cosine: squared-cosine signal curve with the usual 0.008 offset.
inline NoiseSchedule make_schedule(i64 T, ScheduleKind kind = ScheduleKind::linear_beta) {
    require(T >= 1, "make_schedule: T must be >= 1");
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
    s.alpha_bar[0] = 1.0;
    if (kind == ScheduleKind::linear_beta) {
        const double beta_lo = 1e-4, beta_hi = 2e-2;
        double prod = 1.0;
        for (i64 t = 1; t <= T; ++t) {
            double beta = (T == 1) ? beta_lo
                                   : beta_lo + (beta_hi - beta_lo) *
                                                   static_cast<double>(t - 1) /
                                                   static_cast<double>(T - 1);
            prod *= 1.0 - beta;
            s.alpha_bar[static_cast<std::size_t>(t)] = prod;
        }
    } else {
        const double off = 0.008;
        auto f = [off](double u) {
            double v = std::cos((u + off) / (1.0 + off) * 3.14159265358979323846 / 2.0);
            return v * v;
        };
        double f0 = f(0.0);
        double prev = 1.0;
        for (i64 t = 1; t <= T; ++t) {
            double v = f(static_cast<double>(t) / static_cast<double>(T)) / f0;
            // keep strict monotonicity even at the flat tail
            v = std::min(v, prev * (1.0 - 1e-9));
            v = std::max(v, 1e-12);
            s.alpha_bar[static_cast<std::size_t>(t)] = v;
            prev = v;
        }
    }
    return s;
}

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, i64 t, const Tensor<T>& eps,
                          const NoiseSchedule& schedule) {
    require(z0.same_shape(eps), "forward_diffuse: shape mismatch");
    require(t >= 0 && t <= schedule.T, "forward_diffuse: t out of range");
    double ab = schedule.at(t);
    T sa = static_cast<T>(std::sqrt(ab));
    T sb = static_cast<T>(std::sqrt(1.0 - ab));
    Tensor<T> out(z0.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = sa * z0.data[i] + sb * eps.data[i];
    return out;
}

/// Transfers a pixel-space mask to latent resolution: a latent cell is
/// marked when any pixel in its f x f window is marked.
inline MaskU8 downsample_mask(const MaskU8& mask, i64 factor) {
    require(mask.rank() == 2, "downsample_mask: expected 2-D mask");
    require(factor >= 1, "downsample_mask: factor must be >= 1");
    i64 h = mask.dim(0), w = mask.dim(1);
    require(h % factor == 0 && w % factor == 0, "downsample_mask: dims not divisible by factor");
    MaskU8 out({h / factor, w / factor});
    for (i64 r = 0; r < h / factor; ++r)
        for (i64 c = 0; c < w / factor; ++c) {
            u8 v = 0;
            for (i64 dr = 0; dr < factor && !v; ++dr)
                for (i64 dc = 0; dc < factor; ++dc)
                    if (mask.at(r * factor + dr, c * factor + dc)) {
                        v = 1;
                        break;
                    }
            out.at(r, c) = v;
        }
    return out;
}

/// Standalone masked MSE (the loss the training graph also computes): mean of
/// squared differences over masked cells. Empty mask yields 0; *warned is set
/// when provided so callers can log it.
template <class T>
double masked_mse(const Tensor<T>& eps, const Tensor<T>& eps_hat, const MaskU8& mask,
                  bool* warned = nullptr) {
    require(eps.same_shape(eps_hat), "masked_mse: shape mismatch");
    require(mask.shape == eps.shape, "masked_mse: mask shape mismatch");
    double acc = 0.0;
    i64 cnt = 0;
    for (std::size_t i = 0; i < eps.data.size(); ++i) {
        if (!mask.data[i]) continue;
        double d = static_cast<double>(eps.data[i]) - static_cast<double>(eps_hat.data[i]);
        acc += d * d;
        ++cnt;
    }
    if (cnt == 0) {
        if (warned) *warned = true;
        return 0.0;
    }
    return acc / static_cast<double>(cnt);
}

}  // namespace phr
