#pragma once

#include <functional>
#include <vector>

#include "phr/bundle.hpp"
#include "phr/rng.hpp"
#include "phr/schedule.hpp"

namespace phr {

using DenoiseFn = std::function<Tensor<float>(const Tensor<float>& z, i64 t)>;

/// Descending timestep ladder T = t_0 > t_1 > ... > t_steps = 0.
inline std::vector<i64> sample_ladder(i64 T, i64 steps) {
    require(steps >= 1, "sample: steps must be >= 1");
    require(steps <= T, "sample: steps exceed schedule length");
    std::vector<i64> ts;
    for (i64 i = 0; i <= steps; ++i)
        ts.push_back(static_cast<i64>(std::llround(
            static_cast<double>(T) * static_cast<double>(steps - i) / static_cast<double>(steps))));
    return ts;
}

/// Deterministic reverse process (eta = 0): at each ladder step the clean
/// latent is predicted from eps_hat and re-noised to the next level. When a
/// pin mask and context latent are given, the unmasked region is re-pinned
/// to the noised context before every model call, which keeps the visible
/// anatomy driving the trajectory.
inline Tensor<float> sample_with(const DenoiseFn& denoise, const NoiseSchedule& schedule,
                                 const std::vector<i64>& latent_shape, i64 steps, Rng& rng,
                                 const MaskU8* pin_mask = nullptr,
                                 const Tensor<float>* context = nullptr,
                                 double x0_clamp = 0.0) {
    auto ladder = sample_ladder(schedule.T, steps);
    Tensor<float> z = Tensor<float>::randn(latent_shape, rng);

    bool pin = pin_mask != nullptr && context != nullptr && pin_mask->numel() > 0;
    i64 c = latent_shape[0], h = latent_shape[1], w = latent_shape[2];
    if (pin) require(pin_mask->shape == std::vector<i64>{h, w}, "sample: pin mask dims");

    for (std::size_t i = 0; i + 1 < ladder.size(); ++i) {
        i64 t = ladder[i], t_prev = ladder[i + 1];
        if (pin) {
            auto eps_ctx = Tensor<float>::randn(latent_shape, rng);
            auto noised_ctx = forward_diffuse(*context, t, eps_ctx, schedule);
            for (i64 ch = 0; ch < c; ++ch)
                for (i64 j = 0; j < h * w; ++j)
                    if (!pin_mask->data[static_cast<std::size_t>(j)])
                        z.data[static_cast<std::size_t>(ch * h * w + j)] =
                            noised_ctx.data[static_cast<std::size_t>(ch * h * w + j)];
        }
        auto eps_hat = denoise(z, t);
        require(eps_hat.shape == z.shape, "sample: denoiser output shape mismatch");

        double ab_t = schedule.at(t);
        double ab_prev = schedule.at(t_prev);
        float inv_sa = static_cast<float>(1.0 / std::sqrt(ab_t));
        float sb = static_cast<float>(std::sqrt(1.0 - ab_t));
        float sa_prev = static_cast<float>(std::sqrt(ab_prev));
        float sb_prev = static_cast<float>(std::sqrt(1.0 - ab_prev));
        float cl = static_cast<float>(x0_clamp);
        for (std::size_t j = 0; j < z.data.size(); ++j) {
            float x0 = (z.data[j] - sb * eps_hat.data[j]) * inv_sa;
            if (cl > 0.0f) x0 = std::clamp(x0, -cl, cl);
            z.data[j] = sa_prev * x0 + sb_prev * eps_hat.data[j];
        }
    }
    return z;  // ladder ends at t = 0, so this is the predicted clean latent
}

/// Bundle-backed sampler: prompt (and edge conditioning, when present) come
/// from the pack; the pack's context latent and latent mask pin the
/// unmasked region.
inline Tensor<float> sample(DenoiserBundle& bundle, const std::vector<i64>& latent_shape,
                            const ConditioningPack& pack, i64 steps, Rng& rng) {
    DenoiseFn fn = [&bundle, &pack, &latent_shape](const Tensor<float>& z, i64 t) {
        ConditioningPack p = pack;
        p.timestep = t;
        Tensor<float> zb = z.reshaped(
            {1, latent_shape[0], latent_shape[1], latent_shape[2]});
        auto eps = predict_noise(bundle, zb, {p});
        return eps.reshaped(latent_shape);
    };
    const MaskU8* pin = pack.latent_mask.numel() > 0 ? &pack.latent_mask : nullptr;
    const Tensor<float>* ctx =
        pack.context_latent.has_value() ? &*pack.context_latent : nullptr;
    // identity autoencoder means the latent is the [-1,1] image itself, so the
    // predicted clean latent can be clamped to that range at every step
    double clamp = bundle.cfg.autoencoder == AutoencoderKind::identity ? 1.0 : 0.0;
    return sample_with(fn, bundle.schedule, latent_shape, steps, rng, pin, ctx, clamp);
}

}  // namespace phr
