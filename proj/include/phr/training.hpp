#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phr/bundle.hpp"
#include "phr/dataset.hpp"
#include "phr/schedule.hpp"

namespace phr {

/// Optimization settings for one stage. The stage-1 / stage-2 defaults carry
/// the full-scale values; desk presets override max_steps and sizes.
struct TrainConfig {
    StageTag stage = StageTag::stage1;
    i64 batch_size = 8;
    i64 grad_accum = 4;
    i64 epochs = 30;
    i64 max_steps = 0;  // > 0 overrides the epoch-derived step count
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    i64 warmup_steps = 0;
    double grad_clip = 1.0;
    u64 seed = 0;

    i64 effective_batch() const { return batch_size * grad_accum; }
};

/// Linear warmup to 1, then cosine decay to 0 at total_steps.
inline double lr_multiplier(i64 step, i64 total_steps, i64 warmup) {
    require(step >= 0 && step <= total_steps, "lr_multiplier: step out of range");
    require(warmup < total_steps, "lr_multiplier: warmup must be below total_steps");
    if (warmup > 0 && step < warmup)
        return static_cast<double>(step) / static_cast<double>(warmup);
    double u = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return 0.5 * (1.0 + std::cos(3.14159265358979323846 * u));
}

/// Decoupled-weight-decay Adam over the trainable store entries.
class AdamW {
public:
    AdamW(double beta1, double beta2, double weight_decay, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {}

    void step(ParamStore<float>& store, double lr) {
        if (m_.empty()) {
            m_.resize(static_cast<std::size_t>(store.size()));
            v_.resize(static_cast<std::size_t>(store.size()));
        }
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (i64 p = 0; p < store.size(); ++p) {
            auto& e = store.at(static_cast<int>(p));
            if (!e.trainable) continue;
            auto& m = m_[static_cast<std::size_t>(p)];
            auto& v = v_[static_cast<std::size_t>(p)];
            if (m.data.empty()) {
                m = Tensor<float>(e.value.shape);
                v = Tensor<float>(e.value.shape);
            }
            for (std::size_t i = 0; i < e.value.data.size(); ++i) {
                double g = e.grad.data[i];
                double mi = beta1_ * m.data[i] + (1.0 - beta1_) * g;
                double vi = beta2_ * v.data[i] + (1.0 - beta2_) * g * g;
                m.data[i] = static_cast<float>(mi);
                v.data[i] = static_cast<float>(vi);
                double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_) +
                                weight_decay_ * e.value.data[i];
                e.value.data[i] = static_cast<float>(e.value.data[i] - lr * update);
            }
        }
    }

private:
    double beta1_, beta2_, weight_decay_, eps_;
    i64 t_ = 0;
    std::vector<Tensor<float>> m_, v_;
};

/// Scales trainable gradients so their global norm is at most max_norm.
/// Returns the pre-clip norm.
inline double clip_gradients(ParamStore<float>& store, double max_norm) {
    double sq = 0.0;
    for (const auto& e : store.entries()) {
        if (!e.trainable) continue;
        for (float g : e.grad.data) sq += static_cast<double>(g) * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        float scale = static_cast<float>(max_norm / norm);
        for (auto& e : store.entries()) {
            if (!e.trainable) continue;
            for (auto& g : e.grad.data) g *= scale;
        }
    }
    return norm;
}

/// One training example: a slice plus its fixed conditioning inputs.
struct TrainItem {
    ImageF image;            // {H,W} in [-1,1]
    MaskU8 inpaint_mask;     // pixel resolution
    TokenSequence tokens;
    std::optional<MaskU8> edges;  // stage-2 Canny condition
    i64 source_index = 0;         // manifest position, for diagnostics
};

/// Builds the denoiser inputs for a batch, runs forward + masked loss, and
/// (when training) accumulates gradients into the store. Timesteps and noise
/// are drawn per item in order, so micro-batch boundaries do not change the
/// draw sequence.
inline double training_step(const std::vector<TrainItem>& items, DenoiserBundle& bundle,
                            Rng& rng, bool backprop = true) {
    require(!items.empty(), "training_step: empty batch");
    i64 n = static_cast<i64>(items.size());
    i64 f = bundle.cfg.downscale_factor;
    i64 hp = items[0].image.dim(0), wp = items[0].image.dim(1);
    i64 c = bundle.cfg.latent_channels, h = hp / f, w = wp / f;

    Tensor<float> z_t({n, c, h, w});
    Tensor<float> target({n, c, h, w});
    std::vector<ConditioningPack> packs;
    // edge conditioning is a stage-2 concern; stage-1 ignores cached edges
    bool stage2 = bundle.stage == StageTag::stage2;

    for (i64 i = 0; i < n; ++i) {
        const auto& item = items[static_cast<std::size_t>(i)];
        require(item.image.shape == items[0].image.shape,
                "training_step: batch slices must share one resolution");

        auto z_full = bundle.encode_image(item.image);
        ImageF masked = item.image;
        for (std::size_t j = 0; j < masked.data.size(); ++j)
            if (item.inpaint_mask.data[j]) masked.data[j] = 0.0f;  // zero fill
        auto z_ctx = bundle.encode_image(masked);
        auto latent_mask = downsample_mask(item.inpaint_mask, f);

        i64 t = rng.uniform_int(1, bundle.schedule.T);
        Tensor<float> eps({c, h, w});
        for (auto& v : eps.data) v = static_cast<float>(rng.gaussian());
        auto zt = forward_diffuse(z_full, t, eps, bundle.schedule);

        std::copy_n(zt.ptr(), c * h * w, z_t.ptr() + i * c * h * w);
        std::copy_n(eps.ptr(), c * h * w, target.ptr() + i * c * h * w);

        ConditioningPack pack;
        pack.tokens = item.tokens;
        pack.timestep = t;
        pack.latent_mask = latent_mask;
        pack.context_latent = z_ctx;
        if (stage2) {
            require(item.edges.has_value(), "training_step: stage-2 item lacks its edge map");
            pack.edge_map = item.edges;
        }
        packs.push_back(std::move(pack));
    }

    auto batch = assemble_batch(bundle, z_t, packs);
    Graph<float> g;
    Binding<float> bind(g, bundle.store, backprop);
    int eps_hat = denoise_forward(bind, bundle, batch);
    int loss_node = g.masked_mse(eps_hat, target, batch.latent_masks);
    double loss = g.val(loss_node).data[0];

    if (!std::isfinite(loss)) {
        std::vector<i64> indices;
        for (const auto& it : items) indices.push_back(it.source_index);
        throw training_abort("non-finite loss encountered", indices);
    }
    if (backprop) {
        g.backward(loss_node);
        bind.accumulate_grads();
    }
    return loss;
}

struct TrainLogEntry {
    i64 step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

using TrainLogSink = std::function<void(const TrainLogEntry&)>;

namespace detail {

inline i64 steps_for(const TrainConfig& cfg, i64 n_items) {
    if (cfg.max_steps > 0) return cfg.max_steps;
    i64 per_epoch = (n_items + cfg.effective_batch() - 1) / cfg.effective_batch();
    return std::max<i64>(1, cfg.epochs * per_epoch);
}

/// Shared two-stage loop: epoch-shuffled item visits, gradient accumulation,
/// clipping, cosine schedule with warmup.
inline double run_training(std::vector<TrainItem> items, DenoiserBundle& bundle,
                           const TrainConfig& cfg, const TrainLogSink& log) {
    require(!items.empty(), "training: empty training split");
    i64 total_steps = steps_for(cfg, static_cast<i64>(items.size()));
    AdamW opt(cfg.beta1, cfg.beta2, cfg.weight_decay);
    Rng rng(cfg.seed);
    auto rng_order = rng.derive("epoch_shuffle");
    auto rng_noise = rng.derive("noise");

    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();  // forces reshuffle at first use

    auto next_batch = [&](i64 count) {
        std::vector<TrainItem> batch;
        for (i64 k = 0; k < count; ++k) {
            if (cursor == order.size()) {
                for (i64 i = static_cast<i64>(order.size()) - 1; i > 0; --i) {
                    i64 j = rng_order.uniform_int(0, i);
                    std::swap(order[static_cast<std::size_t>(i)],
                              order[static_cast<std::size_t>(j)]);
                }
                cursor = 0;
            }
            batch.push_back(items[order[cursor++]]);
        }
        return batch;
    };

    double last_loss = 0.0;
    for (i64 step = 0; step < total_steps; ++step) {
        bundle.store.zero_grads();
        double loss_acc = 0.0;
        for (i64 micro = 0; micro < cfg.grad_accum; ++micro) {
            auto batch = next_batch(cfg.batch_size);
            loss_acc += training_step(batch, bundle, rng_noise);
        }
        // mean over micro-batches, both for the logged loss and the grads
        if (cfg.grad_accum > 1) {
            float inv = 1.0f / static_cast<float>(cfg.grad_accum);
            for (auto& e : bundle.store.entries()) {
                if (!e.trainable) continue;
                for (auto& gv : e.grad.data) gv *= inv;
            }
        }
        double grad_norm = clip_gradients(bundle.store, cfg.grad_clip);
        double lr = cfg.lr * lr_multiplier(step, total_steps, cfg.warmup_steps);
        opt.step(bundle.store, lr);
        last_loss = loss_acc / static_cast<double>(cfg.grad_accum);
        if (log) log({step, lr, last_loss, grad_norm});
    }
    return last_loss;
}

}  // namespace detail

/// Stage 1: inpainting fine-tuning of the denoiser. Autoencoder, text
/// encoder and schedule stay frozen.
inline double train_stage1(std::vector<TrainItem> items, DenoiserBundle& bundle,
                           const TrainConfig& cfg, const TrainLogSink& log = nullptr) {
    require(cfg.stage == StageTag::stage1, "train_stage1: config stage mismatch");
    bundle.store.set_trainable_by_prefix("text.", false);
    bundle.store.set_trainable_by_prefix("unet.", true);
    bundle.store.set_trainable_by_prefix("control.", false);
    bundle.freeze = {true, true, false, true};
    bundle.stage = StageTag::stage1;
    for (auto& it : items) it.edges.reset();  // stage 1 trains without conditions
    return detail::run_training(std::move(items), bundle, cfg, log);
}

/// Stage 2: control-branch training over a frozen backbone. Every item must
/// carry its Canny edge map.
inline double train_stage2(std::vector<TrainItem> items, DenoiserBundle& bundle,
                           const TrainConfig& cfg, const TrainLogSink& log = nullptr) {
    require(cfg.stage == StageTag::stage2, "train_stage2: config stage mismatch");
    require(bundle.stage != StageTag::none, "train_stage2: needs a stage-1 checkpoint");
    for (const auto& it : items)
        require(it.edges.has_value(), "train_stage2: missing edge cache for an item");
    if (!bundle.control.has_value()) bundle.attach_control(cfg.seed);
    bundle.store.set_trainable_by_prefix("text.", false);
    bundle.store.set_trainable_by_prefix("unet.", false);
    bundle.store.set_trainable_by_prefix("control.", true);
    bundle.freeze = {true, true, true, false};
    bundle.stage = StageTag::stage2;
    return detail::run_training(std::move(items), bundle, cfg, log);
}

}  // namespace phr
