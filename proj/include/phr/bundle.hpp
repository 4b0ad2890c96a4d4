#pragma once

#include <optional>
#include <string>
#include <vector>

#include "phr/edges.hpp"
#include "phr/prompts.hpp"
#include "phr/schedule.hpp"
#include "phr/unet.hpp"

namespace phr {

enum class StageTag { none, stage1, stage2 };

inline const char* to_string(StageTag s) {
    switch (s) {
        case StageTag::stage1: return "stage1";
        case StageTag::stage2: return "stage2";
        default: return "none";
    }
}

inline StageTag stage_from_string(const std::string& s) {
    if (s == "stage1") return StageTag::stage1;
    if (s == "stage2") return StageTag::stage2;
    return StageTag::none;
}

enum class AutoencoderKind { identity, external_sd };

/// Per-component freeze switches. Frozen components never receive updates.
struct FreezeFlags {
    bool autoencoder = true;
    bool text_encoder = true;
    bool denoiser = false;
    bool control = false;
};

/// Everything needed to rebuild the parameter layout deterministically.
struct BundleConfig {
    UNetConfig unet;
    i64 T = 1000;
    ScheduleKind schedule_kind = ScheduleKind::linear_beta;
    AutoencoderKind autoencoder = AutoencoderKind::identity;
    i64 latent_channels = 1;
    i64 downscale_factor = 1;  // autoencoder spatial factor f
    i64 vocab_size = 45;
    u64 init_seed = 0;
};

/// Conditioning for one training or inference step.
struct ConditioningPack {
    TokenSequence tokens;
    i64 timestep = 1;
    MaskU8 latent_mask;                          // latent resolution
    std::optional<MaskU8> edge_map;              // pixel resolution, binary
    std::optional<Tensor<float>> context_latent; // {C,h,w} masked-image latent
};

/// Autoencoder + text encoder + denoiser + optional control branch.
/// The desk autoencoder is the identity (f=1, single channel); the
/// external_sd kind declares SD-compatible dims behind the same calls and
/// rejects use until real weights are plugged in.
class DenoiserBundle {
public:
    BundleConfig cfg;
    ParamStore<float> store;
    UNet<float> unet;
    TextEncoder<float> text;
    std::optional<ControlBranch<float>> control;
    NoiseSchedule schedule;
    FreezeFlags freeze;
    StageTag stage = StageTag::none;

    static DenoiserBundle build(const BundleConfig& cfg) {
        require(cfg.unet.in_channels == 2 * cfg.latent_channels + 1,
                "bundle: denoiser input must be latent + mask + context channels");
        DenoiserBundle b;
        b.cfg = cfg;
        Rng rng(cfg.init_seed);
        auto rng_unet = rng.derive("unet_init");
        auto rng_text = rng.derive("text_init");
        b.unet = UNet<float>::init(b.store, cfg.unet, rng_unet);
        b.text = TextEncoder<float>::init(b.store, cfg.vocab_size, cfg.unet.txt_dim, rng_text);
        b.schedule = make_schedule(cfg.T, cfg.schedule_kind);
        b.store.set_trainable_by_prefix("text.", false);
        return b;
    }

    void attach_control(u64 seed) {
        require(!control.has_value(), "bundle: control branch already attached");
        Rng rng(seed);
        auto r = rng.derive("control_init");
        control = ControlBranch<float>::init_from_backbone(store, unet, r,
                                                           cfg.downscale_factor);
    }

    bool is_external() const { return cfg.autoencoder == AutoencoderKind::external_sd; }

    /// image {H,W} -> latent {C,h,w}
    Tensor<float> encode_image(const ImageF& image) const {
        require(!is_external(),
                "paper-scale autoencoder weights are not bundled; plug an external codec");
        require(image.rank() == 2, "encode_image: expected 2-D image");
        return image.reshaped({1, image.dim(0), image.dim(1)});
    }

    /// latent {C,h,w} -> image {H,W}
    ImageF decode_latent(const Tensor<float>& z) const {
        require(!is_external(),
                "paper-scale autoencoder weights are not bundled; plug an external codec");
        require(z.rank() == 3 && z.dim(0) == 1, "decode_latent: expected {1,h,w}");
        return z.reshaped({z.dim(1), z.dim(2)});
    }
};

/// Plain tensors assembled for one denoiser forward pass.
struct DenoiseBatch {
    Tensor<float> x;  // {N, 2C+1, h, w}
    std::vector<i64> timesteps;
    std::vector<TokenSequence> tokens;
    std::optional<Tensor<float>> edges;  // {N,1,H,W}
    MaskU8 latent_masks;                 // {N,1,h,w}, for the loss
};

inline DenoiseBatch assemble_batch(const DenoiserBundle& bundle, const Tensor<float>& z_t,
                                   const std::vector<ConditioningPack>& packs) {
    require(z_t.rank() == 4, "assemble_batch: z_t must be {N,C,h,w}");
    i64 n = z_t.dim(0), c = z_t.dim(1), h = z_t.dim(2), w = z_t.dim(3);
    require(static_cast<i64>(packs.size()) == n, "assemble_batch: pack count mismatch");
    require(c == bundle.cfg.latent_channels, "assemble_batch: latent channel mismatch");

    DenoiseBatch batch;
    batch.x = Tensor<float>({n, 2 * c + 1, h, w});
    batch.latent_masks = MaskU8({n, 1, h, w});
    bool any_edges = false;
    for (const auto& p : packs)
        if (p.edge_map.has_value()) any_edges = true;
    if (any_edges) {
        require(bundle.control.has_value(),
                "edge map provided but no control branch is attached");
        i64 f = bundle.cfg.downscale_factor;
        batch.edges = Tensor<float>({n, 1, h * f, w * f});
    }

    for (i64 i = 0; i < n; ++i) {
        const auto& p = packs[static_cast<std::size_t>(i)];
        require(p.timestep >= 1 && p.timestep <= bundle.schedule.T,
                "assemble_batch: timestep out of range");
        batch.timesteps.push_back(p.timestep);
        batch.tokens.push_back(p.tokens);

        // channels [0,c): noisy latent
        std::copy_n(z_t.ptr() + i * c * h * w, c * h * w,
                    batch.x.ptr() + i * (2 * c + 1) * h * w);
        // channel c: latent mask
        if (p.latent_mask.numel() > 0) {
            require(p.latent_mask.shape == std::vector<i64>{h, w},
                    "assemble_batch: latent mask dims must match latent dims");
            float* dst = batch.x.ptr() + (i * (2 * c + 1) + c) * h * w;
            for (i64 j = 0; j < h * w; ++j)
                dst[j] = p.latent_mask.data[static_cast<std::size_t>(j)] ? 1.0f : 0.0f;
            std::copy_n(p.latent_mask.ptr(), h * w,
                        batch.latent_masks.ptr() + i * h * w);
        }
        // channels [c+1, 2c+1): masked-context latent
        if (p.context_latent.has_value()) {
            require(p.context_latent->shape == std::vector<i64>{c, h, w},
                    "assemble_batch: context latent dims");
            std::copy_n(p.context_latent->ptr(), c * h * w,
                        batch.x.ptr() + (i * (2 * c + 1) + c + 1) * h * w);
        }
        if (batch.edges.has_value()) {
            require(p.edge_map.has_value(), "assemble_batch: mixed edge availability in batch");
            i64 hp = batch.edges->dim(2), wp = batch.edges->dim(3);
            require(p.edge_map->shape == std::vector<i64>{hp, wp},
                    "assemble_batch: edge map dims must match pixel dims");
            float* dst = batch.edges->ptr() + i * hp * wp;
            for (i64 j = 0; j < hp * wp; ++j)
                dst[j] = p.edge_map->data[static_cast<std::size_t>(j)] ? 1.0f : 0.0f;
        }
    }
    return batch;
}

inline std::vector<i64> token_lengths(const std::vector<TokenSequence>& tokens) {
    std::vector<i64> lengths;
    lengths.reserve(tokens.size());
    for (const auto& t : tokens) {
        i64 len = 0;
        for (int id : t.ids) {
            if (id == t.pad_id) break;
            ++len;
        }
        lengths.push_back(std::max<i64>(1, len));
    }
    return lengths;
}

/// Shared forward pass: text + time conditioning, optional control-feature
/// injection. Returns the predicted-noise node.
inline int denoise_forward(Binding<float>& bind, const DenoiserBundle& bundle,
                           const DenoiseBatch& batch) {
    auto& g = bind.graph();
    int x = g.leaf(batch.x, false);
    int txt = bundle.text.encode(bind, batch.tokens);
    auto lengths = token_lengths(batch.tokens);
    int cond = bundle.unet.condition(bind, batch.timesteps, txt, lengths);

    const UNetEncoder<float>::Feats* inject = nullptr;
    UNetEncoder<float>::Feats feats;
    if (batch.edges.has_value()) {
        int edge = g.leaf(*batch.edges, false);
        feats = bundle.control->control_features(bind, edge, x, cond, txt, lengths);
        inject = &feats;
    }
    return bundle.unet.forward(bind, x, cond, txt, lengths, inject);
}

/// Inference-path denoiser call: no gradients, returns eps_hat {N,C,h,w}.
inline Tensor<float> predict_noise(DenoiserBundle& bundle, const Tensor<float>& z_t,
                                   const std::vector<ConditioningPack>& packs) {
    auto batch = assemble_batch(bundle, z_t, packs);
    Graph<float> g;
    Binding<float> bind(g, bundle.store, /*training=*/false);
    int out = denoise_forward(bind, bundle, batch);
    return g.val(out);
}

}  // namespace phr
