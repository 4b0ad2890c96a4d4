#pragma once

#include <optional>
#include <string>
#include <vector>

#include "phr/nn.hpp"
#include "phr/prompts.hpp"

namespace phr {

/// Denoiser hyper-parameters. Two resolutions (base and 2x base width) with
/// one cross-attention block at the middle. `in_channels` covers the noisy
/// latent plus the latent mask plus the masked-context latent.
struct UNetConfig {
    i64 in_channels = 3;
    i64 out_channels = 1;
    i64 base_width = 32;
    i64 txt_dim = 64;
    i64 time_dim = 64;
    i64 gn_groups = 8;

    i64 width(int level) const { return level == 0 ? base_width : base_width * 2; }
};

/// Residual block: GN -> SiLU -> 3x3 conv with the time embedding applied as
/// a per-channel scale and shift on the conv output, plus identity (or 1x1)
/// skip.
template <class T>
struct ResBlock {
    GroupNormLayer<T> norm;
    Conv2dLayer<T> conv;
    LinearLayer<T> temb_scale, temb_shift;
    Conv2dLayer<T> skip;
    bool projected_skip = false;
    i64 cout = 0;

    static ResBlock init(ParamStore<T>& s, const std::string& name, i64 cin, i64 cout,
                         i64 time_dim, i64 groups, Rng& rng) {
        ResBlock b;
        b.cout = cout;
        b.norm = GroupNormLayer<T>::init(s, name + ".norm", cin, groups);
        b.conv = Conv2dLayer<T>::init(s, name + ".conv", cin, cout, 3, rng);
        b.temb_scale = LinearLayer<T>::init(s, name + ".temb_scale", time_dim, cout, rng);
        b.temb_shift = LinearLayer<T>::init(s, name + ".temb_shift", time_dim, cout, rng);
        if (cin != cout) {
            b.projected_skip = true;
            b.skip = Conv2dLayer<T>::init(s, name + ".skip", cin, cout, 1, rng, 1, 0);
        }
        return b;
    }

    /// temb is a {N,1,time_dim} node.
    int forward(Binding<T>& bind, int x, int temb) const {
        auto& g = bind.graph();
        int h = conv.forward(bind, g.silu(norm.forward(bind, x)));
        int ts = temb_scale.forward(bind, g.silu(temb));  // {N,1,cout}
        int tb = temb_shift.forward(bind, g.silu(temb));
        i64 n = g.val(ts).dim(0);
        h = g.film_channel(h, g.reshape(ts, {n, cout}), g.reshape(tb, {n, cout}));
        int sk = projected_skip ? skip.forward(bind, x) : x;
        return g.add(h, sk);
    }
};

/// Text -> spatial cross-attention with a residual connection.
template <class T>
struct CrossAttention {
    GroupNormLayer<T> norm;
    LinearLayer<T> wq, wk, wv, wo;

    static CrossAttention init(ParamStore<T>& s, const std::string& name, i64 channels,
                               i64 txt_dim, i64 groups, Rng& rng) {
        CrossAttention a;
        a.norm = GroupNormLayer<T>::init(s, name + ".norm", channels, groups);
        a.wq = LinearLayer<T>::init(s, name + ".wq", channels, channels, rng, false);
        a.wk = LinearLayer<T>::init(s, name + ".wk", txt_dim, channels, rng, false);
        a.wv = LinearLayer<T>::init(s, name + ".wv", txt_dim, channels, rng, false);
        a.wo = LinearLayer<T>::init(s, name + ".wo", channels, channels, rng, true);
        return a;
    }

    /// txt_lengths: real token counts, so padding is masked out of the
    /// attention weights.
    int forward(Binding<T>& bind, int x, int txt, const std::vector<i64>& txt_lengths) const {
        auto& g = bind.graph();
        i64 h = g.val(x).dim(2), w = g.val(x).dim(3);
        int seq = g.spatial_to_seq(norm.forward(bind, x));
        int q = wq.forward(bind, seq);
        int k = wk.forward(bind, txt);
        int v = wv.forward(bind, txt);
        int p = g.softmax_last(g.add_key_mask(g.scaled_scores(q, k), txt_lengths));
        int o = wo.forward(bind, g.attend(p, v));
        return g.add(x, g.seq_to_spatial(o, h, w));
    }
};

/// Encoder + middle trunk. The control branch instantiates the same
/// structure with its own parameters.
template <class T>
struct UNetEncoder {
    Conv2dLayer<T> conv_in;
    ResBlock<T> enc0;
    Conv2dLayer<T> down;
    ResBlock<T> enc1;
    ResBlock<T> mid;
    CrossAttention<T> mid_attn;

    struct Feats {
        int e0 = -1, e1 = -1, mid = -1;
    };

    static UNetEncoder init(ParamStore<T>& s, const std::string& p, const UNetConfig& cfg,
                            Rng& rng) {
        UNetEncoder e;
        i64 b = cfg.base_width;
        e.conv_in = Conv2dLayer<T>::init(s, p + ".conv_in", cfg.in_channels, b, 3, rng);
        e.enc0 = ResBlock<T>::init(s, p + ".enc0", b, b, cfg.time_dim, cfg.gn_groups, rng);
        e.down = Conv2dLayer<T>::init(s, p + ".down", b, 2 * b, 3, rng, 2, 1);
        e.enc1 = ResBlock<T>::init(s, p + ".enc1", 2 * b, 2 * b, cfg.time_dim, cfg.gn_groups, rng);
        e.mid = ResBlock<T>::init(s, p + ".mid", 2 * b, 2 * b, cfg.time_dim, cfg.gn_groups, rng);
        e.mid_attn =
            CrossAttention<T>::init(s, p + ".mid_attn", 2 * b, cfg.txt_dim, cfg.gn_groups, rng);
        return e;
    }

    Feats encode(Binding<T>& bind, int x, int temb, int txt,
                 const std::vector<i64>& txt_lengths) const {
        Feats f;
        int h = conv_in.forward(bind, x);
        f.e0 = enc0.forward(bind, h, temb);
        int d = down.forward(bind, f.e0);
        f.e1 = enc1.forward(bind, d, temb);
        int m = mid.forward(bind, f.e1, temb);
        f.mid = mid_attn.forward(bind, m, txt, txt_lengths);
        return f;
    }
};

/// Two-resolution denoising U-Net. The decoder consumes the middle feature
/// plus two skip connections; those three tensors are also the control
/// branch's injection sites.
template <class T>
class UNet {
public:
    UNetConfig cfg;
    UNetEncoder<T> encoder;
    LinearLayer<T> time_lin1, time_lin2, text_pool;
    ResBlock<T> dec1;
    Conv2dLayer<T> up_conv;
    ResBlock<T> dec0;
    GroupNormLayer<T> out_norm;
    Conv2dLayer<T> conv_out;

    using Feats = typename UNetEncoder<T>::Feats;

    static UNet init(ParamStore<T>& s, const UNetConfig& cfg, Rng& rng,
                     const std::string& prefix = "unet") {
        UNet u;
        u.cfg = cfg;
        i64 b = cfg.base_width;
        u.encoder = UNetEncoder<T>::init(s, prefix, cfg, rng);
        u.time_lin1 = LinearLayer<T>::init(s, prefix + ".time1", cfg.time_dim, cfg.time_dim, rng);
        u.time_lin2 = LinearLayer<T>::init(s, prefix + ".time2", cfg.time_dim, cfg.time_dim, rng);
        // pooled-prompt path gets a large gain so the class signal is not
        // drowned by the O(1) sinusoidal time components
        u.text_pool = LinearLayer<T>::init(s, prefix + ".text_pool", cfg.txt_dim, cfg.time_dim,
                                           rng, true, 8.0);
        u.dec1 = ResBlock<T>::init(s, prefix + ".dec1", 4 * b, 2 * b, cfg.time_dim, cfg.gn_groups,
                                   rng);
        u.up_conv = Conv2dLayer<T>::init(s, prefix + ".up", 2 * b, b, 3, rng);
        u.dec0 = ResBlock<T>::init(s, prefix + ".dec0", 2 * b, b, cfg.time_dim, cfg.gn_groups, rng);
        u.out_norm = GroupNormLayer<T>::init(s, prefix + ".out_norm", b, cfg.gn_groups);
        u.conv_out = Conv2dLayer<T>::init(s, prefix + ".conv_out", b, cfg.out_channels, 3, rng);
        return u;
    }

    /// Sinusoidal encoding -> two-layer MLP; returns a {N,1,time_dim} node.
    int time_embed(Binding<T>& bind, const std::vector<i64>& timesteps) const {
        auto& g = bind.graph();
        auto sin = sinusoidal_embedding<T>(timesteps, cfg.time_dim);
        i64 n = sin.dim(0);
        int t = g.leaf(sin.reshaped({n, 1, cfg.time_dim}), false);
        t = time_lin1.forward(bind, t);
        t = time_lin2.forward(bind, g.silu(t));
        return t;
    }

    /// Joint conditioning vector: time embedding plus a projection of the
    /// mean prompt embedding, so every block's modulation sees the prompt.
    int condition(Binding<T>& bind, const std::vector<i64>& timesteps, int txt,
                  const std::vector<i64>& txt_lengths) const {
        auto& g = bind.graph();
        int t = time_embed(bind, timesteps);
        int pooled = g.seq_mean(txt, txt_lengths);
        return g.add(t, text_pool.forward(bind, pooled));
    }

    /// Full denoiser pass. `injected` adds control features to the decoder
    /// inputs (middle + both skips) and changes nothing else.
    int forward(Binding<T>& bind, int x, int temb, int txt,
                const std::vector<i64>& txt_lengths, const Feats* injected = nullptr) const {
        auto& g = bind.graph();
        Feats f = encoder.encode(bind, x, temb, txt, txt_lengths);
        if (injected) f = inject(g, f, *injected);
        int d1 = dec1.forward(bind, g.concat_channels(f.mid, f.e1), temb);
        int u = up_conv.forward(bind, g.upsample2x(d1));
        int d0 = dec0.forward(bind, g.concat_channels(u, f.e0), temb);
        return conv_out.forward(bind, g.silu(out_norm.forward(bind, d0)));
    }

    /// Element-wise addition of one feature per injection site; the decoder
    /// is not modified in any other way.
    static Feats inject(Graph<T>& g, const Feats& decoder_inputs, const Feats& features) {
        Feats out;
        out.mid = g.add(decoder_inputs.mid, features.mid);
        out.e1 = g.add(decoder_inputs.e1, features.e1);
        out.e0 = g.add(decoder_inputs.e0, features.e0);
        return out;
    }
};

/// Frozen embedding-table text encoder over the template vocabulary. Fulfils
/// the embedding-sequence contract a CLIP-class encoder plugs into at scale.
/// When the vocabulary fits the embedding width, tokens get orthonormal
/// directions so distinct words stay separable downstream; otherwise the
/// table falls back to random vectors.
template <class T>
class TextEncoder {
public:
    int table = -1;
    i64 txt_dim = 0;

    static TextEncoder init(ParamStore<T>& s, i64 vocab_size, i64 txt_dim, Rng& rng) {
        TextEncoder e;
        e.txt_dim = txt_dim;
        Tensor<T> table;
        if (vocab_size <= txt_dim) {
            table = Tensor<T>({vocab_size, txt_dim});
            for (i64 v = 0; v < vocab_size; ++v)
                table.data[static_cast<std::size_t>(v * txt_dim + v)] = T(1);
        } else {
            table = Tensor<T>::randn({vocab_size, txt_dim}, rng,
                                     1.0 / std::sqrt(static_cast<double>(txt_dim)));
        }
        e.table = s.add("text.table", std::move(table), /*trainable=*/false);
        return e;
    }

    /// tokens: N sequences of exactly 77 ids -> {N,77,txt_dim}
    int encode(Binding<T>& bind, const std::vector<TokenSequence>& tokens) const {
        std::vector<i64> ids;
        ids.reserve(tokens.size() * TokenSequence::kLength);
        for (const auto& t : tokens) {
            require(static_cast<i64>(t.ids.size()) == TokenSequence::kLength,
                    "text encoder: token sequence must be length 77");
            for (int id : t.ids) ids.push_back(id);
        }
        return bind.graph().embedding(bind.node(table), ids, static_cast<i64>(tokens.size()),
                                      TokenSequence::kLength);
    }
};

/// Trainable copy of the backbone encoder + middle that consumes the edge
/// map through a small adapter and returns one zero-projected feature per
/// injection site.
template <class T>
class ControlBranch {
public:
    UNetEncoder<T> encoder;
    Conv2dLayer<T> adapt1, adapt2, adapt3;
    Conv2dLayer<T> zc_e0, zc_e1, zc_mid;
    UNetConfig cfg;

    static constexpr int kInjectionSites = 3;  // two decoder skips + middle

    /// Deep-copies the backbone trunk parameters ("unet.X" -> "control.X"),
    /// zero-initializes every projection, and leaves the backbone untouched.
    static ControlBranch init_from_backbone(ParamStore<T>& s, const UNet<T>& backbone, Rng& rng,
                                            i64 downscale_factor = 1) {
        require(downscale_factor == 1 || downscale_factor == 2 || downscale_factor == 4 ||
                    downscale_factor == 8,
                "control branch: unsupported autoencoder downscale factor");
        ControlBranch c;
        c.cfg = backbone.cfg;
        i64 b = c.cfg.base_width;
        c.encoder = UNetEncoder<T>::init(s, "control", c.cfg, rng);

        // copy trunk weights from the backbone
        for (auto& e : s.entries()) {
            if (e.name.rfind("control.", 0) != 0) continue;
            std::string src_name = "unet." + e.name.substr(8);
            int src = s.find(src_name);
            if (src < 0) continue;
            const auto& src_e = s.at(src);
            require(src_e.value.shape == e.value.shape,
                    "control branch: architecture mismatch with backbone at " + e.name);
            e.value = src_e.value;
        }

        i64 aw = std::min<i64>(8, b);
        i64 s1 = downscale_factor >= 2 ? 2 : 1;
        i64 s2 = downscale_factor >= 4 ? 2 : 1;
        i64 s3 = downscale_factor >= 8 ? 2 : 1;
        c.adapt1 = Conv2dLayer<T>::init(s, "control.adapter1", 1, aw, 3, rng, s1, 1);
        c.adapt2 = Conv2dLayer<T>::init(s, "control.adapter2", aw, aw, 3, rng, s2, 1);
        c.adapt3 = Conv2dLayer<T>::init(s, "control.adapter3", aw, c.cfg.in_channels, 3, rng, s3,
                                        1, /*zero_init=*/true);
        c.zc_e0 = Conv2dLayer<T>::init(s, "control.zc_e0", b, b, 1, rng, 1, 0, true);
        c.zc_e1 = Conv2dLayer<T>::init(s, "control.zc_e1", 2 * b, 2 * b, 1, rng, 1, 0, true);
        c.zc_mid = Conv2dLayer<T>::init(s, "control.zc_mid", 2 * b, 2 * b, 1, rng, 1, 0, true);
        return c;
    }

    /// edge: {N,1,Hpix,Wpix} leaf; x: the denoiser input node. Returns one
    /// feature per injection site, already zero-projected.
    typename UNetEncoder<T>::Feats control_features(Binding<T>& bind, int edge, int x, int temb,
                                                    int txt,
                                                    const std::vector<i64>& txt_lengths) const {
        auto& g = bind.graph();
        int a = adapt1.forward(bind, edge);
        a = adapt2.forward(bind, g.silu(a));
        a = adapt3.forward(bind, g.silu(a));
        require(g.val(a).shape == g.val(x).shape,
                "control branch: adapter output does not match latent dims");
        int xin = g.add(x, a);
        auto f = encoder.encode(bind, xin, temb, txt, txt_lengths);
        typename UNetEncoder<T>::Feats out;
        out.e0 = zc_e0.forward(bind, f.e0);
        out.e1 = zc_e1.forward(bind, f.e1);
        out.mid = zc_mid.forward(bind, f.mid);
        return out;
    }

};

}  // namespace phr
