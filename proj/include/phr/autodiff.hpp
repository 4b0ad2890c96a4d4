#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "phr/common.hpp"
#include "phr/gemm.hpp"
#include "phr/parallel.hpp"
#include "phr/tensor.hpp"

namespace phr {

/// Reverse-mode tape over dense tensors. A graph is built per forward pass;
/// nodes are created in topological order so backward() is a reverse sweep.
/// Templated on the scalar type: training runs in float, the finite-difference
/// gradient oracle instantiates double.
template <class T>
class Graph {
public:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;
        bool needs_grad = false;
        std::function<void(Graph&)> back;
    };

    std::vector<Node> nodes;

    int leaf(Tensor<T> v, bool needs_grad) {
        Node n;
        n.val = std::move(v);
        n.needs_grad = needs_grad;
        nodes.push_back(std::move(n));
        return static_cast<int>(nodes.size()) - 1;
    }

    Tensor<T>& val(int id) { return nodes[static_cast<std::size_t>(id)].val; }
    const Tensor<T>& val(int id) const { return nodes[static_cast<std::size_t>(id)].val; }
    Tensor<T>& grad(int id) { return nodes[static_cast<std::size_t>(id)].grad; }
    bool needs_grad(int id) const { return nodes[static_cast<std::size_t>(id)].needs_grad; }

    /// Seeds d(loss)=1 and propagates through the tape in reverse order.
    /// Gradient buffers exist only for nodes on a trainable path.
    void backward(int loss_id) {
        require(val(loss_id).numel() == 1, "backward: loss must be scalar");
        for (auto& n : nodes) {
            if (n.needs_grad) n.grad = Tensor<T>(n.val.shape);
        }
        require(needs_grad(loss_id), "backward: loss does not depend on trainable leaves");
        grad(loss_id).data[0] = T(1);
        for (int i = static_cast<int>(nodes.size()) - 1; i >= 0; --i) {
            auto& n = nodes[static_cast<std::size_t>(i)];
            if (n.back && n.needs_grad) n.back(*this);
        }
    }

    // ---- ops ----------------------------------------------------------

    int add(int a, int b) {
        require(val(a).same_shape(val(b)), "add: shape mismatch");
        Tensor<T> out(val(a).shape);
        const auto& av = val(a).data;
        const auto& bv = val(b).data;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av[i] + bv[i];
        int id = make_node(std::move(out), {a, b});
        nodes.back().back = [id, a, b](Graph& g) {
            const auto& d = g.grad(id).data;
            if (g.needs_grad(a)) {
                auto& da = g.grad(a).data;
                for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i];
            }
            if (g.needs_grad(b)) {
                auto& db = g.grad(b).data;
                for (std::size_t i = 0; i < d.size(); ++i) db[i] += d[i];
            }
        };
        return id;
    }

    int scale(int a, double s) {
        Tensor<T> out(val(a).shape);
        const auto& av = val(a).data;
        T sc = static_cast<T>(s);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av[i] * sc;
        int id = make_node(std::move(out), {a});
        nodes.back().back = [id, a, sc](Graph& g) {
            if (!g.needs_grad(a)) return;
            const auto& d = g.grad(id).data;
            auto& da = g.grad(a).data;
            for (std::size_t i = 0; i < d.size(); ++i) da[i] += sc * d[i];
        };
        return id;
    }

    int reshape(int a, std::vector<i64> shape) {
        Tensor<T> out = val(a).reshaped(std::move(shape));
        int id = make_node(std::move(out), {a});
        nodes.back().back = [id, a](Graph& g) {
            if (!g.needs_grad(a)) return;
            const auto& d = g.grad(id).data;
            auto& da = g.grad(a).data;
            for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i];
        };
        return id;
    }

    int silu(int a) {
        Tensor<T> out(val(a).shape);
        const auto& av = val(a).data;
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            T s = sigmoid(av[i]);
            out.data[i] = av[i] * s;
        }
        int id = make_node(std::move(out), {a});
        nodes.back().back = [id, a](Graph& g) {
            if (!g.needs_grad(a)) return;
            const auto& d = g.grad(id).data;
            const auto& x = g.val(a).data;
            auto& da = g.grad(a).data;
            for (std::size_t i = 0; i < d.size(); ++i) {
                T s = sigmoid(x[i]);
                da[i] += d[i] * (s + x[i] * s * (T(1) - s));
            }
        };
        return id;
    }

    /// 2-D convolution, NCHW layout, square kernel, zero padding.
    int conv2d(int x, int w, int b, i64 stride, i64 pad) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        require(xv.rank() == 4 && wv.rank() == 4, "conv2d: rank");
        i64 N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        i64 Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
        require(wv.dim(1) == Cin, "conv2d: channel mismatch");
        i64 Ho = (H + 2 * pad - kh) / stride + 1;
        i64 Wo = (W + 2 * pad - kw) / stride + 1;
        i64 K = Cin * kh * kw;

        Tensor<T> out({N, Cout, Ho, Wo});
        std::vector<T> col(static_cast<std::size_t>(K * Ho * Wo));
        for (i64 n = 0; n < N; ++n) {
            im2col(xv, n, kh, kw, stride, pad, Ho, Wo, col.data());
            gemm_nn(Cout, Ho * Wo, K, wv.ptr(), col.data(),
                    out.ptr() + n * Cout * Ho * Wo, false);
        }
        if (b >= 0) {
            const auto& bv = val(b);
            require(bv.numel() == Cout, "conv2d: bias size");
            parallel_for(N * Cout, [&](i64 nc) {
                T bias = bv.data[static_cast<std::size_t>(nc % Cout)];
                T* p = out.ptr() + nc * Ho * Wo;
                for (i64 i = 0; i < Ho * Wo; ++i) p[i] += bias;
            });
        }
        std::vector<int> parents = {x, w};
        if (b >= 0) parents.push_back(b);
        int id = make_node(std::move(out), parents);
        nodes.back().back = [id, x, w, b, stride, pad, kh, kw, Ho, Wo](Graph& g) {
            const auto& dy = g.grad(id);
            const auto& xv2 = g.val(x);
            const auto& wv2 = g.val(w);
            i64 N2 = xv2.dim(0), Cin2 = xv2.dim(1);
            i64 Cout2 = wv2.dim(0);
            i64 K2 = Cin2 * kh * kw;
            if (b >= 0 && g.needs_grad(b)) {
                auto& db = g.grad(b).data;
                for (i64 n = 0; n < N2; ++n)
                    for (i64 c = 0; c < Cout2; ++c) {
                        const T* p = dy.ptr() + (n * Cout2 + c) * Ho * Wo;
                        T acc = T(0);
                        for (i64 i = 0; i < Ho * Wo; ++i) acc += p[i];
                        db[static_cast<std::size_t>(c)] += acc;
                    }
            }
            bool want_x = g.needs_grad(x);
            bool want_w = g.needs_grad(w);
            if (!want_x && !want_w) return;
            std::vector<T> col(static_cast<std::size_t>(K2 * Ho * Wo));
            std::vector<T> dcol(static_cast<std::size_t>(K2 * Ho * Wo));
            for (i64 n = 0; n < N2; ++n) {
                const T* dyn = dy.ptr() + n * Cout2 * Ho * Wo;
                if (want_w) {
                    im2col(xv2, n, kh, kw, stride, pad, Ho, Wo, col.data());
                    gemm_nt(Cout2, K2, Ho * Wo, dyn, col.data(), g.grad(w).ptr(), true);
                }
                if (want_x) {
                    gemm_tn(K2, Ho * Wo, Cout2, wv2.ptr(), dyn, dcol.data(), false);
                    col2im_add(g.grad(x), n, kh, kw, stride, pad, Ho, Wo, dcol.data());
                }
            }
        };
        return id;
    }

    /// Nearest-neighbor 2x spatial upsample.
    int upsample2x(int x) {
        const auto& xv = val(x);
        i64 N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        Tensor<T> out({N, C, H * 2, W * 2});
        parallel_for(N * C, [&](i64 nc) {
            const T* src = xv.ptr() + nc * H * W;
            T* dst = out.ptr() + nc * 4 * H * W;
            for (i64 r = 0; r < 2 * H; ++r)
                for (i64 c = 0; c < 2 * W; ++c)
                    dst[r * 2 * W + c] = src[(r / 2) * W + (c / 2)];
        });
        int id = make_node(std::move(out), {x});
        nodes.back().back = [id, x, H, W](Graph& g) {
            if (!g.needs_grad(x)) return;
            const auto& d = g.grad(id);
            auto& dx = g.grad(x);
            i64 NC = d.dim(0) * d.dim(1);
            parallel_for(NC, [&](i64 nc) {
                const T* src = d.ptr() + nc * 4 * H * W;
                T* dst = dx.ptr() + nc * H * W;
                for (i64 r = 0; r < 2 * H; ++r)
                    for (i64 c = 0; c < 2 * W; ++c)
                        dst[(r / 2) * W + (c / 2)] += src[r * 2 * W + c];
            });
        };
        return id;
    }

    int concat_channels(int a, int b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        require(av.rank() == 4 && bv.rank() == 4, "concat: rank");
        require(av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
                "concat: shape mismatch");
        i64 N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
        Tensor<T> out({N, Ca + Cb, H, W});
        i64 plane = H * W;
        for (i64 n = 0; n < N; ++n) {
            std::copy_n(av.ptr() + n * Ca * plane, Ca * plane, out.ptr() + n * (Ca + Cb) * plane);
            std::copy_n(bv.ptr() + n * Cb * plane, Cb * plane,
                        out.ptr() + (n * (Ca + Cb) + Ca) * plane);
        }
        int id = make_node(std::move(out), {a, b});
        nodes.back().back = [id, a, b, Ca, Cb, plane](Graph& g) {
            const auto& d = g.grad(id);
            i64 N2 = d.dim(0);
            if (g.needs_grad(a)) {
                auto& da = g.grad(a);
                for (i64 n = 0; n < N2; ++n) {
                    const T* src = d.ptr() + n * (Ca + Cb) * plane;
                    T* dst = da.ptr() + n * Ca * plane;
                    for (i64 i = 0; i < Ca * plane; ++i) dst[i] += src[i];
                }
            }
            if (g.needs_grad(b)) {
                auto& db = g.grad(b);
                for (i64 n = 0; n < N2; ++n) {
                    const T* src = d.ptr() + (n * (Ca + Cb) + Ca) * plane;
                    T* dst = db.ptr() + n * Cb * plane;
                    for (i64 i = 0; i < Cb * plane; ++i) dst[i] += src[i];
                }
            }
        };
        return id;
    }

    /// GroupNorm with affine parameters gamma/beta of shape {C}.
    int group_norm(int x, int gamma, int beta, i64 groups, double eps = 1e-5) {
        const auto& xv = val(x);
        i64 N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        require(C % groups == 0, "group_norm: C % groups != 0");
        i64 cg = C / groups;
        i64 m = cg * H * W;
        Tensor<T> out(xv.shape);
        Tensor<T> mean({N, groups}), ivar({N, groups});
        const auto& gv = val(gamma);
        const auto& bv = val(beta);
        for (i64 n = 0; n < N; ++n)
            for (i64 g2 = 0; g2 < groups; ++g2) {
                const T* p = xv.ptr() + (n * C + g2 * cg) * H * W;
                T mu = T(0);
                for (i64 i = 0; i < m; ++i) mu += p[i];
                mu /= static_cast<T>(m);
                T var = T(0);
                for (i64 i = 0; i < m; ++i) {
                    T d = p[i] - mu;
                    var += d * d;
                }
                var /= static_cast<T>(m);
                T iv = T(1) / std::sqrt(var + static_cast<T>(eps));
                mean.at(n, g2) = mu;
                ivar.at(n, g2) = iv;
                T* q = out.ptr() + (n * C + g2 * cg) * H * W;
                for (i64 c = 0; c < cg; ++c) {
                    T ga = gv.data[static_cast<std::size_t>(g2 * cg + c)];
                    T be = bv.data[static_cast<std::size_t>(g2 * cg + c)];
                    const T* pp = p + c * H * W;
                    T* qq = q + c * H * W;
                    for (i64 i = 0; i < H * W; ++i) qq[i] = (pp[i] - mu) * iv * ga + be;
                }
            }
        int id = make_node(std::move(out), {x, gamma, beta});
        auto mean_c = std::make_shared<Tensor<T>>(std::move(mean));
        auto ivar_c = std::make_shared<Tensor<T>>(std::move(ivar));
        nodes.back().back = [id, x, gamma, beta, groups, cg, m, H, W, mean_c, ivar_c](Graph& g) {
            const auto& d = g.grad(id);
            const auto& xv2 = g.val(x);
            const auto& gv2 = g.val(gamma);
            i64 N2 = xv2.dim(0), C2 = xv2.dim(1);
            i64 plane = H * W;
            for (i64 n = 0; n < N2; ++n)
                for (i64 g2 = 0; g2 < groups; ++g2) {
                    T mu = mean_c->at(n, g2), iv = ivar_c->at(n, g2);
                    const T* xp = xv2.ptr() + (n * C2 + g2 * cg) * plane;
                    const T* dp = d.ptr() + (n * C2 + g2 * cg) * plane;
                    if (g.needs_grad(gamma) || g.needs_grad(beta)) {
                        auto& dg = g.grad(gamma).data;
                        auto& db = g.grad(beta).data;
                        for (i64 c = 0; c < cg; ++c) {
                            T sg = T(0), sb = T(0);
                            for (i64 i = 0; i < plane; ++i) {
                                T xh = (xp[c * plane + i] - mu) * iv;
                                sg += dp[c * plane + i] * xh;
                                sb += dp[c * plane + i];
                            }
                            dg[static_cast<std::size_t>(g2 * cg + c)] += sg;
                            db[static_cast<std::size_t>(g2 * cg + c)] += sb;
                        }
                    }
                    if (!g.needs_grad(x)) continue;
                    // dxhat = dy * gamma; reduce to the two group sums
                    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                    for (i64 c = 0; c < cg; ++c) {
                        T ga = gv2.data[static_cast<std::size_t>(g2 * cg + c)];
                        for (i64 i = 0; i < plane; ++i) {
                            T dxh = dp[c * plane + i] * ga;
                            T xh = (xp[c * plane + i] - mu) * iv;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh;
                        }
                    }
                    T* dxp = g.grad(x).ptr() + (n * C2 + g2 * cg) * plane;
                    T inv_m = T(1) / static_cast<T>(m);
                    for (i64 c = 0; c < cg; ++c) {
                        T ga = gv2.data[static_cast<std::size_t>(g2 * cg + c)];
                        for (i64 i = 0; i < plane; ++i) {
                            T dxh = dp[c * plane + i] * ga;
                            T xh = (xp[c * plane + i] - mu) * iv;
                            dxp[c * plane + i] +=
                                iv * (dxh - inv_m * sum_dxhat - xh * inv_m * sum_dxhat_xhat);
                        }
                    }
                }
        };
        return id;
    }

    /// {N,C,H,W} -> {N,H*W,C}
    int spatial_to_seq(int x) {
        const auto& xv = val(x);
        i64 N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        Tensor<T> out({N, H * W, C});
        for (i64 n = 0; n < N; ++n)
            for (i64 c = 0; c < C; ++c) {
                const T* src = xv.ptr() + (n * C + c) * H * W;
                for (i64 i = 0; i < H * W; ++i)
                    out.data[static_cast<std::size_t>((n * H * W + i) * C + c)] = src[i];
            }
        int id = make_node(std::move(out), {x});
        nodes.back().back = [id, x, C, H, W](Graph& g) {
            if (!g.needs_grad(x)) return;
            const auto& d = g.grad(id);
            auto& dx = g.grad(x);
            i64 N2 = dx.dim(0);
            for (i64 n = 0; n < N2; ++n)
                for (i64 c = 0; c < C; ++c) {
                    T* dst = dx.ptr() + (n * C + c) * H * W;
                    for (i64 i = 0; i < H * W; ++i)
                        dst[i] += d.data[static_cast<std::size_t>((n * H * W + i) * C + c)];
                }
        };
        return id;
    }

    /// {N,H*W,C} -> {N,C,H,W}
    int seq_to_spatial(int x, i64 H, i64 W) {
        const auto& xv = val(x);
        i64 N = xv.dim(0), C = xv.dim(2);
        require(xv.dim(1) == H * W, "seq_to_spatial: length mismatch");
        Tensor<T> out({N, C, H, W});
        for (i64 n = 0; n < N; ++n)
            for (i64 c = 0; c < C; ++c) {
                T* dst = out.ptr() + (n * C + c) * H * W;
                for (i64 i = 0; i < H * W; ++i)
                    dst[i] = xv.data[static_cast<std::size_t>((n * H * W + i) * C + c)];
            }
        int id = make_node(std::move(out), {x});
        nodes.back().back = [id, x, C, H, W](Graph& g) {
            if (!g.needs_grad(x)) return;
            const auto& d = g.grad(id);
            auto& dx = g.grad(x);
            i64 N2 = d.dim(0);
            for (i64 n = 0; n < N2; ++n)
                for (i64 c = 0; c < C; ++c) {
                    const T* src = d.ptr() + (n * C + c) * H * W;
                    for (i64 i = 0; i < H * W; ++i)
                        dx.data[static_cast<std::size_t>((n * H * W + i) * C + c)] += src[i];
                }
        };
        return id;
    }

    /// x {N,L,Din} * w {Dout,Din}^T + b {Dout} -> {N,L,Dout}
    int linear(int x, int w, int b) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        i64 N = xv.dim(0), L = xv.dim(1), Din = xv.dim(2);
        i64 Dout = wv.dim(0);
        require(wv.dim(1) == Din, "linear: dim mismatch");
        Tensor<T> out({N, L, Dout});
        for (i64 n = 0; n < N; ++n)
            gemm_nt(L, Dout, Din, xv.ptr() + n * L * Din, wv.ptr(), out.ptr() + n * L * Dout,
                    false);
        if (b >= 0) {
            const auto& bv = val(b);
            for (i64 n = 0; n < N; ++n)
                for (i64 l = 0; l < L; ++l) {
                    T* p = out.ptr() + (n * L + l) * Dout;
                    for (i64 d0 = 0; d0 < Dout; ++d0) p[d0] += bv.data[static_cast<std::size_t>(d0)];
                }
        }
        std::vector<int> parents = {x, w};
        if (b >= 0) parents.push_back(b);
        int id = make_node(std::move(out), parents);
        nodes.back().back = [id, x, w, b, L, Din, Dout](Graph& g) {
            const auto& d = g.grad(id);
            const auto& xv2 = g.val(x);
            const auto& wv2 = g.val(w);
            i64 N2 = xv2.dim(0);
            if (b >= 0 && g.needs_grad(b)) {
                auto& db = g.grad(b).data;
                for (i64 n = 0; n < N2; ++n)
                    for (i64 l = 0; l < L; ++l) {
                        const T* p = d.ptr() + (n * L + l) * Dout;
                        for (i64 d0 = 0; d0 < Dout; ++d0) db[static_cast<std::size_t>(d0)] += p[d0];
                    }
            }
            for (i64 n = 0; n < N2; ++n) {
                const T* dn = d.ptr() + n * L * Dout;
                if (g.needs_grad(x))
                    gemm_nn(L, Din, Dout, dn, wv2.ptr(), g.grad(x).ptr() + n * L * Din, true);
                if (g.needs_grad(w))
                    gemm_tn(Dout, Din, L, dn, xv2.ptr() + n * L * Din, g.grad(w).ptr(), true);
            }
        };
        return id;
    }

    /// scores {N,L,S} = q {N,L,D} . k {N,S,D}^T / sqrt(D)
    int scaled_scores(int q, int k) {
        const auto& qv = val(q);
        const auto& kv = val(k);
        i64 N = qv.dim(0), L = qv.dim(1), D = qv.dim(2), S = kv.dim(1);
        require(kv.dim(2) == D && kv.dim(0) == N, "scaled_scores: shape");
        T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(D)));
        Tensor<T> out({N, L, S});
        for (i64 n = 0; n < N; ++n)
            gemm_nt(L, S, D, qv.ptr() + n * L * D, kv.ptr() + n * S * D, out.ptr() + n * L * S,
                    false);
        for (auto& v : out.data) v *= inv_sqrt_d;
        int id = make_node(std::move(out), {q, k});
        nodes.back().back = [id, q, k, L, S, D, inv_sqrt_d](Graph& g) {
            const auto& d = g.grad(id);
            const auto& qv2 = g.val(q);
            const auto& kv2 = g.val(k);
            i64 N2 = qv2.dim(0);
            std::vector<T> ds(static_cast<std::size_t>(L * S));
            for (i64 n = 0; n < N2; ++n) {
                const T* dn = d.ptr() + n * L * S;
                for (i64 i = 0; i < L * S; ++i) ds[static_cast<std::size_t>(i)] = dn[i] * inv_sqrt_d;
                if (g.needs_grad(q))
                    gemm_nn(L, D, S, ds.data(), kv2.ptr() + n * S * D,
                            g.grad(q).ptr() + n * L * D, true);
                if (g.needs_grad(k))
                    gemm_tn(S, D, L, ds.data(), qv2.ptr() + n * L * D,
                            g.grad(k).ptr() + n * S * D, true);
            }
        };
        return id;
    }

    int softmax_last(int x) {
        const auto& xv = val(x);
        i64 rows = xv.numel() / xv.shape.back();
        i64 S = xv.shape.back();
        Tensor<T> out(xv.shape);
        for (i64 r = 0; r < rows; ++r) {
            const T* p = xv.ptr() + r * S;
            T* q = out.ptr() + r * S;
            T mx = p[0];
            for (i64 i = 1; i < S; ++i) mx = std::max(mx, p[i]);
            T sum = T(0);
            for (i64 i = 0; i < S; ++i) {
                q[i] = std::exp(p[i] - mx);
                sum += q[i];
            }
            T inv = T(1) / sum;
            for (i64 i = 0; i < S; ++i) q[i] *= inv;
        }
        int id = make_node(std::move(out), {x});
        nodes.back().back = [id, x, rows, S](Graph& g) {
            if (!g.needs_grad(x)) return;
            const auto& d = g.grad(id);
            const auto& y = g.val(id);
            auto& dx = g.grad(x);
            for (i64 r = 0; r < rows; ++r) {
                const T* dp = d.ptr() + r * S;
                const T* yp = y.ptr() + r * S;
                T* dxp = dx.ptr() + r * S;
                T dot = T(0);
                for (i64 i = 0; i < S; ++i) dot += dp[i] * yp[i];
                for (i64 i = 0; i < S; ++i) dxp[i] += yp[i] * (dp[i] - dot);
            }
        };
        return id;
    }

    /// out {N,L,D} = p {N,L,S} . v {N,S,D}
    int attend(int p, int v) {
        const auto& pv = val(p);
        const auto& vv = val(v);
        i64 N = pv.dim(0), L = pv.dim(1), S = pv.dim(2), D = vv.dim(2);
        require(vv.dim(1) == S && vv.dim(0) == N, "attend: shape");
        Tensor<T> out({N, L, D});
        for (i64 n = 0; n < N; ++n)
            gemm_nn(L, D, S, pv.ptr() + n * L * S, vv.ptr() + n * S * D, out.ptr() + n * L * D,
                    false);
        int id = make_node(std::move(out), {p, v});
        nodes.back().back = [id, p, v, L, S, D](Graph& g) {
            const auto& d = g.grad(id);
            const auto& pv2 = g.val(p);
            const auto& vv2 = g.val(v);
            i64 N2 = pv2.dim(0);
            for (i64 n = 0; n < N2; ++n) {
                const T* dn = d.ptr() + n * L * D;
                if (g.needs_grad(p))
                    gemm_nt(L, S, D, dn, vv2.ptr() + n * S * D, g.grad(p).ptr() + n * L * S, true);
                if (g.needs_grad(v))
                    gemm_tn(S, D, L, pv2.ptr() + n * L * S, dn, g.grad(v).ptr() + n * S * D, true);
            }
        };
        return id;
    }

    /// Token-id lookup: table {V,D} gathered by ids -> {N,L,D}
    int embedding(int table, const std::vector<i64>& ids, i64 N, i64 L) {
        const auto& tv = val(table);
        i64 V = tv.dim(0), D = tv.dim(1);
        require(static_cast<i64>(ids.size()) == N * L, "embedding: id count");
        Tensor<T> out({N, L, D});
        for (i64 i = 0; i < N * L; ++i) {
            i64 id0 = ids[static_cast<std::size_t>(i)];
            require(id0 >= 0 && id0 < V, "embedding: id out of range");
            std::copy_n(tv.ptr() + id0 * D, D, out.ptr() + i * D);
        }
        int id = make_node(std::move(out), {table});
        auto ids_c = std::make_shared<std::vector<i64>>(ids);
        nodes.back().back = [id, table, ids_c, D](Graph& g) {
            if (!g.needs_grad(table)) return;
            const auto& d = g.grad(id);
            auto& dt = g.grad(table);
            i64 n = static_cast<i64>(ids_c->size());
            for (i64 i = 0; i < n; ++i) {
                const T* src = d.ptr() + i * D;
                T* dst = dt.ptr() + (*ids_c)[static_cast<std::size_t>(i)] * D;
                for (i64 j = 0; j < D; ++j) dst[j] += src[j];
            }
        };
        return id;
    }

    /// x {N,C,H,W} + t {N,C} broadcast over the spatial plane.
    int add_channel_vec(int x, int t) {
        const auto& xv = val(x);
        const auto& tv = val(t);
        i64 N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        require(tv.dim(0) == N && tv.dim(1) == C, "add_channel_vec: shape");
        Tensor<T> out(xv.shape);
        parallel_for(N * C, [&](i64 nc) {
            T tval = tv.data[static_cast<std::size_t>(nc)];
            const T* src = xv.ptr() + nc * H * W;
            T* dst = out.ptr() + nc * H * W;
            for (i64 i = 0; i < H * W; ++i) dst[i] = src[i] + tval;
        });
        int id = make_node(std::move(out), {x, t});
        nodes.back().back = [id, x, t, H, W](Graph& g) {
            const auto& d = g.grad(id);
            i64 NC = d.dim(0) * d.dim(1);
            if (g.needs_grad(x)) {
                auto& dx = g.grad(x).data;
                const auto& dd = d.data;
                for (std::size_t i = 0; i < dd.size(); ++i) dx[i] += dd[i];
            }
            if (g.needs_grad(t)) {
                auto& dt = g.grad(t).data;
                for (i64 nc = 0; nc < NC; ++nc) {
                    const T* p = d.ptr() + nc * H * W;
                    T acc = T(0);
                    for (i64 i = 0; i < H * W; ++i) acc += p[i];
                    dt[static_cast<std::size_t>(nc)] += acc;
                }
            }
        };
        return id;
    }

    /// Adds -1e9 to attention scores of key positions at or beyond each
    /// item's real token count, so padding never soaks attention mass.
    int add_key_mask(int scores, const std::vector<i64>& key_lengths) {
        const auto& sv = val(scores);
        i64 N = sv.dim(0), L = sv.dim(1), S = sv.dim(2);
        require(static_cast<i64>(key_lengths.size()) == N, "add_key_mask: length count");
        Tensor<T> out = sv;
        for (i64 n = 0; n < N; ++n) {
            i64 len = std::max<i64>(1, key_lengths[static_cast<std::size_t>(n)]);
            for (i64 l = 0; l < L; ++l)
                for (i64 s = len; s < S; ++s)
                    out.data[static_cast<std::size_t>((n * L + l) * S + s)] += T(-1e9);
        }
        int id = make_node(std::move(out), {scores});
        nodes.back().back = [id, scores](Graph& g) {
            if (!g.needs_grad(scores)) return;
            const auto& d = g.grad(id).data;
            auto& ds = g.grad(scores).data;
            for (std::size_t i = 0; i < d.size(); ++i) ds[i] += d[i];
        };
        return id;
    }

    /// Mean over each sequence's first len[n] positions: {N,L,D} -> {N,1,D}.
    int seq_mean(int x, const std::vector<i64>& lengths) {
        const auto& xv = val(x);
        i64 N = xv.dim(0), L = xv.dim(1), D = xv.dim(2);
        require(static_cast<i64>(lengths.size()) == N, "seq_mean: length count");
        Tensor<T> out({N, 1, D});
        for (i64 n = 0; n < N; ++n) {
            i64 len = std::clamp<i64>(lengths[static_cast<std::size_t>(n)], 1, L);
            for (i64 l = 0; l < len; ++l)
                for (i64 k = 0; k < D; ++k)
                    out.data[static_cast<std::size_t>(n * D + k)] +=
                        xv.data[static_cast<std::size_t>((n * L + l) * D + k)];
            for (i64 k = 0; k < D; ++k)
                out.data[static_cast<std::size_t>(n * D + k)] /= static_cast<T>(len);
        }
        auto lens = std::make_shared<std::vector<i64>>(lengths);
        int id = make_node(std::move(out), {x});
        nodes.back().back = [id, x, lens, L, D](Graph& g) {
            if (!g.needs_grad(x)) return;
            const auto& d = g.grad(id);
            auto& dx = g.grad(x);
            i64 N2 = dx.dim(0);
            for (i64 n = 0; n < N2; ++n) {
                i64 len = std::clamp<i64>((*lens)[static_cast<std::size_t>(n)], 1, L);
                T inv = T(1) / static_cast<T>(len);
                for (i64 l = 0; l < len; ++l)
                    for (i64 k = 0; k < D; ++k)
                        dx.data[static_cast<std::size_t>((n * L + l) * D + k)] +=
                            d.data[static_cast<std::size_t>(n * D + k)] * inv;
            }
        };
        return id;
    }

    /// Per-channel affine modulation: y[n,c,:,:] = x * (1 + s[n,c]) + b[n,c].
    int film_channel(int x, int s, int b) {
        const auto& xv = val(x);
        const auto& sv = val(s);
        const auto& bv = val(b);
        i64 N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        require(sv.dim(0) == N && sv.dim(1) == C && bv.dim(0) == N && bv.dim(1) == C,
                "film_channel: shape");
        Tensor<T> out(xv.shape);
        parallel_for(N * C, [&](i64 nc) {
            T scale = T(1) + sv.data[static_cast<std::size_t>(nc)];
            T shift = bv.data[static_cast<std::size_t>(nc)];
            const T* src = xv.ptr() + nc * H * W;
            T* dst = out.ptr() + nc * H * W;
            for (i64 i = 0; i < H * W; ++i) dst[i] = src[i] * scale + shift;
        });
        int id = make_node(std::move(out), {x, s, b});
        nodes.back().back = [id, x, s, b, H, W](Graph& g) {
            const auto& d = g.grad(id);
            const auto& xv2 = g.val(x);
            const auto& sv2 = g.val(s);
            i64 NC = xv2.dim(0) * xv2.dim(1);
            if (g.needs_grad(x)) {
                auto& dx = g.grad(x);
                parallel_for(NC, [&](i64 nc) {
                    T scale = T(1) + sv2.data[static_cast<std::size_t>(nc)];
                    const T* dp = d.ptr() + nc * H * W;
                    T* dst = dx.ptr() + nc * H * W;
                    for (i64 i = 0; i < H * W; ++i) dst[i] += dp[i] * scale;
                });
            }
            if (g.needs_grad(s)) {
                auto& ds = g.grad(s).data;
                for (i64 nc = 0; nc < NC; ++nc) {
                    const T* dp = d.ptr() + nc * H * W;
                    const T* xp = xv2.ptr() + nc * H * W;
                    T acc = T(0);
                    for (i64 i = 0; i < H * W; ++i) acc += dp[i] * xp[i];
                    ds[static_cast<std::size_t>(nc)] += acc;
                }
            }
            if (g.needs_grad(b)) {
                auto& db = g.grad(b).data;
                for (i64 nc = 0; nc < NC; ++nc) {
                    const T* dp = d.ptr() + nc * H * W;
                    T acc = T(0);
                    for (i64 i = 0; i < H * W; ++i) acc += dp[i];
                    db[static_cast<std::size_t>(nc)] += acc;
                }
            }
        };
        return id;
    }

    /// Mean squared error over masked cells, averaged per item then over the
    /// batch. target and mask are constants. mask {N,1,H,W} or same shape.
    int masked_mse(int pred, const Tensor<T>& target, const Tensor<u8>& mask) {
        const auto& pv = val(pred);
        require(pv.same_shape(target), "masked_mse: shape mismatch");
        i64 N = pv.dim(0), C = pv.dim(1), HW = pv.dim(2) * pv.dim(3);
        require(mask.dim(0) == N && mask.dim(2) == pv.dim(2) && mask.dim(3) == pv.dim(3),
                "masked_mse: mask shape");
        auto counts = std::make_shared<std::vector<i64>>(static_cast<std::size_t>(N), 0);
        T loss = T(0);
        for (i64 n = 0; n < N; ++n) {
            const u8* mp = mask.ptr() + n * HW;
            i64 cnt = 0;
            for (i64 i = 0; i < HW; ++i) cnt += mp[i] ? 1 : 0;
            (*counts)[static_cast<std::size_t>(n)] = cnt * C;
            if (cnt == 0) continue;
            T item = T(0);
            for (i64 c = 0; c < C; ++c) {
                const T* pp = pv.ptr() + (n * C + c) * HW;
                const T* tp = target.ptr() + (n * C + c) * HW;
                for (i64 i = 0; i < HW; ++i) {
                    if (!mp[i]) continue;
                    T d = pp[i] - tp[i];
                    item += d * d;
                }
            }
            loss += item / static_cast<T>(cnt * C);
        }
        loss /= static_cast<T>(N);
        Tensor<T> out({1});
        out.data[0] = loss;
        int id = make_node(std::move(out), {pred});
        auto tgt = std::make_shared<Tensor<T>>(target);
        auto msk = std::make_shared<Tensor<u8>>(mask);
        nodes.back().back = [id, pred, tgt, msk, counts, C, HW](Graph& g) {
            if (!g.needs_grad(pred)) return;
            T dl = g.grad(id).data[0];
            const auto& pv2 = g.val(pred);
            auto& dp = g.grad(pred);
            i64 N2 = pv2.dim(0);
            for (i64 n = 0; n < N2; ++n) {
                i64 cnt = (*counts)[static_cast<std::size_t>(n)];
                if (cnt == 0) continue;
                T coef = dl * T(2) / (static_cast<T>(cnt) * static_cast<T>(N2));
                const u8* mp = msk->ptr() + n * HW;
                for (i64 c = 0; c < C; ++c) {
                    const T* pp = pv2.ptr() + (n * C + c) * HW;
                    const T* tp = tgt->ptr() + (n * C + c) * HW;
                    T* gp = dp.ptr() + (n * C + c) * HW;
                    for (i64 i = 0; i < HW; ++i) {
                        if (!mp[i]) continue;
                        gp[i] += coef * (pp[i] - tp[i]);
                    }
                }
            }
        };
        return id;
    }

private:
    static T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

    int make_node(Tensor<T> out, const std::vector<int>& parents) {
        Node n;
        n.val = std::move(out);
        for (int p : parents)
            if (nodes[static_cast<std::size_t>(p)].needs_grad) n.needs_grad = true;
        nodes.push_back(std::move(n));
        return static_cast<int>(nodes.size()) - 1;
    }

    static void im2col(const Tensor<T>& x, i64 n, i64 kh, i64 kw, i64 stride, i64 pad, i64 Ho,
                       i64 Wo, T* col) {
        i64 Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
        const T* xn = x.ptr() + n * Cin * H * W;
        i64 row = 0;
        for (i64 c = 0; c < Cin; ++c)
            for (i64 dr = 0; dr < kh; ++dr)
                for (i64 dc = 0; dc < kw; ++dc, ++row) {
                    T* dst = col + row * Ho * Wo;
                    const T* src = xn + c * H * W;
                    for (i64 r = 0; r < Ho; ++r) {
                        i64 sr = r * stride + dr - pad;
                        if (sr < 0 || sr >= H) {
                            for (i64 q = 0; q < Wo; ++q) dst[r * Wo + q] = T(0);
                            continue;
                        }
                        for (i64 q = 0; q < Wo; ++q) {
                            i64 sc = q * stride + dc - pad;
                            dst[r * Wo + q] = (sc < 0 || sc >= W) ? T(0) : src[sr * W + sc];
                        }
                    }
                }
    }

    static void col2im_add(Tensor<T>& dx, i64 n, i64 kh, i64 kw, i64 stride, i64 pad, i64 Ho,
                           i64 Wo, const T* dcol) {
        i64 Cin = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
        T* xn = dx.ptr() + n * Cin * H * W;
        i64 row = 0;
        for (i64 c = 0; c < Cin; ++c)
            for (i64 dr = 0; dr < kh; ++dr)
                for (i64 dc = 0; dc < kw; ++dc, ++row) {
                    const T* src = dcol + row * Ho * Wo;
                    T* dst = xn + c * H * W;
                    for (i64 r = 0; r < Ho; ++r) {
                        i64 sr = r * stride + dr - pad;
                        if (sr < 0 || sr >= H) continue;
                        for (i64 q = 0; q < Wo; ++q) {
                            i64 sc = q * stride + dc - pad;
                            if (sc < 0 || sc >= W) continue;
                            dst[sr * W + sc] += src[r * Wo + q];
                        }
                    }
                }
    }
};

}  // namespace phr
