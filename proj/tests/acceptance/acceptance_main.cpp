// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exit status is nonzero when
// any criterion fails. Training artifacts are shared across criteria so the
// whole suite stays within its time budgets.
//
// Run a subset with: ./acceptance 1 5 9

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "phr/config.hpp"
#include "phr/phantom.hpp"
#include "phr/pipeline.hpp"

using namespace phr;
namespace fs = std::filesystem;

namespace {

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double s() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

// ---------------------------------------------------------------------------
// shared desk artifacts

struct DeskArtifacts {
    RunConfig cfg;
    std::vector<TrainItem> train_items;        // the 8 synthetic slices
    std::vector<SliceRecord> train_records;    // with masks, for reconstruction
    std::vector<MaskU8> train_edges;
    DenoiserBundle stage1;
    DenoiserBundle stage2;
    double stage1_final_loss = 0.0;
    double stage2_step0_loss = 0.0;
    double stage1_loss_same_batch = 0.0;
    double stage1_train_seconds = 0.0;
    double stage2_train_seconds = 0.0;
    bool built = false;
};

DeskArtifacts g_desk;

RunConfig desk_acceptance_config() {
    RunConfig cfg = desk_preset();
    cfg.seed = 41;
    cfg.slice_lo = 4;   // 4 slices per subject, 2 subjects -> 8 slices
    cfg.slice_hi = 7;
    cfg.stage1.seed = cfg.seed;
    cfg.stage2.seed = cfg.seed + 1;
    return cfg;
}

// Builds the 8-slice corpus through the real preprocessing path and trains
// both stages once.
DeskArtifacts& desk_artifacts(std::ostream& log) {
    if (g_desk.built) return g_desk;
    auto work = fs::path("acceptance_work") / "desk";
    fs::remove_all(work);
    fs::create_directories(work);

    g_desk.cfg = desk_acceptance_config();
    g_desk.cfg.data_root = (work / "data").string();
    g_desk.cfg.cache_dir = (work / "cache").string();
    g_desk.cfg.checkpoint_dir = (work / "ckpt").string();
    g_desk.cfg.output_dir = (work / "out").string();

    write_phantom_dataset(g_desk.cfg.data_root, 2, 2024, 64, 16);
    auto rc = run_preprocess(g_desk.cfg, true, [](const nlohmann::json&) {});
    if (rc != kOk) throw std::runtime_error("desk preprocess failed");

    auto manifest = read_manifest(g_desk.cfg.cache_dir);
    Tokenizer tok;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& m = manifest.records[i];
        MaskU8 edges;
        auto rec = read_slice_record(g_desk.cfg.cache_dir, m, &edges);
        TrainItem item;
        item.image = rec.image;
        item.inpaint_mask = rec.inpaint_mask;
        item.tokens = tok.tokenize(m.prompt_text);
        item.edges = edges;
        item.source_index = static_cast<i64>(i);
        g_desk.train_items.push_back(std::move(item));
        g_desk.train_records.push_back(std::move(rec));
        g_desk.train_edges.push_back(std::move(edges));
    }
    log << "    corpus: " << g_desk.train_items.size() << " slices\n";

    g_desk.stage1 = DenoiserBundle::build(g_desk.cfg.bundle_config());
    {
        Timer t;
        auto items = g_desk.train_items;
        g_desk.stage1_final_loss = train_stage1(items, g_desk.stage1, g_desk.cfg.stage1);
        g_desk.stage1_train_seconds = t.s();
        log << "    stage-1: " << g_desk.cfg.stage1.max_steps << " steps in "
            << g_desk.stage1_train_seconds << " s, final loss " << g_desk.stage1_final_loss
            << "\n";
    }

    // step-0 equality bookkeeping, then the stage-2 run
    g_desk.stage2 = g_desk.stage1;
    {
        Rng r1(777), r2(777);
        g_desk.stage1_loss_same_batch =
            training_step(g_desk.train_items, g_desk.stage2, r1, false);
        g_desk.stage2.attach_control(g_desk.cfg.stage2.seed);
        g_desk.stage2.stage = StageTag::stage2;
        g_desk.stage2_step0_loss = training_step(g_desk.train_items, g_desk.stage2, r2, false);
    }
    {
        Timer t;
        auto items = g_desk.train_items;
        train_stage2(items, g_desk.stage2, g_desk.cfg.stage2);
        g_desk.stage2_train_seconds = t.s();
        log << "    stage-2: " << g_desk.cfg.stage2.max_steps << " steps in "
            << g_desk.stage2_train_seconds << " s\n";
    }
    g_desk.built = true;
    return g_desk;
}

// phantom record through the standard slice operations
SliceRecord phantom_record(u64 seed, const RunConfig& cfg, bool with_tumor) {
    PhantomParams p;
    p.size = 64;
    p.nz = 16;
    p.seed = seed;
    p.with_tumor = with_tumor;
    Rng rng(seed);
    p.tumor_cx = 0.22 + 0.12 * rng.uniform();
    p.tumor_cy = 0.35 + 0.25 * rng.uniform();
    p.tumor_radius = 5.5 + 3.0 * rng.uniform();

    auto [raw, seg] = phantom_slice(p, 8);
    auto tumor = merge_tumor_labels(seg);
    i64 count = 0;
    for (u8 v : tumor.data) count += v;

    SliceRecord rec;
    rec.subject_id = "phantom" + std::to_string(seed);
    rec.slice_index = 8;
    rec.tumor_pixel_count = count;
    rec.slice_class = categorize_slice(count, cfg.tumor_min_pixels, cfg.tumor_max_pixels);
    rec.age = 55.0;
    rec.image = pad_and_resize(clip_and_normalize(raw, cfg.clip_percentile), cfg.pad_to,
                               cfg.out_size, -1.0f);
    rec.tumor_mask = pad_and_resize(tumor, cfg.pad_to, cfg.out_size, u8(0));
    rec.inpaint_mask = dilate_mask(rec.tumor_mask, cfg.dilation_radius);
    return rec;
}

// ---------------------------------------------------------------------------
// criteria

bool criterion_1_zero_conv(std::ostream& log) {
    Timer timer;
    RunConfig cfg = desk_acceptance_config();
    auto bare = DenoiserBundle::build(cfg.bundle_config());
    auto with = DenoiserBundle::build(cfg.bundle_config());
    with.attach_control(99);

    Tokenizer tok;
    Rng rng(11);
    double worst = 0.0;
    const i64 batch = 10;
    for (int rep = 0; rep < 10; ++rep) {
        auto z = Tensor<float>::randn({batch, 1, 64, 64}, rng);
        std::vector<ConditioningPack> plain, edged;
        for (i64 i = 0; i < batch; ++i) {
            ConditioningPack p;
            p.tokens = tok.tokenize("mri of a healthy brain .");
            p.timestep = rng.uniform_int(1, cfg.timesteps);
            p.latent_mask = MaskU8({64, 64});
            for (auto& v : p.latent_mask.data) v = rng.uniform() < 0.2 ? 1 : 0;
            p.context_latent = Tensor<float>::randn({1, 64, 64}, rng, 0.4);
            plain.push_back(p);
            MaskU8 e({64, 64});
            for (auto& v : e.data) v = rng.uniform() < 0.15 ? 1 : 0;
            p.edge_map = e;
            edged.push_back(p);
        }
        auto out_bare = predict_noise(bare, z, plain);
        auto out_ctrl = predict_noise(with, z, edged);
        worst = std::max(worst, max_abs_diff(out_bare, out_ctrl));
    }
    double elapsed = timer.s();
    log << "    max-norm difference over 100 inputs: " << worst << " (limit 1e-6), " << elapsed
        << " s (limit 30)\n";
    return worst <= 1e-6 && elapsed < 30.0;
}

bool criterion_2_forward_stats(std::ostream& log) {
    Timer timer;
    auto schedule = make_schedule(1000);
    Rng rng(21);
    auto z0 = Tensor<float>::randn({8, 8}, rng);
    const int draws = 100000;
    bool ok = true;
    for (i64 t : {i64(250), i64(500), i64(1000)}) {
        double ab = schedule.at(t);
        std::vector<double> sum(64, 0.0), sumsq(64, 0.0);
        for (int k = 0; k < draws; ++k) {
            auto eps = Tensor<float>::randn({8, 8}, rng);
            auto zt = forward_diffuse(z0, t, eps, schedule);
            for (int i = 0; i < 64; ++i) {
                sum[static_cast<std::size_t>(i)] += zt.data[static_cast<std::size_t>(i)];
                sumsq[static_cast<std::size_t>(i)] +=
                    static_cast<double>(zt.data[static_cast<std::size_t>(i)]) *
                    zt.data[static_cast<std::size_t>(i)];
            }
        }
        // mean error is normalized by |z0|: at t = T the target mean is
        // ~6e-3 * z0, far below the 1e5-draw estimator noise, so a
        // target-relative bound would be unattainable for any implementation
        double err2 = 0, ref2 = 0, var_mean = 0;
        for (int i = 0; i < 64; ++i) {
            double mu = sum[static_cast<std::size_t>(i)] / draws;
            double want = std::sqrt(ab) * z0.data[static_cast<std::size_t>(i)];
            err2 += (mu - want) * (mu - want);
            ref2 += static_cast<double>(z0.data[static_cast<std::size_t>(i)]) *
                    z0.data[static_cast<std::size_t>(i)];
            var_mean += sumsq[static_cast<std::size_t>(i)] / draws - mu * mu;
        }
        var_mean /= 64.0;
        double mean_rel = std::sqrt(err2 / ref2);
        double var_rel = std::abs(var_mean - (1.0 - ab)) / (1.0 - ab);
        log << "    t=" << t << ": mean err " << mean_rel << ", var err " << var_rel
            << " (limits 0.02)\n";
        ok = ok && mean_rel < 0.02 && var_rel < 0.02;
    }
    double elapsed = timer.s();
    log << "    " << elapsed << " s (limit 60)\n";
    return ok && elapsed < 60.0;
}

bool criterion_3_masked_loss_invariance(std::ostream& log) {
    Rng rng(31);
    int exact = 0;
    for (int trial = 0; trial < 50; ++trial) {
        i64 h = 4 + rng.uniform_int(0, 12), w = 4 + rng.uniform_int(0, 12);
        auto eps = Tensor<float>::randn({h, w}, rng);
        auto hat = Tensor<float>::randn({h, w}, rng);
        MaskU8 mask({h, w});
        for (auto& v : mask.data) v = rng.uniform() < 0.3 ? 1 : 0;
        mask.data[0] = 1;  // nonempty
        double before = masked_mse(eps, hat, mask);
        auto perturbed = hat;
        for (std::size_t i = 0; i < perturbed.data.size(); ++i)
            if (!mask.data[i]) perturbed.data[i] += static_cast<float>(rng.gaussian() * 10.0);
        double after = masked_mse(eps, perturbed, mask);
        if (before == after) ++exact;  // bit-compare
    }
    log << "    bit-identical losses: " << exact << "/50\n";
    return exact == 50;
}

bool criterion_4_gradient_check(std::ostream& log) {
    Timer timer;
    UNetConfig ucfg;
    ucfg.in_channels = 3;
    ucfg.out_channels = 1;
    ucfg.base_width = 4;
    ucfg.txt_dim = 8;
    ucfg.time_dim = 8;
    ucfg.gn_groups = 2;

    ParamStore<double> store;
    Rng rng(47);
    auto unet = UNet<double>::init(store, ucfg, rng);
    auto text = TextEncoder<double>::init(store, Tokenizer().vocab_size(), ucfg.txt_dim, rng);
    (void)text;
    i64 n_params = store.count_params("unet.");
    log << "    denoiser parameters: " << n_params << " (limit 10000)\n";
    if (n_params > 10000) return false;

    const i64 hw = 12;
    auto x = Tensor<double>::randn({1, 3, hw, hw}, rng);
    auto target = Tensor<double>::randn({1, 1, hw, hw}, rng);
    MaskU8 mask({1, 1, hw, hw});
    for (auto& v : mask.data) v = rng.uniform() < 0.4 ? 1 : 0;
    mask.data[0] = 1;
    Tokenizer tok;
    auto tokens = tok.tokenize("mri of a healthy brain .");
    std::vector<i64> ids;
    for (int id : tokens.ids) ids.push_back(id);

    std::vector<i64> lengths{12};

    // forward pass closure over current store values
    auto eval_loss = [&]() {
        Graph<double> g;
        Binding<double> bind(g, store, false);
        int xn = g.leaf(x, false);
        int txt_node = g.embedding(bind.node(store.find("text.table")), ids, 1,
                                   TokenSequence::kLength);
        int cond = unet.condition(bind, {17}, txt_node, lengths);
        int out = unet.forward(bind, xn, cond, txt_node, lengths);
        int loss = g.masked_mse(out, target, mask);
        return g.val(loss).data[0];
    };

    // analytic gradients
    {
        Graph<double> g;
        Binding<double> bind(g, store, true);
        int xn = g.leaf(x, false);
        int txt_node = g.embedding(bind.node(store.find("text.table")), ids, 1,
                                   TokenSequence::kLength);
        int cond = unet.condition(bind, {17}, txt_node, lengths);
        int out = unet.forward(bind, xn, cond, txt_node, lengths);
        int loss = g.masked_mse(out, target, mask);
        store.zero_grads();
        g.backward(loss);
        bind.accumulate_grads();
    }

    double worst = 0.0;
    std::string worst_name;
    const double h = 1e-5;
    for (auto& e : store.entries()) {
        if (e.name.rfind("unet.", 0) != 0) continue;  // the denoiser's parameters
        for (std::size_t i = 0; i < e.value.data.size(); ++i) {
            double orig = e.value.data[i];
            e.value.data[i] = orig + h;
            double lp = eval_loss();
            e.value.data[i] = orig - h;
            double lm = eval_loss();
            e.value.data[i] = orig;
            double fd = (lp - lm) / (2 * h);
            double an = e.grad.data[i];
            double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
            if (rel > worst) {
                worst = rel;
                worst_name = e.name;
            }
        }
    }
    double elapsed = timer.s();
    log << "    worst relative error: " << worst << " at " << worst_name
        << " (limit 1e-3), " << elapsed << " s (limit 300)\n";
    return worst < 1e-3 && elapsed < 300.0;
}

bool criterion_5_overfit(std::ostream& log) {
    Timer timer;
    auto& desk = desk_artifacts(log);

    // masked loss after 200 stage-1 steps, averaged over seeded draws
    double loss = 0.0;
    for (u64 s = 0; s < 10; ++s) {
        Rng r(9000 + s);
        loss += training_step(desk.train_items, desk.stage1, r, false);
    }
    loss /= 10.0;

    // reconstruct a held-in masked region with the slice's own conditioning
    const SliceRecord* pick = nullptr;
    std::size_t pick_idx = 0;
    for (std::size_t i = 0; i < desk.train_records.size(); ++i)
        if (desk.train_records[i].slice_class == SliceClass::tumorous) {
            pick = &desk.train_records[i];
            pick_idx = i;
            break;
        }
    if (!pick) return false;

    ImageF masked = pick->image;
    for (std::size_t j = 0; j < masked.data.size(); ++j)
        if (pick->inpaint_mask.data[j]) masked.data[j] = 0.0f;

    ConditioningPack pack;
    pack.tokens = desk.train_items[pick_idx].tokens;
    pack.latent_mask = pick->inpaint_mask;
    pack.context_latent = desk.stage1.encode_image(masked);
    Rng rs(333);
    auto z0 = sample(desk.stage1, {1, 64, 64}, pack, 50, rs);
    auto out = composite(desk.stage1.decode_latent(z0), pick->image, pick->inpaint_mask);

    // SSIM on the masked bounding box against the true content
    i64 r0 = 64, r1 = -1, c0 = 64, c1 = -1;
    for (i64 r = 0; r < 64; ++r)
        for (i64 c = 0; c < 64; ++c)
            if (pick->inpaint_mask.at(r, c)) {
                r0 = std::min(r0, r);
                r1 = std::max(r1, r);
                c0 = std::min(c0, c);
                c1 = std::max(c1, c);
            }
    ImageF crop_out({r1 - r0 + 1, c1 - c0 + 1}), crop_true({r1 - r0 + 1, c1 - c0 + 1});
    for (i64 r = 0; r <= r1 - r0; ++r)
        for (i64 c = 0; c <= c1 - c0; ++c) {
            crop_out.at(r, c) = out.at(r0 + r, c0 + c);
            crop_true.at(r, c) = pick->image.at(r0 + r, c0 + c);
        }
    double recon_ssim = ssim(crop_out, crop_true);

    double elapsed = desk.stage1_train_seconds + timer.s();
    log << "    masked loss " << loss << " (limit 0.05), reconstruction SSIM " << recon_ssim
        << " (limit >0.9), " << elapsed << " s (limit 600)\n";
    return loss < 0.05 && recon_ssim > 0.9 && elapsed < 600.0;
}

bool criterion_6_stage2_freeze(std::ostream& log) {
    auto& desk = desk_artifacts(log);
    bool frozen_ok = true;
    std::string first_moved;
    for (const auto& e : desk.stage1.store.entries()) {
        int id = desk.stage2.store.find(e.name);
        if (id < 0) {
            frozen_ok = false;
            first_moved = e.name + " (missing)";
            break;
        }
        if (!bitwise_equal(e.value, desk.stage2.store.at(id).value)) {
            frozen_ok = false;
            first_moved = e.name;
            break;
        }
    }
    double step0_gap = std::abs(desk.stage2_step0_loss - desk.stage1_loss_same_batch);
    log << "    backbone bit-identical: " << (frozen_ok ? "yes" : ("no: " + first_moved))
        << "; step-0 loss gap " << step0_gap << " (limit 1e-6)\n";
    return frozen_ok && step0_gap <= 1e-6;
}

bool criterion_7_metric_oracles(std::ostream& log) {
    bool ok = true;

    // FID closed forms
    auto mk = [](std::vector<double> mu, std::vector<double> var) {
        FeatureStats s;
        s.mu = Eigen::Map<Eigen::VectorXd>(mu.data(), static_cast<i64>(mu.size()));
        s.sigma = Eigen::VectorXd::Map(var.data(), static_cast<i64>(var.size())).asDiagonal();
        s.n = 4;
        return s;
    };
    double e1 = std::abs(fid(mk({0}, {1}), mk({1}, {1})) - 1.0);
    double e2 = std::abs(fid(mk({0}, {4}), mk({0}, {1})) - 1.0);
    Rng rng(71);
    double e3 = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        int d = 8;
        std::vector<double> ma(static_cast<std::size_t>(d)), mb(static_cast<std::size_t>(d)),
            va(static_cast<std::size_t>(d)), vb(static_cast<std::size_t>(d));
        double expect = 0.0;
        for (int i = 0; i < d; ++i) {
            ma[static_cast<std::size_t>(i)] = rng.gaussian();
            mb[static_cast<std::size_t>(i)] = rng.gaussian();
            va[static_cast<std::size_t>(i)] = 0.3 + rng.uniform();
            vb[static_cast<std::size_t>(i)] = 0.3 + rng.uniform();
            double dm = ma[static_cast<std::size_t>(i)] - mb[static_cast<std::size_t>(i)];
            expect += dm * dm + va[static_cast<std::size_t>(i)] + vb[static_cast<std::size_t>(i)] -
                      2.0 * std::sqrt(va[static_cast<std::size_t>(i)] * vb[static_cast<std::size_t>(i)]);
        }
        e3 = std::max(e3, std::abs(fid(mk(ma, va), mk(mb, vb)) - expect));
    }
    log << "    fid scalar errors: " << e1 << ", " << e2 << "; diagonal max " << e3
        << " (limits 1e-9)\n";
    ok = ok && e1 < 1e-9 && e2 < 1e-9 && e3 < 1e-9;

    // SSIM vs an independent direct implementation
    double worst_ssim = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        auto x = Tensor<float>::randn({12, 14}, rng, 0.5);
        auto y = Tensor<float>::randn({12, 14}, rng, 0.5);
        // direct-form oracle, windows expanded literally
        const i64 win = 7;
        double c1 = std::pow(0.02, 2), c2 = std::pow(0.06, 2);
        double acc = 0;
        i64 cnt = 0;
        for (i64 r = 0; r + win <= 12; ++r)
            for (i64 c = 0; c + win <= 14; ++c) {
                double mx = 0, my = 0;
                for (i64 a = 0; a < win; ++a)
                    for (i64 b = 0; b < win; ++b) {
                        mx += x.at(r + a, c + b);
                        my += y.at(r + a, c + b);
                    }
                mx /= 49.0;
                my /= 49.0;
                double vx = 0, vy = 0, cxy = 0;
                for (i64 a = 0; a < win; ++a)
                    for (i64 b = 0; b < win; ++b) {
                        vx += std::pow(x.at(r + a, c + b) - mx, 2);
                        vy += std::pow(y.at(r + a, c + b) - my, 2);
                        cxy += (x.at(r + a, c + b) - mx) * (y.at(r + a, c + b) - my);
                    }
                vx /= 49.0;
                vy /= 49.0;
                cxy /= 49.0;
                acc += (2 * mx * my + c1) * (2 * cxy + c2) /
                       ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++cnt;
            }
        worst_ssim = std::max(worst_ssim, std::abs(ssim(x, y) - acc / cnt));
    }
    log << "    ssim vs direct oracle, worst " << worst_ssim << " (limit 1e-9)\n";
    ok = ok && worst_ssim < 1e-9;

    // fp_rate exactness on constructed verdicts
    std::vector<ImageF> slices;
    for (int i = 0; i < 28; ++i) {
        ImageF s({4, 4});
        s.data[0] = (i % 14 == 3) ? 1.0f : 0.0f;
        slices.push_back(s);
    }
    auto fp = fp_rate(slices, [](const ImageF& s) { return s.data[0] > 0.5f; });
    bool fp_ok = fp.flagged == 2 && fp.total == 28 && fp.rate == 2.0 / 28.0;
    log << "    fp_rate exact fraction: " << (fp_ok ? "yes" : "no") << "\n";
    return ok && fp_ok;
}

bool criterion_8_geometry_oracles(std::ostream& log) {
    Rng rng(81);
    bool ok = true;

    // dilation vs brute-force L1 ball, 100 random 32x32 masks
    int dil_ok = 0;
    for (int trial = 0; trial < 100; ++trial) {
        MaskU8 m({32, 32});
        for (auto& v : m.data) v = rng.uniform() < 0.04 ? 1 : 0;
        i64 radius = rng.uniform_int(1, 6);
        auto fast = dilate_mask(m, radius);
        MaskU8 oracle({32, 32});
        for (i64 r = 0; r < 32; ++r)
            for (i64 c = 0; c < 32; ++c) {
                u8 v = 0;
                for (i64 rr = 0; rr < 32 && !v; ++rr)
                    for (i64 cc = 0; cc < 32; ++cc)
                        if (std::abs(rr - r) + std::abs(cc - c) <= radius && m.at(rr, cc)) {
                            v = 1;
                            break;
                        }
                oracle.at(r, c) = v;
            }
        if (bitwise_equal(fast, oracle)) ++dil_ok;
    }
    log << "    dilate_mask matches the L1-ball oracle: " << dil_ok << "/100\n";
    ok = ok && dil_ok == 100;

    // mirror_composite: untouched outside the mask, fixed point on symmetry
    int mirror_ok = 0;
    for (int trial = 0; trial < 25; ++trial) {
        MaskU8 edges({16, 16}), mask({16, 16});
        for (auto& v : edges.data) v = rng.uniform() < 0.3 ? 1 : 0;
        for (auto& v : mask.data) v = rng.uniform() < 0.25 ? 1 : 0;
        EdgeMap em{edges, EdgeSource::native};
        auto out = mirror_composite(em, mask);
        bool outside_ok = true;
        for (i64 r = 0; r < 16; ++r)
            for (i64 c = 0; c < 16; ++c)
                if (!mask.at(r, c) && out.edges.at(r, c) != edges.at(r, c)) outside_ok = false;

        MaskU8 sym({16, 16});
        for (i64 r = 0; r < 16; ++r)
            for (i64 c = 0; c < 8; ++c) {
                u8 v = rng.uniform() < 0.3 ? 1 : 0;
                sym.at(r, c) = v;
                sym.at(r, 15 - c) = v;
            }
        EdgeMap sem{sym, EdgeSource::native};
        auto sout = mirror_composite(sem, mask);
        if (outside_ok && bitwise_equal(sout.edges, sym)) ++mirror_ok;
    }
    log << "    mirror_composite properties: " << mirror_ok << "/25\n";
    ok = ok && mirror_ok == 25;

    // downsample_mask vs brute-force window scan
    int down_ok = 0;
    for (int trial = 0; trial < 25; ++trial) {
        MaskU8 m({24, 24});
        for (auto& v : m.data) v = rng.uniform() < 0.05 ? 1 : 0;
        i64 f = trial % 2 == 0 ? 2 : 4;
        auto d = downsample_mask(m, f);
        bool match = true;
        for (i64 r = 0; r < 24 / f; ++r)
            for (i64 c = 0; c < 24 / f; ++c) {
                u8 any = 0;
                for (i64 a = 0; a < f; ++a)
                    for (i64 b = 0; b < f; ++b) any |= m.at(r * f + a, c * f + b);
                if (d.at(r, c) != any) match = false;
            }
        if (match) ++down_ok;
    }
    log << "    downsample_mask matches the window scan: " << down_ok << "/25\n";
    return ok && down_ok == 25;
}

bool criterion_9_misalignment(std::ostream& log) {
    Timer timer;
    auto& desk = desk_artifacts(log);

    int improved = 0, total = 0;
    for (u64 seed = 100; seed < 125; ++seed) {
        auto rec = phantom_record(seed, desk.cfg, true);
        if (rec.slice_class != SliceClass::tumorous) {
            // radius drawn outside the class range; regenerate deterministically
            auto rec2 = phantom_record(seed + 10000, desk.cfg, true);
            rec = rec2;
        }
        if (rec.slice_class != SliceClass::tumorous) continue;
        ++total;

        double before = contralateral_ssim(rec.image, rec.inpaint_mask);
        ReconstructionRequest req;
        req.slice = rec;
        req.steps = 50;
        req.seed = seed;
        req.edge_params = desk.cfg.edge_params();
        auto res = reconstruct(req, desk.stage2);
        double after = contralateral_ssim(res.output, rec.inpaint_mask);
        if (after > before) ++improved;
    }
    double elapsed = desk.stage2_train_seconds + timer.s();
    log << "    improved contralateral SSIM on " << improved << "/" << total
        << " phantoms (need >= 80%), " << elapsed << " s (limit 900)\n";
    return total == 25 && improved * 5 >= total * 4 && elapsed < 900.0;
}

bool criterion_10_determinism(std::ostream& log) {
    Timer timer;
    auto run_once = [&](const std::string& tag) {
        auto work = fs::path("acceptance_work") / ("det_" + tag);
        fs::remove_all(work);
        RunConfig cfg = desk_preset();
        cfg.seed = 77;
        cfg.slice_lo = 6;
        cfg.slice_hi = 9;
        cfg.stage1.max_steps = 15;
        cfg.stage1.batch_size = 2;
        cfg.stage1.seed = cfg.seed;
        cfg.stage2.max_steps = 15;
        cfg.stage2.batch_size = 2;
        cfg.stage2.warmup_steps = 3;
        cfg.stage2.seed = cfg.seed + 1;
        cfg.sampler_steps = 5;
        cfg.data_root = (work / "data").string();
        cfg.cache_dir = (work / "cache").string();
        cfg.checkpoint_dir = (work / "ckpt").string();
        cfg.output_dir = (work / "out").string();
        write_phantom_dataset(cfg.data_root, 2, 5150, 64, 16);
        auto quiet = [](const nlohmann::json&) {};
        if (run_preprocess(cfg, true, quiet) != kOk) throw std::runtime_error("preprocess");
        if (run_train_sd(cfg, true, quiet) != kOk) throw std::runtime_error("train-sd");
        if (run_train_controlnet(cfg, true, quiet) != kOk)
            throw std::runtime_error("train-controlnet");
        auto manifest = read_manifest(cfg.cache_dir);
        std::string stem;
        for (const auto& r : manifest.records)
            if (r.slice_class == SliceClass::tumorous) {
                stem = r.stem();
                break;
            }
        InferArgs ia;
        ia.input = stem;
        ia.seed = 7;
        if (run_infer(cfg, ia, true, quiet) != kOk) throw std::runtime_error("infer");
        EvaluateArgs ea;
        if (run_evaluate(cfg, ea, true, quiet) != kOk) throw std::runtime_error("evaluate");

        std::map<std::string, std::string> hashes;
        hashes["stage1.ckpt"] = hash_file(cfg.checkpoint_dir + "/stage1.ckpt");
        hashes["stage2.ckpt"] = hash_file(cfg.checkpoint_dir + "/stage2.ckpt");
        for (const auto& e : fs::directory_iterator(cfg.output_dir + "/recon")) {
            auto name = e.path().filename().string();
            if (name == "run_record.json") continue;  // carries wall time
            hashes["recon/" + name] = hash_file(e.path().string());
        }
        hashes["report.json"] = hash_file(cfg.output_dir + "/report.json");
        return hashes;
    };

    auto h1 = run_once("a");
    auto h2 = run_once("b");
    bool ok = h1 == h2;
    if (!ok) {
        for (const auto& [k, v] : h1)
            if (h2.count(k) == 0 || h2.at(k) != v) log << "    differs: " << k << "\n";
    }
    log << "    " << h1.size() << " artifacts byte-compared, identical: " << (ok ? "yes" : "no")
        << ", " << timer.s() << " s\n";
    return ok;
}

bool criterion_11_mask_robustness(std::ostream& log) {
    auto& desk = desk_artifacts(log);
    auto rec = phantom_record(4242, desk.cfg, true);
    if (rec.slice_class != SliceClass::tumorous) return false;

    ReconstructionRequest req;
    req.slice = rec;
    req.steps = 25;
    req.seed = 3;
    req.edge_params = desk.cfg.edge_params();
    auto res_default = reconstruct(req, desk.stage2);

    auto expanded = dilate_mask(rec.inpaint_mask, 5);
    req.mask_override = expanded;
    auto res_expanded = reconstruct(req, desk.stage2);

    i64 mismatches = 0;
    for (i64 r = 0; r < 64; ++r)
        for (i64 c = 0; c < 64; ++c)
            if (!expanded.at(r, c) &&
                res_default.output.at(r, c) != res_expanded.output.at(r, c))
                ++mismatches;
    log << "    outside-larger-mask mismatches: " << mismatches << " (must be 0)\n";
    return mismatches == 0;
}

bool criterion_12_paper_echo(std::ostream& log) {
    auto cfg = paper_preset();
    auto text = echo_config(cfg);
    struct Check {
        const char* what;
        bool ok;
    };
    std::vector<Check> checks = {
        {"batch 8", cfg.stage1.batch_size == 8 && cfg.stage2.batch_size == 8},
        {"accum 4", cfg.stage1.grad_accum == 4 && cfg.stage2.grad_accum == 4},
        {"lr 5e-5 / 5e-4", cfg.stage1.lr == 5e-5 && cfg.stage2.lr == 5e-4},
        {"epochs 30 / 20", cfg.stage1.epochs == 30 && cfg.stage2.epochs == 20},
        {"warmup 0 / 500", cfg.stage1.warmup_steps == 0 && cfg.stage2.warmup_steps == 500},
        {"clip 1.0", cfg.stage1.grad_clip == 1.0 && cfg.stage2.grad_clip == 1.0},
        {"tokens 77", cfg.token_length == 77},
        {"canny 30/80", cfg.canny_low == 30.0 && cfg.canny_high == 80.0},
        {"gaussian 5x5 sigma 1.0", cfg.gaussian_kernel == 5 && cfg.gaussian_sigma == 1.0},
        {"slices 80-130", cfg.slice_lo == 80 && cfg.slice_hi == 130},
        {"clip percentile 99.5", cfg.clip_percentile == 99.5},
        {"dilation 5", cfg.dilation_radius == 5},
        {"tumor range 1000-3000",
         cfg.tumor_min_pixels == 1000 && cfg.tumor_max_pixels == 3000},
        {"split 9:1", cfg.split_ratio == 0.9},
    };
    bool ok = true;
    for (const auto& c : checks) {
        if (!c.ok) {
            log << "    MISSING: " << c.what << "\n";
            ok = false;
        }
    }
    // and the serialized form carries them verbatim
    for (const char* needle : {"lr = 5e-05", "lr = 0.0005", "warmup_steps = 500",
                               "tumor_min_pixels = 1000", "tumor_max_pixels = 3000"})
        if (text.find(needle) == std::string::npos) {
            log << "    serialization missing: " << needle << "\n";
            ok = false;
        }
    log << "    " << checks.size() << " constant groups checked\n";
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    struct Criterion {
        int id;
        const char* name;
        std::function<bool(std::ostream&)> run;
    };
    std::vector<Criterion> criteria = {
        {1, "zero-convolution identity", criterion_1_zero_conv},
        {2, "forward-process statistics", criterion_2_forward_stats},
        {3, "masked-loss invariance", criterion_3_masked_loss_invariance},
        {4, "analytic vs finite-difference gradients", criterion_4_gradient_check},
        {5, "desk overfit and held-in reconstruction", criterion_5_overfit},
        {6, "stage-2 backbone freeze", criterion_6_stage2_freeze},
        {7, "metric oracles", criterion_7_metric_oracles},
        {8, "geometry oracles", criterion_8_geometry_oracles},
        {9, "deliberate-misalignment benefit", criterion_9_misalignment},
        {10, "pipeline determinism", criterion_10_determinism},
        {11, "mask robustness", criterion_11_mask_robustness},
        {12, "paper-parameter echo", criterion_12_paper_echo},
    };

    int failures = 0;
    for (auto& c : criteria) {
        if (!only.empty() && only.count(c.id) == 0) continue;
        std::ostringstream detail;
        Timer t;
        bool ok = false;
        std::string error;
        try {
            ok = c.run(detail);
        } catch (const std::exception& e) {
            error = e.what();
        }
        std::printf("[%s] criterion %2d: %s (%.1f s)\n", ok ? "PASS" : "FAIL", c.id, c.name,
                    t.s());
        std::fputs(detail.str().c_str(), stdout);
        if (!error.empty()) std::printf("    exception: %s\n", error.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    if (failures) std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
