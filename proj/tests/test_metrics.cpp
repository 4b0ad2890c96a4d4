#include <catch2/catch.hpp>

#include "phr/metrics.hpp"
#include "phr/rng.hpp"

using namespace phr;

namespace {

// Independent direct-form SSIM oracle: same definition, separately written,
// pure double arithmetic.
double ssim_oracle(const ImageF& x, const ImageF& y, i64 win = 7, double L = 2.0) {
    double c1 = std::pow(0.01 * L, 2), c2 = std::pow(0.03 * L, 2);
    i64 h = x.dim(0), w = x.dim(1);
    std::vector<double> vals;
    for (i64 r = 0; r + win <= h; ++r)
        for (i64 c = 0; c + win <= w; ++c) {
            std::vector<double> xs, ys;
            for (i64 dr = 0; dr < win; ++dr)
                for (i64 dc = 0; dc < win; ++dc) {
                    xs.push_back(x.at(r + dr, c + dc));
                    ys.push_back(y.at(r + dr, c + dc));
                }
            double n = static_cast<double>(xs.size());
            double mx = 0, my = 0;
            for (std::size_t i = 0; i < xs.size(); ++i) {
                mx += xs[i];
                my += ys[i];
            }
            mx /= n;
            my /= n;
            double vx = 0, vy = 0, cxy = 0;
            for (std::size_t i = 0; i < xs.size(); ++i) {
                vx += (xs[i] - mx) * (xs[i] - mx);
                vy += (ys[i] - my) * (ys[i] - my);
                cxy += (xs[i] - mx) * (ys[i] - my);
            }
            vx /= n;
            vy /= n;
            cxy /= n;
            vals.push_back((2 * mx * my + c1) * (2 * cxy + c2) /
                           ((mx * mx + my * my + c1) * (vx + vy + c2)));
        }
    double acc = 0;
    for (double v : vals) acc += v;
    return acc / static_cast<double>(vals.size());
}

Eigen::VectorXd vec2(double a, double b) {
    Eigen::VectorXd v(2);
    v << a, b;
    return v;
}

}  // namespace

TEST_CASE("fit_gaussian computes mean and unbiased covariance") {
    SECTION("hand case: (0,0) and (2,2)") {
        auto stats = fit_gaussian({vec2(0, 0), vec2(2, 2)});
        REQUIRE(stats.mu(0) == Approx(1.0));
        REQUIRE(stats.mu(1) == Approx(1.0));
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c) REQUIRE(stats.sigma(r, c) == Approx(2.0));
        REQUIRE(stats.n == 2);
    }
    SECTION("identical vectors give zero covariance") {
        auto stats = fit_gaussian({vec2(3, -1), vec2(3, -1), vec2(3, -1)});
        REQUIRE(stats.sigma.norm() == 0.0);
    }
    SECTION("dim mismatch errors") {
        Eigen::VectorXd v3(3);
        v3 << 1, 2, 3;
        REQUIRE_THROWS_AS(fit_gaussian({vec2(0, 0), v3}), contract_error);
    }
    SECTION("fewer than 2 vectors errors") {
        REQUIRE_THROWS_AS(fit_gaussian({vec2(0, 0)}), contract_error);
    }
}

TEST_CASE("fid matches scalar closed forms") {
    auto mk = [](double mu, double var) {
        FeatureStats s;
        s.mu = Eigen::VectorXd::Constant(1, mu);
        s.sigma = Eigen::MatrixXd::Constant(1, 1, var);
        s.n = 10;
        return s;
    };
    SECTION("identical stats give exactly zero") {
        auto a = mk(0.3, 1.7);
        REQUIRE(fid(a, a) == 0.0);
    }
    SECTION("mu 0 vs 1, unit variances -> 1") {
        REQUIRE(fid(mk(0, 1), mk(1, 1)) == Approx(1.0).margin(1e-9));
    }
    SECTION("equal means, variances 4 and 1 -> 1") {
        REQUIRE(fid(mk(0, 4), mk(0, 1)) == Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("fid matches the diagonal-covariance closed form within 1e-9") {
    // closed form for diagonal covariances:
    // sum_i (mu_a - mu_b)^2 + a_i + b_i - 2 sqrt(a_i b_i)
    Rng rng(13);
    for (int trial = 0; trial < 5; ++trial) {
        int d = 6;
        Eigen::VectorXd mua(d), mub(d), va(d), vb(d);
        for (int i = 0; i < d; ++i) {
            mua(i) = rng.gaussian();
            mub(i) = rng.gaussian();
            va(i) = 0.2 + rng.uniform() * 2.0;
            vb(i) = 0.2 + rng.uniform() * 2.0;
        }
        FeatureStats a, b;
        a.mu = mua;
        a.sigma = va.asDiagonal();
        a.n = b.n = 8;
        b.mu = mub;
        b.sigma = vb.asDiagonal();
        double expect = (mua - mub).squaredNorm();
        for (int i = 0; i < d; ++i) expect += va(i) + vb(i) - 2.0 * std::sqrt(va(i) * vb(i));
        REQUIRE(fid(a, b) == Approx(expect).margin(1e-9));
    }
}

TEST_CASE("fid is symmetric and non-negative on random PSD stats") {
    Rng rng(29);
    for (int trial = 0; trial < 4; ++trial) {
        int d = 5;
        std::vector<Eigen::VectorXd> fa, fb;
        for (int i = 0; i < 12; ++i) {
            Eigen::VectorXd v(d), u(d);
            for (int k = 0; k < d; ++k) {
                v(k) = rng.gaussian();
                u(k) = rng.gaussian() * 1.3 + 0.2;
            }
            fa.push_back(v);
            fb.push_back(u);
        }
        auto a = fit_gaussian(fa);
        auto b = fit_gaussian(fb);
        double ab = fid(a, b), ba = fid(b, a);
        REQUIRE(ab >= 0.0);
        REQUIRE(ab == Approx(ba).margin(1e-9));
    }
}

TEST_CASE("fid rejects clearly non-PSD input") {
    FeatureStats a, b;
    a.mu = b.mu = Eigen::VectorXd::Zero(2);
    a.sigma = Eigen::MatrixXd::Identity(2, 2);
    b.sigma = Eigen::MatrixXd::Identity(2, 2);
    b.sigma(0, 0) = -0.5;
    REQUIRE_THROWS_AS(fid(b, a), contract_error);
}

TEST_CASE("stats merge matches a single-pass fit and associates") {
    Rng rng(31);
    std::vector<Eigen::VectorXd> all;
    for (int i = 0; i < 30; ++i) {
        Eigen::VectorXd v(4);
        for (int k = 0; k < 4; ++k) v(k) = rng.gaussian() * (k + 1);
        all.push_back(v);
    }
    auto whole = fit_gaussian(all);
    auto p1 = fit_gaussian({all.begin(), all.begin() + 10});
    auto p2 = fit_gaussian({all.begin() + 10, all.begin() + 18});
    auto p3 = fit_gaussian({all.begin() + 18, all.end()});

    auto left = merge(merge(p1, p2), p3);
    auto right = merge(p1, merge(p2, p3));
    REQUIRE((left.mu - whole.mu).norm() < 1e-10);
    REQUIRE((left.sigma - whole.sigma).norm() < 1e-10);
    REQUIRE((left.mu - right.mu).norm() < 1e-10);
    REQUIRE((left.sigma - right.sigma).norm() < 1e-10);
    REQUIRE(left.n == 30);
}

TEST_CASE("desk feature extractor is deterministic with dim 128") {
    Rng rng(41);
    auto img = Tensor<float>::randn({32, 32}, rng, 0.4);
    auto f1 = desk_features(img);
    auto f2 = desk_features(img);
    REQUIRE(f1.size() == 128);
    REQUIRE((f1 - f2).norm() == 0.0);

    SECTION("permuting image order permutes features identically") {
        auto img2 = Tensor<float>::randn({32, 32}, rng, 0.4);
        auto fwd = feature_extract({img, img2});
        auto rev = feature_extract({img2, img});
        REQUIRE((fwd[0] - rev[1]).norm() == 0.0);
        REQUIRE((fwd[1] - rev[0]).norm() == 0.0);
    }
}

TEST_CASE("ssim basics") {
    Rng rng(43);
    auto x = Tensor<float>::randn({16, 16}, rng, 0.3);
    auto y = Tensor<float>::randn({16, 16}, rng, 0.3);

    REQUIRE(ssim(x, x) == Approx(1.0).margin(1e-12));
    REQUIRE(ssim(x, y) == Approx(ssim(y, x)).margin(1e-12));
    REQUIRE(ssim(x, y) >= -1.0);
    REQUIRE(ssim(x, y) <= 1.0);

    SECTION("constant images reduce to the luminance term") {
        ImageF a({8, 8}, 0.0f), b({8, 8}, 1.0f);
        double c1 = std::pow(0.01 * 2.0, 2);
        REQUIRE(ssim(a, b) == Approx(c1 / (1.0 + c1)).epsilon(1e-9));
    }
    SECTION("shape mismatch and oversized window error") {
        ImageF small({4, 4});
        REQUIRE_THROWS_AS(ssim(x, small), contract_error);
        REQUIRE_THROWS_AS(ssim(small, small, 7), contract_error);
    }
}

TEST_CASE("ssim matches the independent double-precision oracle within 1e-9") {
    Rng rng(47);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = Tensor<float>::randn({12, 14}, rng, 0.5);
        auto y = Tensor<float>::randn({12, 14}, rng, 0.5);
        REQUIRE(ssim(x, y) == Approx(ssim_oracle(x, y)).margin(1e-9));
    }
}

TEST_CASE("contralateral_ssim reflects the mask box across the midline") {
    SECTION("perfectly symmetric slice scores 1 for any mask") {
        ImageF img({16, 16});
        Rng rng(51);
        for (i64 r = 0; r < 16; ++r)
            for (i64 c = 0; c < 8; ++c) {
                float v = static_cast<float>(rng.gaussian() * 0.4);
                img.at(r, c) = v;
                img.at(r, 15 - c) = v;
            }
        MaskU8 mask({16, 16});
        for (i64 r = 3; r < 10; ++r)
            for (i64 c = 2; c < 7; ++c) mask.at(r, c) = 1;
        REQUIRE(contralateral_ssim(img, mask) == Approx(1.0).margin(1e-9));
    }
    SECTION("patch replaced by its own mirror scores 1") {
        Rng rng(53);
        auto img = Tensor<float>::randn({16, 16}, rng, 0.4);
        MaskU8 mask({16, 16});
        for (i64 r = 4; r < 11; ++r)
            for (i64 c = 1; c < 8; ++c) mask.at(r, c) = 1;
        for (i64 r = 4; r < 11; ++r)
            for (i64 c = 1; c < 8; ++c) img.at(r, c) = img.at(r, 15 - c);
        REQUIRE(contralateral_ssim(img, mask) == Approx(1.0).margin(1e-9));
    }
    SECTION("asymmetric phantom matches the direct crop computation") {
        Rng rng(55);
        auto img = Tensor<float>::randn({20, 20}, rng, 0.5);
        MaskU8 mask({20, 20});
        for (i64 r = 5; r < 13; ++r)
            for (i64 c = 2; c < 9; ++c) mask.at(r, c) = 1;
        ImageF crop({8, 7}), mirror({8, 7});
        for (i64 r = 0; r < 8; ++r)
            for (i64 c = 0; c < 7; ++c) {
                crop.at(r, c) = img.at(5 + r, 2 + c);
                mirror.at(r, c) = img.at(5 + r, 19 - (2 + c));
            }
        REQUIRE(contralateral_ssim(img, mask) ==
                Approx(ssim_oracle(crop, mirror)).margin(1e-9));
    }
    SECTION("empty mask errors, midline crossing warns") {
        ImageF img({16, 16});
        MaskU8 empty({16, 16});
        REQUIRE_THROWS_AS(contralateral_ssim(img, empty), contract_error);

        MaskU8 crossing({16, 16});
        for (i64 c = 5; c < 12; ++c) crossing.at(8, c) = 1;
        for (i64 r = 4; r < 12; ++r)
            for (i64 c = 4; c < 12; ++c) crossing.at(r, c) = 1;
        bool crossed = false;
        contralateral_ssim(img, crossing, 7, &crossed);
        REQUIRE(crossed);
    }
}

TEST_CASE("fp_rate is the exact flagged fraction") {
    SECTION("detector that flags nothing gives 0") {
        std::vector<ImageF> slices(5, ImageF({8, 8}));
        auto res = fp_rate(slices, [](const ImageF&) { return false; });
        REQUIRE(res.rate == 0.0);
        REQUIRE(res.flagged == 0);
        REQUIRE(res.total == 5);
    }
    SECTION("2 flagged of 28") {
        std::vector<ImageF> slices;
        for (int i = 0; i < 28; ++i) {
            ImageF s({4, 4});
            s.data[0] = (i == 3 || i == 17) ? 1.0f : 0.0f;
            slices.push_back(s);
        }
        auto res = fp_rate(slices, [](const ImageF& s) { return s.data[0] > 0.5f; });
        REQUIRE(res.flagged == 2);
        REQUIRE(res.rate == Approx(2.0 / 28.0).epsilon(1e-12));
        // numerator/denominator reconstructible from verdicts
        i64 n = 0;
        for (bool v : res.verdicts) n += v ? 1 : 0;
        REQUIRE(n == res.flagged);
        REQUIRE(static_cast<i64>(res.verdicts.size()) == res.total);
    }
    SECTION("empty set errors") {
        REQUIRE_THROWS_AS(fp_rate({}, [](const ImageF&) { return false; }), contract_error);
    }
}

TEST_CASE("threshold detector flags a bright desk-scale blob") {
    ThresholdDetector det;
    det.patch = 8;
    det.percentile = 60.0;
    det.margin = 0.3;

    ImageF clean({64, 64}, -0.2f);
    for (i64 r = 0; r < 64; ++r)
        for (i64 c = 0; c < 64; ++c)
            clean.at(r, c) += static_cast<float>(0.1 * std::sin(0.2 * r) * std::cos(0.2 * c));
    REQUIRE_FALSE(det(clean));

    auto blobbed = clean;
    for (i64 r = 20; r < 32; ++r)
        for (i64 c = 12; c < 24; ++c) blobbed.at(r, c) = 0.9f;
    REQUIRE(det(blobbed));
}

TEST_CASE("eval report round-trips through json") {
    EvalReport r;
    r.fid = 12.5;
    r.ssim_mean = 0.81;
    r.fp_rate = 0.125;
    r.config_hash = "deadbeef01234567";
    r.per_slice.push_back({"s1_080", 0.9, false});
    r.per_slice.push_back({"s2_081", 0.7, true});
    auto j = r.to_json();
    auto back = EvalReport::from_json(j);
    REQUIRE(back.fid == r.fid);
    REQUIRE(back.per_slice.size() == 2);
    REQUIRE(back.per_slice[1].detector_verdict);
    REQUIRE(j.dump() == back.to_json().dump());
}
