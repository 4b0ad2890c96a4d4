#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phr/common.hpp"
#include "phr/tensor.hpp"

namespace phr {

/// Gaussian fit of a feature set: sample mean and unbiased covariance.
struct FeatureStats {
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
    i64 n = 0;
};

inline FeatureStats fit_gaussian(const std::vector<Eigen::VectorXd>& features) {
    require(features.size() >= 2, "fit_gaussian: need at least 2 vectors");
    i64 d = features.front().size();
    for (const auto& f : features) require(f.size() == d, "fit_gaussian: dim mismatch");
    i64 n = static_cast<i64>(features.size());
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    for (const auto& f : features) mu += f;
    mu /= static_cast<double>(n);
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(d, d);
    for (const auto& f : features) {
        Eigen::VectorXd c = f - mu;
        sigma += c * c.transpose();
    }
    sigma /= static_cast<double>(n - 1);
    FeatureStats out;
    out.mu = std::move(mu);
    out.sigma = std::move(sigma);
    out.n = n;
    return out;
}

/// Pairwise mean/covariance combine; associative up to round-off, so feature
/// accumulation can run in parallel chunks.
inline FeatureStats merge(const FeatureStats& a, const FeatureStats& b) {
    require(a.mu.size() == b.mu.size(), "merge: dim mismatch");
    FeatureStats out;
    out.n = a.n + b.n;
    double na = static_cast<double>(a.n), nb = static_cast<double>(b.n);
    double n = na + nb;
    Eigen::VectorXd delta = b.mu - a.mu;
    out.mu = a.mu + delta * (nb / n);
    Eigen::MatrixXd m2 = a.sigma * (na - 1.0) + b.sigma * (nb - 1.0) +
                         (delta * delta.transpose()) * (na * nb / n);
    out.sigma = m2 / (n - 1.0);
    return out;
}

/// Frechet distance between two Gaussian fits. The matrix square root of
/// sigma_r * sigma_g is evaluated through the symmetric product
/// sigma_r^{1/2} sigma_g sigma_r^{1/2}, whose eigenvalues are clamped at a
/// -1e-8 tolerance.
inline double fid(const FeatureStats& a, const FeatureStats& b) {
    require(a.mu.size() == b.mu.size(), "fid: dim mismatch");
    const double tol = 1e-8;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(a.sigma);
    Eigen::VectorXd ev = es_a.eigenvalues();
    double scale_a = std::max(1.0, std::abs(ev.maxCoeff()));
    for (i64 i = 0; i < ev.size(); ++i) {
        require(ev[i] > -tol * scale_a, "fid: covariance not PSD beyond tolerance");
        ev[i] = std::max(ev[i], 0.0);
    }
    Eigen::MatrixXd sqrt_a =
        es_a.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es_a.eigenvectors().transpose();

    Eigen::MatrixXd inner = sqrt_a * b.sigma * sqrt_a;
    inner = 0.5 * (inner + inner.transpose());  // re-symmetrize round-off
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m(inner);
    Eigen::VectorXd mv = es_m.eigenvalues();
    double scale_m = std::max(1.0, std::abs(mv.maxCoeff()));
    double tr_sqrt = 0.0;
    for (i64 i = 0; i < mv.size(); ++i) {
        require(mv[i] > -tol * scale_m, "fid: product matrix not PSD beyond tolerance");
        tr_sqrt += std::sqrt(std::max(mv[i], 0.0));
    }

    double d2 = (a.mu - b.mu).squaredNorm();
    double value = d2 + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
    require(value >= -1e-6, "fid: negative beyond tolerance");
    return std::max(value, 0.0);
}

// ---------------------------------------------------------------------------

/// Deterministic, weight-free feature extractor for desk-scale FID: a 64-bin
/// intensity histogram over [-1,1] concatenated with an 8x8 box-downsampled
/// view. Not comparable to FID values from pretrained extractors.
inline Eigen::VectorXd desk_features(const ImageF& image) {
    require(image.rank() == 2, "desk_features: expected 2-D image");
    const int bins = 64, pool = 8;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(bins + pool * pool);
    i64 h = image.dim(0), w = image.dim(1);
    double inv_n = 1.0 / static_cast<double>(h * w);
    for (float v : image.data) {
        int b = static_cast<int>((static_cast<double>(v) + 1.0) * 0.5 * bins);
        b = std::clamp(b, 0, bins - 1);
        out[b] += inv_n;
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(pool, pool);
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(pool, pool);
    for (i64 r = 0; r < h; ++r)
        for (i64 c = 0; c < w; ++c) {
            i64 pr = r * pool / h, pc = c * pool / w;
            sums(pr, pc) += image.at(r, c);
            counts(pr, pc) += 1.0;
        }
    for (int r = 0; r < pool; ++r)
        for (int c = 0; c < pool; ++c) out[bins + r * pool + c] = sums(r, c) / counts(r, c);
    return out;
}

inline std::vector<Eigen::VectorXd> feature_extract(const std::vector<ImageF>& images) {
    std::vector<Eigen::VectorXd> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(desk_features(img));
    return out;
}

// ---------------------------------------------------------------------------

/// Mean local SSIM with a uniform window. Inputs are expected in [-1,1]
/// (dynamic range L = 2); constants use the standard 0.01/0.03 factors.
inline double ssim(const ImageF& x, const ImageF& y, i64 window = 7, double L = 2.0) {
    require(x.same_shape(y), "ssim: shape mismatch");
    require(x.rank() == 2, "ssim: expected 2-D images");
    i64 h = x.dim(0), w = x.dim(1);
    require(window <= h && window <= w, "ssim: window larger than image");
    const double c1 = (0.01 * L) * (0.01 * L);
    const double c2 = (0.03 * L) * (0.03 * L);
    const double inv_m = 1.0 / static_cast<double>(window * window);

    double acc = 0.0;
    i64 cnt = 0;
    for (i64 r = 0; r + window <= h; ++r)
        for (i64 c = 0; c + window <= w; ++c) {
            double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
            for (i64 dr = 0; dr < window; ++dr)
                for (i64 dc = 0; dc < window; ++dc) {
                    double xv = x.at(r + dr, c + dc);
                    double yv = y.at(r + dr, c + dc);
                    sx += xv;
                    sy += yv;
                    sxx += xv * xv;
                    syy += yv * yv;
                    sxy += xv * yv;
                }
            double mx = sx * inv_m, my = sy * inv_m;
            double vx = sxx * inv_m - mx * mx;
            double vy = syy * inv_m - my * my;
            double cxy = sxy * inv_m - mx * my;
            double val = ((2 * mx * my + c1) * (2 * cxy + c2)) /
                         ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc += val;
            ++cnt;
        }
    return acc / static_cast<double>(cnt);
}

/// SSIM between the mask's bounding-box crop and its left-right reflection
/// about the image midline (the reflected crop is flipped so anatomy aligns).
/// The box is grown to the SSIM window when the mask is tiny.
inline double contralateral_ssim(const ImageF& slice, const MaskU8& mask, i64 window = 7,
                                 bool* crossed_midline = nullptr) {
    require(slice.rank() == 2 && mask.shape == slice.shape, "contralateral_ssim: shape");
    i64 h = slice.dim(0), w = slice.dim(1);
    i64 r0 = h, r1 = -1, c0 = w, c1 = -1;
    for (i64 r = 0; r < h; ++r)
        for (i64 c = 0; c < w; ++c)
            if (mask.at(r, c)) {
                r0 = std::min(r0, r);
                r1 = std::max(r1, r);
                c0 = std::min(c0, c);
                c1 = std::max(c1, c);
            }
    require(r1 >= 0, "contralateral_ssim: empty mask");

    i64 mid2 = w - 1;  // reflection: c -> w-1-c
    bool crosses = (c0 < (w + 1) / 2) != (c1 < (w + 1) / 2);
    if (crossed_midline) *crossed_midline = crosses;

    auto grow = [](i64& lo, i64& hi, i64 min_size, i64 limit) {
        while (hi - lo + 1 < min_size) {
            if (lo > 0) --lo;
            if (hi - lo + 1 < min_size && hi < limit - 1) ++hi;
            if (lo == 0 && hi == limit - 1) break;
        }
    };
    grow(r0, r1, window, h);
    grow(c0, c1, window, w);

    i64 rc0 = mid2 - c1, rc1 = mid2 - c0;
    require(rc0 >= 0 && rc1 < w, "contralateral_ssim: reflected box out of bounds");

    i64 bh = r1 - r0 + 1, bw = c1 - c0 + 1;
    ImageF crop({bh, bw}), mirror({bh, bw});
    for (i64 r = 0; r < bh; ++r)
        for (i64 c = 0; c < bw; ++c) {
            crop.at(r, c) = slice.at(r0 + r, c0 + c);
            // flipped read of the reflected box aligns mirrored anatomy
            mirror.at(r, c) = slice.at(r0 + r, mid2 - (c0 + c));
        }
    return ssim(crop, mirror, window);
}

// ---------------------------------------------------------------------------

using TumorDetector = std::function<bool(const ImageF&)>;

/// Desk tumor detector: flags a slice when some patch's mean intensity
/// exceeds the slice's percentile by a margin. All knobs configurable; the
/// full-scale pipeline plugs a segmentation model behind the same signature.
struct ThresholdDetector {
    i64 patch = 20;
    double percentile = 99.0;
    double margin = 0.1;

    bool operator()(const ImageF& slice) const {
        i64 h = slice.dim(0), w = slice.dim(1);
        if (patch > h || patch > w) return false;
        std::vector<float> sorted(slice.data.begin(), slice.data.end());
        std::sort(sorted.begin(), sorted.end());
        double pos = (static_cast<double>(sorted.size()) - 1.0) * percentile / 100.0;
        auto lo = static_cast<std::size_t>(pos);
        double frac = pos - static_cast<double>(lo);
        double thresh = (lo + 1 < sorted.size())
                            ? sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
                            : sorted.back();
        double inv_m = 1.0 / static_cast<double>(patch * patch);
        for (i64 r = 0; r + patch <= h; ++r)
            for (i64 c = 0; c + patch <= w; ++c) {
                double sum = 0;
                for (i64 dr = 0; dr < patch; ++dr)
                    for (i64 dc = 0; dc < patch; ++dc) sum += slice.at(r + dr, c + dc);
                if (sum * inv_m > thresh + margin) return true;
            }
        return false;
    }
};

struct FpRateResult {
    double rate = 0.0;
    i64 flagged = 0;
    i64 total = 0;
    std::vector<bool> verdicts;
};

inline FpRateResult fp_rate(const std::vector<ImageF>& slices, const TumorDetector& detector) {
    require(!slices.empty(), "fp_rate: empty set");
    require(static_cast<bool>(detector), "fp_rate: detector not configured");
    FpRateResult out;
    out.total = static_cast<i64>(slices.size());
    for (const auto& s : slices) {
        bool flag = detector(s);
        out.verdicts.push_back(flag);
        if (flag) ++out.flagged;
    }
    out.rate = static_cast<double>(out.flagged) / static_cast<double>(out.total);
    return out;
}

// ---------------------------------------------------------------------------

struct PerSliceEval {
    std::string id;
    double ssim = 0.0;
    bool detector_verdict = false;
};

struct EvalReport {
    double fid = 0.0;
    bool fid_defined = true;  // false when the generated set is too small
    double ssim_mean = 0.0;
    double fp_rate = 0.0;
    std::vector<PerSliceEval> per_slice;
    std::string config_hash;

    nlohmann::json to_json() const {
        nlohmann::json j;
        if (fid_defined) j["fid"] = fid;
        else j["fid"] = nullptr;
        j["ssim_mean"] = ssim_mean;
        j["fp_rate"] = fp_rate;
        j["config_hash"] = config_hash;
        j["per_slice"] = nlohmann::json::array();
        for (const auto& p : per_slice)
            j["per_slice"].push_back(
                {{"id", p.id}, {"ssim", p.ssim}, {"detector_verdict", p.detector_verdict}});
        return j;
    }

    static EvalReport from_json(const nlohmann::json& j) {
        EvalReport r;
        if (j.at("fid").is_null()) {
            r.fid_defined = false;
            r.fid = 0.0;
        } else {
            r.fid = j.at("fid").get<double>();
        }
        r.ssim_mean = j.at("ssim_mean").get<double>();
        r.fp_rate = j.at("fp_rate").get<double>();
        r.config_hash = j.at("config_hash").get<std::string>();
        for (const auto& p : j.at("per_slice")) {
            PerSliceEval e;
            e.id = p.at("id").get<std::string>();
            e.ssim = p.at("ssim").get<double>();
            e.detector_verdict = p.at("detector_verdict").get<bool>();
            r.per_slice.push_back(std::move(e));
        }
        return r;
    }
};

}  // namespace phr
