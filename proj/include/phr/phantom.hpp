#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "phr/nifti.hpp"
#include "phr/rng.hpp"
#include "phr/tensor.hpp"

namespace phr {

// Synthetic test subjects: a left-right symmetric "anatomy" built from an
// elliptical rim, concentric interior rings and mirrored dark cavities, with
// an optional bright off-center blob playing the tumor. Intensities are raw
// scanner-like units (0 background, ~1000 peak) so the normal preprocessing
// path applies unchanged.

struct PhantomParams {
    i64 size = 64;           // in-plane resolution
    i64 nz = 16;             // axial extent
    bool with_tumor = false;
    double tumor_cx = 0.30;  // fraction of width, left hemisphere
    double tumor_cy = 0.45;
    double tumor_radius = 7.0;  // pixels at the central slice
    u64 seed = 0;               // drives the small symmetric shape variation
};

namespace detail {

struct PhantomShape {
    double rx, ry;        // brain ellipse radii (pixels)
    double fold_angle;
    double cavity_dx;     // mirrored cavity offset (fraction of rx)
};

inline PhantomShape phantom_shape(const PhantomParams& p) {
    Rng rng = Rng(p.seed).derive("phantom_shape");
    PhantomShape s;
    s.rx = 0.42 * static_cast<double>(p.size) * (0.96 + 0.08 * rng.uniform());
    s.ry = 0.46 * static_cast<double>(p.size) * (0.96 + 0.08 * rng.uniform());
    s.fold_angle = 0.35 + 0.25 * rng.uniform();
    s.cavity_dx = 0.28 + 0.06 * rng.uniform();
    return s;
}

}  // namespace detail

/// One raw phantom slice (intensities) plus its tumor segmentation labels.
inline std::pair<ImageF, Tensor<int>> phantom_slice(const PhantomParams& p, i64 z) {
    auto shape = detail::phantom_shape(p);
    i64 n = p.size;
    ImageF img({n, n}, 0.0f);
    Tensor<int> seg({n, n});

    // slices shrink toward the axial ends
    double zc = (static_cast<double>(z) + 0.5) / static_cast<double>(p.nz) - 0.5;
    double zscale = std::sqrt(std::max(0.15, 1.0 - 3.2 * zc * zc));
    double rx = shape.rx * zscale, ry = shape.ry * zscale;
    double cx = static_cast<double>(n - 1) / 2.0, cy = static_cast<double>(n - 1) / 2.0;

    for (i64 r = 0; r < n; ++r)
        for (i64 c = 0; c < n; ++c) {
            double dx = (static_cast<double>(c) - cx) / rx;
            double dy = (static_cast<double>(r) - cy) / ry;
            double rho = std::sqrt(dx * dx + dy * dy);
            if (rho > 1.0) continue;
            double v = 380.0 + 45.0 * std::cos(rho * 9.0);
            // mirrored dark cavities (|dx| keeps them symmetric)
            double ex = (std::abs(dx) - shape.cavity_dx) / 0.16;
            double ey = (dy + 0.08) / 0.26;
            if (ex * ex + ey * ey < 1.0) v = 120.0;
            // symmetric fold arcs near the rim
            double ang = std::atan2(dy, std::abs(dx));
            if (rho > 0.62 && rho < 0.72 &&
                (std::abs(ang - shape.fold_angle) < 0.22 ||
                 std::abs(ang + shape.fold_angle) < 0.22))
                v = 640.0;
            // rim
            if (rho > 0.90) v = 900.0;
            img.at(r, c) = static_cast<float>(v);
        }

    if (p.with_tumor) {
        double trad = p.tumor_radius * zscale;
        if (trad >= 1.5) {
            double tx = p.tumor_cx * static_cast<double>(n);
            double ty = p.tumor_cy * static_cast<double>(n);
            for (i64 r = 0; r < n; ++r)
                for (i64 c = 0; c < n; ++c) {
                    double d = std::hypot(static_cast<double>(c) - tx,
                                          static_cast<double>(r) - ty);
                    // tumor intensity matches the rim so both slice classes
                    // normalize against the same clip value
                    if (d <= trad) {
                        img.at(r, c) = 900.0f;
                        seg.at(r, c) = 1 + static_cast<int>(d < trad * 0.5);  // two sub-labels
                    } else if (d <= trad + 1.5) {
                        img.at(r, c) = std::max(img.at(r, c), 760.0f);
                    }
                }
        }
    }
    return {std::move(img), std::move(seg)};
}

inline Tensor<float> phantom_volume(const PhantomParams& p, Tensor<float>* seg_out) {
    Tensor<float> vox({p.nz, p.size, p.size});
    Tensor<float> seg({p.nz, p.size, p.size});
    for (i64 z = 0; z < p.nz; ++z) {
        auto [img, s] = phantom_slice(p, z);
        std::copy_n(img.ptr(), p.size * p.size, vox.ptr() + z * p.size * p.size);
        for (i64 i = 0; i < p.size * p.size; ++i)
            seg.data[static_cast<std::size_t>(z * p.size * p.size + i)] =
                static_cast<float>(s.data[static_cast<std::size_t>(i)]);
    }
    if (seg_out) *seg_out = std::move(seg);
    return vox;
}

/// Writes `n_subjects` BraTS-convention phantom subjects (image + seg + age
/// sidecar) under `dir`. Every `tumor_every`-th subject carries a tumor
/// (default: every other one); geometry varies with the per-subject seed.
inline std::vector<std::string> write_phantom_dataset(const std::string& dir, int n_subjects,
                                                      u64 seed, i64 size = 64, i64 nz = 16,
                                                      int tumor_every = 2) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    Rng rng = Rng(seed).derive("phantom_dataset");
    std::vector<std::string> ids;
    for (int s = 0; s < n_subjects; ++s) {
        PhantomParams p;
        p.size = size;
        p.nz = nz;
        p.seed = rng.next_u64();
        p.with_tumor = (s % tumor_every == 0);
        // blobs sit near the left cavity border: structured, mirrorable
        p.tumor_cx = 0.24 + 0.09 * rng.uniform();
        p.tumor_cy = 0.40 + 0.12 * rng.uniform();
        p.tumor_radius = 4.0 + 2.0 * rng.uniform();

        char buf[16];
        std::snprintf(buf, sizeof buf, "ph%03d", s);
        std::string id(buf);
        ids.push_back(id);

        Tensor<float> seg;
        auto vox = phantom_volume(p, &seg);
        write_nifti(dir + "/" + id + "_t1ce.nii.gz", vox);
        write_nifti(dir + "/" + id + "_seg.nii.gz", seg);
        nlohmann::json meta;
        meta["age"] = static_cast<double>(rng.uniform_int(30, 80));
        std::ofstream(dir + "/" + id + "_meta.json") << meta.dump() << "\n";
    }
    return ids;
}

}  // namespace phr
