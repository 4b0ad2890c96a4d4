#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phr/common.hpp"
#include "phr/nifti.hpp"
#include "phr/rng.hpp"
#include "phr/tensor.hpp"

namespace phr {

enum class SliceClass { non_tumorous, tumorous, excluded };

inline const char* to_string(SliceClass c) {
    switch (c) {
        case SliceClass::non_tumorous: return "non_tumorous";
        case SliceClass::tumorous: return "tumorous";
        default: return "excluded";
    }
}

inline SliceClass slice_class_from_string(const std::string& s) {
    if (s == "non_tumorous") return SliceClass::non_tumorous;
    if (s == "tumorous") return SliceClass::tumorous;
    if (s == "excluded") return SliceClass::excluded;
    throw contract_error("unknown slice class: " + s);
}

/// One tumor-segmented MRI volume plus identity metadata.
struct Volume {
    Tensor<float> voxels;  // {nz, ny, nx}
    Tensor<int> seg;       // same dims, labels >= 0
    std::string subject_id;
    std::string modality = "t1ce";
    std::optional<double> age;

    i64 axial_extent() const { return voxels.dim(0); }
};

/// One preprocessed 2-D slice with masks, identity and class label.
struct SliceRecord {
    ImageF image;        // values in [-1, 1]
    MaskU8 tumor_mask;   // 1 = tumor
    MaskU8 inpaint_mask; // 1 = region to reconstruct
    std::string subject_id;
    i64 slice_index = 0;
    SliceClass slice_class = SliceClass::excluded;
    i64 tumor_pixel_count = 0;
    std::optional<double> age;
};

struct SplitManifest {
    std::set<std::string> train_subjects;
    std::set<std::string> test_subjects;
    u64 seed = 0;
    // per-class slice counts: {train_tumorous, train_non, test_tumorous, test_non}
    i64 train_tumorous = 0, train_non_tumorous = 0;
    i64 test_tumorous = 0, test_non_tumorous = 0;
};

// ---------------------------------------------------------------------------

/// Loads a BraTS-convention volume. `path` points to the image file
/// (<id>_t1ce.nii[.gz]); the segmentation is found by substituting the
/// modality suffix with _seg, and an optional <id>_meta.json sidecar may
/// carry the subject age.
inline Volume load_volume(const std::string& path) {
    namespace fs = std::filesystem;
    if (!fs::exists(path)) throw io_error("volume file does not exist: " + path);

    std::string seg_path = path;
    auto pos = seg_path.find("_t1ce");
    if (pos == std::string::npos)
        throw io_error("expected BraTS naming <id>_t1ce.nii[.gz]: " + path);
    seg_path.replace(pos, 5, "_seg");
    if (!fs::exists(seg_path)) throw io_error("segmentation file does not exist: " + seg_path);

    auto img = read_nifti(path);
    auto seg = read_nifti(seg_path);
    if (img.voxels.shape != seg.voxels.shape)
        throw io_error("dimension mismatch between voxels and seg for " + path);

    Volume vol;
    vol.voxels = std::move(img.voxels);
    vol.seg = Tensor<int>(vol.voxels.shape);
    for (std::size_t i = 0; i < seg.voxels.data.size(); ++i) {
        float v = seg.voxels.data[i];
        float r = std::round(v);
        if (std::abs(v - r) > 1e-4f || r < 0.0f)
            throw io_error("segmentation labels must be non-negative integers: " + seg_path);
        vol.seg.data[i] = static_cast<int>(r);
    }

    std::string stem = fs::path(path).filename().string();
    stem = stem.substr(0, stem.find("_t1ce"));
    vol.subject_id = stem;

    std::string meta_path = (fs::path(path).parent_path() / (stem + "_meta.json")).string();
    if (fs::exists(meta_path)) {
        std::ifstream in(meta_path);
        nlohmann::json j;
        in >> j;
        if (j.contains("age") && !j["age"].is_null()) vol.age = j["age"].get<double>();
    }
    return vol;
}

/// Collapses all positive tumor sub-region labels into one binary mask.
inline MaskU8 merge_tumor_labels(const Tensor<int>& seg_slice) {
    require(seg_slice.rank() == 2, "merge_tumor_labels: expected 2-D slice");
    MaskU8 out(seg_slice.shape);
    for (std::size_t i = 0; i < seg_slice.data.size(); ++i) {
        require(seg_slice.data[i] >= 0, "merge_tumor_labels: negative label");
        out.data[i] = seg_slice.data[i] > 0 ? 1 : 0;
    }
    return out;
}

struct RawSlicePair {
    ImageF image;      // {ny, nx}, raw intensities
    Tensor<int> seg;   // {ny, nx}
    i64 slice_index = 0;
};

/// Extracts axial slices lo..hi inclusive.
inline std::vector<RawSlicePair> extract_slices(const Volume& vol, i64 lo = 80, i64 hi = 130) {
    require(lo >= 0 && lo < hi, "extract_slices: need 0 <= lo < hi");
    require(hi < vol.axial_extent(), "extract_slices: range exceeds axial extent");
    i64 ny = vol.voxels.dim(1), nx = vol.voxels.dim(2);
    std::vector<RawSlicePair> out;
    out.reserve(static_cast<std::size_t>(hi - lo + 1));
    for (i64 z = lo; z <= hi; ++z) {
        RawSlicePair p;
        p.slice_index = z;
        p.image = ImageF({ny, nx});
        p.seg = Tensor<int>({ny, nx});
        std::copy_n(vol.voxels.ptr() + z * ny * nx, ny * nx, p.image.ptr());
        std::copy_n(vol.seg.ptr() + z * ny * nx, ny * nx, p.seg.ptr());
        out.push_back(std::move(p));
    }
    return out;
}

/// Percentile of the slice's non-zero intensities (linear interpolation on
/// the sorted values). Exposed for the preprocessing oracle tests.
inline double nonzero_percentile(const ImageF& slice, double pct) {
    std::vector<float> vals;
    vals.reserve(slice.data.size());
    for (float v : slice.data)
        if (v != 0.0f) vals.push_back(v);
    if (vals.empty()) return 0.0;
    std::sort(vals.begin(), vals.end());
    double pos = (static_cast<double>(vals.size()) - 1.0) * pct / 100.0;
    auto lo = static_cast<std::size_t>(pos);
    double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= vals.size()) return vals.back();
    return vals[lo] + frac * (vals[lo + 1] - vals[lo]);
}

/// Clip at the pct-percentile of non-zero intensities, scale to [0,1], then
/// map to [-1,1]. All-zero slices map to constant -1.
inline ImageF clip_and_normalize(const ImageF& slice, double pct = 99.5) {
    ImageF out(slice.shape);
    double clip = nonzero_percentile(slice, pct);
    if (clip <= 0.0) {
        out.fill(-1.0f);
        return out;
    }
    for (std::size_t i = 0; i < slice.data.size(); ++i) {
        double v = slice.data[i];
        v = std::clamp(v, 0.0, clip);
        v = v / clip;            // [0, 1]
        out.data[i] = static_cast<float>(2.0 * v - 1.0);
    }
    return out;
}

namespace detail {
template <class T>
Tensor<T> pad_center(const Tensor<T>& in, i64 pad_to, T fill) {
    i64 h = in.dim(0), w = in.dim(1);
    require(h <= pad_to && w <= pad_to, "pad: slice larger than pad_to");
    Tensor<T> out({pad_to, pad_to}, fill);
    i64 r0 = (pad_to - h) / 2, c0 = (pad_to - w) / 2;
    for (i64 r = 0; r < h; ++r)
        for (i64 c = 0; c < w; ++c) out.at(r0 + r, c0 + c) = in.at(r, c);
    return out;
}

template <class T>
Tensor<T> resize_nearest(const Tensor<T>& in, i64 out_size) {
    i64 h = in.dim(0), w = in.dim(1);
    Tensor<T> out({out_size, out_size});
    for (i64 r = 0; r < out_size; ++r) {
        i64 sr = r * h / out_size;
        for (i64 c = 0; c < out_size; ++c) out.at(r, c) = in.at(sr, c * w / out_size);
    }
    return out;
}
}  // namespace detail

/// Centered zero-padding to pad_to x pad_to, then nearest-neighbor resize to
/// out x out. Zero here means the background value of the input domain: raw
/// slices pad with 0, normalized [-1,1] slices pad with -1.
template <class T>
Tensor<T> pad_and_resize(const Tensor<T>& slice, i64 pad_to = 256, i64 out = 512,
                         T pad_value = T(0)) {
    require(slice.rank() == 2, "pad_and_resize: expected 2-D slice");
    auto padded = detail::pad_center(slice, pad_to, pad_value);
    if (out == pad_to) return padded;
    return detail::resize_nearest(padded, out);
}

/// Class boundaries are inclusive: count in [lo_px, hi_px] is tumorous,
/// zero is non-tumorous, anything else is excluded.
inline SliceClass categorize_slice(i64 tumor_pixel_count, i64 lo_px = 1000, i64 hi_px = 3000) {
    require(tumor_pixel_count >= 0, "categorize_slice: negative count");
    if (tumor_pixel_count == 0) return SliceClass::non_tumorous;
    if (tumor_pixel_count >= lo_px && tumor_pixel_count <= hi_px) return SliceClass::tumorous;
    return SliceClass::excluded;
}

/// Morphological dilation: `radius` iterations of a 3x3 cross element,
/// i.e. the city-block ball of that radius.
inline MaskU8 dilate_mask(const MaskU8& mask, i64 radius = 5) {
    require(mask.rank() == 2, "dilate_mask: expected 2-D mask");
    i64 h = mask.dim(0), w = mask.dim(1);
    MaskU8 cur = mask;
    MaskU8 next(mask.shape);
    for (i64 it = 0; it < radius; ++it) {
        for (i64 r = 0; r < h; ++r)
            for (i64 c = 0; c < w; ++c) {
                u8 v = cur.at(r, c);
                if (!v && r > 0) v = cur.at(r - 1, c);
                if (!v && r + 1 < h) v = cur.at(r + 1, c);
                if (!v && c > 0) v = cur.at(r, c - 1);
                if (!v && c + 1 < w) v = cur.at(r, c + 1);
                next.at(r, c) = v;
            }
        std::swap(cur, next);
    }
    return cur;
}

/// Pool of tumorous records indexed by slice_index, for mask borrowing.
class TumorMaskPool {
public:
    void add(i64 slice_index, const MaskU8& inpaint_mask) {
        by_index_[slice_index].push_back(inpaint_mask);
    }
    bool empty() const { return by_index_.empty(); }

    /// Uniform draw among masks at `slice_index`; falls back to the nearest
    /// populated index (ties resolved toward the lower index). `used_index`
    /// reports where the mask actually came from.
    MaskU8 borrow(i64 slice_index, Rng& rng, i64* used_index = nullptr) const {
        require(!by_index_.empty(), "borrow_mask: empty tumor pool");
        i64 best = nearest_index(slice_index);
        const auto& v = by_index_.at(best);
        auto pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<i64>(v.size()) - 1));
        if (used_index) *used_index = best;
        return v[pick];
    }

    i64 nearest_index(i64 slice_index) const {
        i64 best = 0;
        i64 best_dist = -1;
        for (const auto& [idx, masks] : by_index_) {
            i64 d = std::abs(idx - slice_index);
            if (best_dist < 0 || d < best_dist || (d == best_dist && idx < best)) {
                best = idx;
                best_dist = d;
            }
        }
        return best;
    }

private:
    std::map<i64, std::vector<MaskU8>> by_index_;
};

/// Assigns a borrowed (already dilated) inpaint mask to a non-tumorous record.
inline MaskU8 borrow_mask(const SliceRecord& record, const TumorMaskPool& pool, Rng& rng,
                          i64* used_index = nullptr) {
    require(record.slice_class == SliceClass::non_tumorous,
            "borrow_mask: record must be non-tumorous");
    return pool.borrow(record.slice_index, rng, used_index);
}

/// Subject-level split with light stratification: several seeded candidate
/// splits are scored on the train/test tumorous ratio gap and the best is
/// kept (early exit once within 2 percentage points).
inline SplitManifest subject_split(const std::vector<SliceRecord>& records, double ratio,
                                   u64 seed) {
    std::map<std::string, std::pair<i64, i64>> per_subject;  // tumorous, non_tumorous
    for (const auto& r : records) {
        require(!r.subject_id.empty(), "subject_split: record without subject_id");
        auto& p = per_subject[r.subject_id];
        if (r.slice_class == SliceClass::tumorous) p.first++;
        else if (r.slice_class == SliceClass::non_tumorous) p.second++;
    }
    require(per_subject.size() >= 2, "subject_split: need at least 2 subjects");

    std::vector<std::string> subjects;
    for (const auto& [id, _] : per_subject) subjects.push_back(id);

    auto n_total = static_cast<i64>(subjects.size());
    i64 n_train = static_cast<i64>(std::llround(ratio * static_cast<double>(n_total)));
    n_train = std::clamp<i64>(n_train, 1, n_total - 1);

    auto ratio_of = [](i64 tum, i64 non) {
        i64 tot = tum + non;
        return tot == 0 ? 0.0 : static_cast<double>(tum) / static_cast<double>(tot);
    };

    Rng rng = Rng(seed).derive("subject_split");
    SplitManifest best;
    double best_gap = 1e9;
    for (int attempt = 0; attempt < 64; ++attempt) {
        auto shuffled = subjects;
        for (i64 i = static_cast<i64>(shuffled.size()) - 1; i > 0; --i) {
            i64 j = rng.uniform_int(0, i);
            std::swap(shuffled[static_cast<std::size_t>(i)], shuffled[static_cast<std::size_t>(j)]);
        }
        SplitManifest cand;
        cand.seed = seed;
        for (i64 i = 0; i < n_total; ++i) {
            const auto& id = shuffled[static_cast<std::size_t>(i)];
            const auto& [tum, non] = per_subject[id];
            if (i < n_train) {
                cand.train_subjects.insert(id);
                cand.train_tumorous += tum;
                cand.train_non_tumorous += non;
            } else {
                cand.test_subjects.insert(id);
                cand.test_tumorous += tum;
                cand.test_non_tumorous += non;
            }
        }
        double gap = std::abs(ratio_of(cand.train_tumorous, cand.train_non_tumorous) -
                              ratio_of(cand.test_tumorous, cand.test_non_tumorous));
        if (gap < best_gap) {
            best_gap = gap;
            best = cand;
        }
        if (best_gap <= 0.02) break;
    }
    return best;
}

}  // namespace phr
