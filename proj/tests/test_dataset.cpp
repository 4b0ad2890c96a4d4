#include <catch2/catch.hpp>

#include <filesystem>
#include <fstream>

#include "phr/dataset.hpp"

using namespace phr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("phr_dataset_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Brute-force oracle: a pixel is set iff some input pixel with value 1 lies
// within L1 distance <= radius.
MaskU8 dilate_oracle(const MaskU8& mask, i64 radius) {
    i64 h = mask.dim(0), w = mask.dim(1);
    MaskU8 out(mask.shape);
    for (i64 r = 0; r < h; ++r)
        for (i64 c = 0; c < w; ++c) {
            u8 v = 0;
            for (i64 rr = std::max<i64>(0, r - radius); rr <= std::min(h - 1, r + radius) && !v;
                 ++rr)
                for (i64 cc = std::max<i64>(0, c - radius); cc <= std::min(w - 1, c + radius);
                     ++cc)
                    if (std::abs(rr - r) + std::abs(cc - c) <= radius && mask.at(rr, cc)) {
                        v = 1;
                        break;
                    }
            out.at(r, c) = v;
        }
    return out;
}

// Brute-force nearest-neighbor resize oracle.
ImageF resize_oracle(const ImageF& in, i64 out_size) {
    ImageF out({out_size, out_size});
    for (i64 r = 0; r < out_size; ++r)
        for (i64 c = 0; c < out_size; ++c)
            out.at(r, c) = in.at(r * in.dim(0) / out_size, c * in.dim(1) / out_size);
    return out;
}

Volume make_volume(i64 nz, i64 ny, i64 nx, const std::string& id = "sub-001") {
    Volume v;
    v.voxels = Tensor<float>({nz, ny, nx});
    v.seg = Tensor<int>({nz, ny, nx});
    v.subject_id = id;
    return v;
}

}  // namespace

TEST_CASE("load_volume reads a BraTS-convention pair and verifies dims") {
    auto dir = temp_dir("load");
    Tensor<float> img({155, 240, 240});
    for (std::size_t i = 0; i < img.data.size(); ++i)
        img.data[i] = static_cast<float>(i % 913) * 0.5f;
    Tensor<float> seg({155, 240, 240});
    seg.data[100] = 2.0f;
    seg.data[101] = 4.0f;
    write_nifti((dir / "s1_t1ce.nii").string(), img, true);
    write_nifti((dir / "s1_seg.nii").string(), seg, true);
    std::ofstream((dir / "s1_meta.json").string()) << R"({"age": 63})";

    auto vol = load_volume((dir / "s1_t1ce.nii").string());
    REQUIRE(vol.voxels.shape == std::vector<i64>{155, 240, 240});
    REQUIRE(vol.seg.shape == vol.voxels.shape);
    REQUIRE(vol.subject_id == "s1");
    REQUIRE(vol.age.has_value());
    REQUIRE(*vol.age == Approx(63));
    REQUIRE(vol.seg.data[101] == 4);
    fs::remove_all(dir);
}

TEST_CASE("load_volume rejects dimension mismatch and fractional labels") {
    auto dir = temp_dir("load_err");
    Tensor<float> img({8, 16, 16});
    write_nifti((dir / "a_t1ce.nii").string(), img);

    SECTION("missing file") {
        REQUIRE_THROWS_AS(load_volume((dir / "nope_t1ce.nii").string()), io_error);
    }
    SECTION("dimension mismatch") {
        Tensor<float> seg({8, 16, 15});
        write_nifti((dir / "a_seg.nii").string(), seg);
        REQUIRE_THROWS_WITH(load_volume((dir / "a_t1ce.nii").string()),
                            Catch::Contains("dimension mismatch"));
    }
    SECTION("non-integer segmentation label") {
        Tensor<float> seg({8, 16, 16});
        seg.data[5] = 2.5f;
        write_nifti((dir / "a_seg.nii").string(), seg);
        REQUIRE_THROWS_WITH(load_volume((dir / "a_t1ce.nii").string()),
                            Catch::Contains("non-negative integers"));
    }
    fs::remove_all(dir);
}

TEST_CASE("load_volume reads gzipped volumes") {
    auto dir = temp_dir("gz");
    Tensor<float> img({4, 6, 5});
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i);
    Tensor<float> seg({4, 6, 5});
    write_nifti((dir / "g_t1ce.nii.gz").string(), img);
    write_nifti((dir / "g_seg.nii.gz").string(), seg);
    auto vol = load_volume((dir / "g_t1ce.nii.gz").string());
    REQUIRE(vol.voxels.data[7] == Approx(7.0f));
    fs::remove_all(dir);
}

TEST_CASE("merge_tumor_labels unions positive labels") {
    Tensor<int> seg({3, 3});
    SECTION("all zeros stays empty") {
        auto m = merge_tumor_labels(seg);
        for (u8 v : m.data) REQUIRE(v == 0);
    }
    SECTION("labels 1, 2, 4 merge into one mask") {
        seg.data = {0, 1, 0, 2, 0, 4, 0, 0, 1};
        auto m = merge_tumor_labels(seg);
        std::vector<u8> expect{0, 1, 0, 1, 0, 1, 0, 0, 1};
        REQUIRE(m.data == expect);
    }
    SECTION("single pixel of label 4") {
        seg.data[4] = 4;
        auto m = merge_tumor_labels(seg);
        i64 cnt = 0;
        for (u8 v : m.data) cnt += v;
        REQUIRE(cnt == 1);
        REQUIRE(m.data[4] == 1);
    }
}

TEST_CASE("extract_slices returns the inclusive index range") {
    auto vol = make_volume(140, 4, 4);
    SECTION("default 80..130 yields 51 slices") {
        auto slices = extract_slices(vol, 80, 130);
        REQUIRE(slices.size() == 51);
        REQUIRE(slices.front().slice_index == 80);
        REQUIRE(slices.back().slice_index == 130);
    }
    SECTION("lo = hi-1 yields 2 slices") {
        auto slices = extract_slices(vol, 10, 11);
        REQUIRE(slices.size() == 2);
    }
    SECTION("hi beyond the axial extent errors") {
        REQUIRE_THROWS_AS(extract_slices(vol, 80, 140), contract_error);
    }
}

TEST_CASE("clip_and_normalize maps into [-1, 1]") {
    SECTION("constant positive slice maps to +1") {
        ImageF s({4, 4}, 7.5f);
        auto out = clip_and_normalize(s);
        for (float v : out.data) REQUIRE(v == Approx(1.0f));
    }
    SECTION("all-zero slice maps to -1") {
        ImageF s({4, 4}, 0.0f);
        auto out = clip_and_normalize(s);
        for (float v : out.data) REQUIRE(v == Approx(-1.0f));
    }
    SECTION("values 1..1000 match the hand-computed pipeline") {
        ImageF s({20, 50});
        for (i64 i = 0; i < 1000; ++i) s.data[static_cast<std::size_t>(i)] = static_cast<float>(i + 1);
        auto out = clip_and_normalize(s, 99.5);

        // oracle: direct double-precision evaluation of the three steps
        double clip = 995.0 + 0.005 * 1.0;  // interpolated 99.5th percentile of 1..1000
        REQUIRE(nonzero_percentile(s, 99.5) == Approx(clip).epsilon(1e-12));
        for (i64 i = 0; i < 1000; ++i) {
            double v = std::min(static_cast<double>(i + 1), clip) / clip;
            REQUIRE(out.data[static_cast<std::size_t>(i)] == Approx(2.0 * v - 1.0).margin(1e-6));
        }
        REQUIRE(out.max() == Approx(1.0f));
    }
}

TEST_CASE("pad_and_resize pads centered then nearest-neighbor upscales") {
    SECTION("240x240 -> 256 pad -> 512 output") {
        ImageF s({240, 240}, 1.0f);
        auto out = pad_and_resize(s, 256, 512);
        REQUIRE(out.shape == std::vector<i64>{512, 512});
        // corners are padding
        REQUIRE(out.at(0, 0) == 0.0f);
        REQUIRE(out.at(256, 256) == 1.0f);
    }
    SECTION("input already at pad_to is unchanged by padding") {
        Rng rng(3);
        auto s = Tensor<float>::randn({16, 16}, rng);
        auto out = pad_and_resize(s, 16, 16);
        REQUIRE(bitwise_equal(s, out));
    }
    SECTION("2x2 input, pad 4, out 8 replicates pixels in 2x2 blocks") {
        ImageF s({2, 2});
        s.data = {1.f, 2.f, 3.f, 4.f};
        auto out = pad_and_resize(s, 4, 8);
        auto padded = detail::pad_center(s, i64(4), 0.0f);
        auto oracle = resize_oracle(padded, 8);
        REQUIRE(bitwise_equal(out, oracle));
        // the 2x2 source sits at padded (1,1)..(2,2) -> output rows 2..5
        REQUIRE(out.at(2, 2) == 1.f);
        REQUIRE(out.at(2, 3) == 1.f);
        REQUIRE(out.at(3, 2) == 1.f);
        REQUIRE(out.at(3, 3) == 1.f);
        REQUIRE(out.at(4, 4) == 4.f);
    }
    SECTION("slice larger than pad_to errors") {
        ImageF s({10, 10});
        REQUIRE_THROWS_AS(pad_and_resize(s, 8, 8), contract_error);
    }
}

TEST_CASE("categorize_slice partitions counts with inclusive boundaries") {
    REQUIRE(categorize_slice(0) == SliceClass::non_tumorous);
    REQUIRE(categorize_slice(1500) == SliceClass::tumorous);
    REQUIRE(categorize_slice(500) == SliceClass::excluded);
    REQUIRE(categorize_slice(3500) == SliceClass::excluded);
    REQUIRE(categorize_slice(1000) == SliceClass::tumorous);
    REQUIRE(categorize_slice(3000) == SliceClass::tumorous);
    REQUIRE(categorize_slice(999) == SliceClass::excluded);
    REQUIRE(categorize_slice(3001) == SliceClass::excluded);

    // total partition: every count lands in exactly one class
    for (i64 c = 0; c < 4000; c += 7) {
        auto cls = categorize_slice(c);
        bool non = c == 0;
        bool tum = c >= 1000 && c <= 3000;
        REQUIRE(((cls == SliceClass::non_tumorous) == non));
        REQUIRE(((cls == SliceClass::tumorous) == tum));
        REQUIRE(((cls == SliceClass::excluded) == (!non && !tum)));
    }
}

TEST_CASE("dilate_mask equals the brute-force L1-ball oracle") {
    SECTION("empty mask stays empty") {
        MaskU8 m({8, 8});
        auto d = dilate_mask(m, 5);
        for (u8 v : d.data) REQUIRE(v == 0);
    }
    SECTION("single center pixel becomes a 61-pixel diamond") {
        MaskU8 m({13, 13});
        m.at(6, 6) = 1;
        auto d = dilate_mask(m, 5);
        i64 cnt = 0;
        for (u8 v : d.data) cnt += v;
        REQUIRE(cnt == 61);
        REQUIRE(bitwise_equal(d, dilate_oracle(m, 5)));
    }
    SECTION("full mask is a fixed point") {
        MaskU8 m({6, 6});
        m.fill(1);
        REQUIRE(bitwise_equal(dilate_mask(m, 5), m));
    }
    SECTION("random masks match the oracle, dilation is extensive and monotone") {
        Rng rng(17);
        for (int trial = 0; trial < 20; ++trial) {
            MaskU8 m1({32, 32}), m2({32, 32});
            for (std::size_t i = 0; i < m1.data.size(); ++i) {
                m1.data[i] = rng.uniform() < 0.05 ? 1 : 0;
                m2.data[i] = m1.data[i] | (rng.uniform() < 0.05 ? 1 : 0);
            }
            i64 radius = rng.uniform_int(1, 6);
            auto d1 = dilate_mask(m1, radius);
            auto d2 = dilate_mask(m2, radius);
            REQUIRE(bitwise_equal(d1, dilate_oracle(m1, radius)));
            for (std::size_t i = 0; i < m1.data.size(); ++i) {
                REQUIRE(d1.data[i] >= m1.data[i]);   // extensive
                REQUIRE(d2.data[i] >= d1.data[i]);   // monotone
            }
        }
    }
}

TEST_CASE("borrow_mask draws deterministically and falls back to nearest index") {
    TumorMaskPool pool;
    MaskU8 a({4, 4}), b({4, 4}), c({4, 4});
    a.at(0, 0) = 1;
    b.at(1, 1) = 1;
    c.at(2, 2) = 1;
    pool.add(91, a);
    pool.add(91, b);
    pool.add(94, c);

    SliceRecord rec;
    rec.slice_class = SliceClass::non_tumorous;
    rec.subject_id = "s";

    SECTION("fixed seed picks a repeatable candidate") {
        rec.slice_index = 91;
        Rng r1(5), r2(5);
        auto m1 = borrow_mask(rec, pool, r1);
        auto m2 = borrow_mask(rec, pool, r2);
        REQUIRE(bitwise_equal(m1, m2));
    }
    SECTION("empty pool at 92 with candidates at 91 and 94 borrows from 91") {
        rec.slice_index = 92;
        Rng r(5);
        i64 used = -1;
        borrow_mask(rec, pool, r, &used);
        REQUIRE(used == 91);
    }
    SECTION("borrowed mask equals a pool entry bit-exactly") {
        rec.slice_index = 94;
        Rng r(5);
        auto m = borrow_mask(rec, pool, r);
        REQUIRE(bitwise_equal(m, c));
    }
    SECTION("tumorous record is rejected") {
        rec.slice_class = SliceClass::tumorous;
        Rng r(5);
        REQUIRE_THROWS_AS(borrow_mask(rec, pool, r), contract_error);
    }
}

TEST_CASE("subject_split partitions subjects disjointly and deterministically") {
    std::vector<SliceRecord> records;
    for (int s = 0; s < 10; ++s)
        for (int k = 0; k < 6; ++k) {
            SliceRecord r;
            r.subject_id = "sub" + std::to_string(s);
            r.slice_index = k;
            r.slice_class = (k % 2 == 0) ? SliceClass::tumorous : SliceClass::non_tumorous;
            records.push_back(r);
        }

    auto m = subject_split(records, 0.9, 7);
    REQUIRE(m.train_subjects.size() == 9);
    REQUIRE(m.test_subjects.size() == 1);
    for (const auto& id : m.train_subjects) REQUIRE(m.test_subjects.count(id) == 0);

    auto m2 = subject_split(records, 0.9, 7);
    REQUIRE(m.train_subjects == m2.train_subjects);
    REQUIRE(m.test_subjects == m2.test_subjects);

    // class ratios stratified within 2 percentage points (feasible here)
    double rt = static_cast<double>(m.train_tumorous) /
                static_cast<double>(m.train_tumorous + m.train_non_tumorous);
    double re = static_cast<double>(m.test_tumorous) /
                static_cast<double>(m.test_tumorous + m.test_non_tumorous);
    REQUIRE(std::abs(rt - re) <= 0.02 + 1e-9);

    SECTION("fewer than two subjects errors") {
        std::vector<SliceRecord> one;
        SliceRecord r;
        r.subject_id = "only";
        one.push_back(r);
        REQUIRE_THROWS_AS(subject_split(one, 0.9, 7), contract_error);
    }
}
