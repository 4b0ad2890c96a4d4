#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phr/dataset.hpp"
#include "phr/prompts.hpp"

namespace phr {

// Slice cache layout, one record per slice:
//   <subject>_<index>.f32          raw little-endian float32, row-major
//   <subject>_<index>.json         sidecar (identity, class, mask paths, dims)
//   <subject>_<index>_tumor.u8     tumor mask, one byte per pixel
//   <subject>_<index>_inpaint.u8   inpaint mask (dilated / borrowed)
//   <subject>_<index>_edge.u8      cached Canny edges
//   manifest.json                  split + per-record directory + prompt log

namespace detail {

inline void write_raw(const std::string& path, const void* data, std::size_t bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot write " + path);
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

inline std::vector<char> read_raw(const std::string& path, std::size_t expected_bytes) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path);
    std::vector<char> buf(expected_bytes);
    f.read(buf.data(), static_cast<std::streamsize>(expected_bytes));
    if (static_cast<std::size_t>(f.gcount()) != expected_bytes)
        throw io_error("truncated file: " + path);
    return buf;
}

}  // namespace detail

struct ManifestRecord {
    std::string subject_id;
    i64 slice_index = 0;
    SliceClass slice_class = SliceClass::excluded;
    i64 tumor_pixel_count = 0;
    std::optional<double> age;
    i64 rows = 0, cols = 0;
    std::string image_path, sidecar_path, tumor_mask_path, inpaint_mask_path, edge_path;
    std::string prompt_text;
    int prompt_template = 0;
    std::string split;  // "train" or "test"

    std::string stem() const { return subject_id + "_" + std::to_string(slice_index); }
};

struct CacheManifest {
    SplitManifest split;
    std::vector<ManifestRecord> records;
};

inline std::string record_stem(const std::string& subject_id, i64 slice_index) {
    return subject_id + "_" + std::to_string(slice_index);
}

/// Writes one record's image, masks and edges; fills the path fields of the
/// returned manifest row.
inline ManifestRecord write_slice_record(const std::string& dir, const SliceRecord& rec,
                                         const MaskU8& edges, const PromptSpec& prompt,
                                         const std::string& split) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::string stem = record_stem(rec.subject_id, rec.slice_index);

    ManifestRecord m;
    m.subject_id = rec.subject_id;
    m.slice_index = rec.slice_index;
    m.slice_class = rec.slice_class;
    m.tumor_pixel_count = rec.tumor_pixel_count;
    m.age = rec.age;
    m.rows = rec.image.dim(0);
    m.cols = rec.image.dim(1);
    m.image_path = stem + ".f32";
    m.sidecar_path = stem + ".json";
    m.tumor_mask_path = stem + "_tumor.u8";
    m.inpaint_mask_path = stem + "_inpaint.u8";
    m.edge_path = stem + "_edge.u8";
    m.prompt_text = prompt.text;
    m.prompt_template = prompt.template_index;
    m.split = split;

    detail::write_raw(dir + "/" + m.image_path, rec.image.data.data(),
                      rec.image.data.size() * sizeof(float));
    detail::write_raw(dir + "/" + m.tumor_mask_path, rec.tumor_mask.data.data(),
                      rec.tumor_mask.data.size());
    detail::write_raw(dir + "/" + m.inpaint_mask_path, rec.inpaint_mask.data.data(),
                      rec.inpaint_mask.data.size());
    detail::write_raw(dir + "/" + m.edge_path, edges.data.data(), edges.data.size());

    nlohmann::json side;
    side["subject_id"] = rec.subject_id;
    side["slice_index"] = rec.slice_index;
    side["slice_class"] = to_string(rec.slice_class);
    side["tumor_pixel_count"] = rec.tumor_pixel_count;
    if (rec.age.has_value()) side["age"] = *rec.age;
    else side["age"] = nullptr;
    side["rows"] = m.rows;
    side["cols"] = m.cols;
    side["image_path"] = m.image_path;
    side["mask_path"] = m.inpaint_mask_path;
    side["tumor_mask_path"] = m.tumor_mask_path;
    side["edge_path"] = m.edge_path;
    std::ofstream(dir + "/" + m.sidecar_path) << side.dump(2) << "\n";
    return m;
}

inline SliceRecord read_slice_record(const std::string& dir, const ManifestRecord& m,
                                     MaskU8* edges = nullptr) {
    SliceRecord rec;
    rec.subject_id = m.subject_id;
    rec.slice_index = m.slice_index;
    rec.slice_class = m.slice_class;
    rec.tumor_pixel_count = m.tumor_pixel_count;
    rec.age = m.age;
    i64 n = m.rows * m.cols;

    auto img = detail::read_raw(dir + "/" + m.image_path, static_cast<std::size_t>(n) * 4);
    rec.image = ImageF({m.rows, m.cols});
    std::memcpy(rec.image.data.data(), img.data(), img.size());

    auto tm = detail::read_raw(dir + "/" + m.tumor_mask_path, static_cast<std::size_t>(n));
    rec.tumor_mask = MaskU8({m.rows, m.cols});
    std::memcpy(rec.tumor_mask.data.data(), tm.data(), tm.size());

    auto im = detail::read_raw(dir + "/" + m.inpaint_mask_path, static_cast<std::size_t>(n));
    rec.inpaint_mask = MaskU8({m.rows, m.cols});
    std::memcpy(rec.inpaint_mask.data.data(), im.data(), im.size());

    if (edges) {
        auto e = detail::read_raw(dir + "/" + m.edge_path, static_cast<std::size_t>(n));
        *edges = MaskU8({m.rows, m.cols});
        std::memcpy(edges->data.data(), e.data(), e.size());
    }
    return rec;
}

inline nlohmann::json manifest_to_json(const CacheManifest& m) {
    nlohmann::json j;
    j["split"] = {{"seed", m.split.seed},
                  {"train_subjects", m.split.train_subjects},
                  {"test_subjects", m.split.test_subjects},
                  {"counts",
                   {{"train_tumorous", m.split.train_tumorous},
                    {"train_non_tumorous", m.split.train_non_tumorous},
                    {"test_tumorous", m.split.test_tumorous},
                    {"test_non_tumorous", m.split.test_non_tumorous}}}};
    j["records"] = nlohmann::json::array();
    for (const auto& r : m.records) {
        nlohmann::json e;
        e["subject_id"] = r.subject_id;
        e["slice_index"] = r.slice_index;
        e["slice_class"] = to_string(r.slice_class);
        e["tumor_pixel_count"] = r.tumor_pixel_count;
        if (r.age.has_value()) e["age"] = *r.age;
        else e["age"] = nullptr;
        e["rows"] = r.rows;
        e["cols"] = r.cols;
        e["image_path"] = r.image_path;
        e["sidecar_path"] = r.sidecar_path;
        e["tumor_mask_path"] = r.tumor_mask_path;
        e["inpaint_mask_path"] = r.inpaint_mask_path;
        e["edge_path"] = r.edge_path;
        e["prompt_text"] = r.prompt_text;
        e["prompt_template"] = r.prompt_template;
        e["split"] = r.split;
        j["records"].push_back(std::move(e));
    }
    return j;
}

inline CacheManifest manifest_from_json(const nlohmann::json& j) {
    CacheManifest m;
    m.split.seed = j.at("split").at("seed").get<u64>();
    for (const auto& s : j.at("split").at("train_subjects"))
        m.split.train_subjects.insert(s.get<std::string>());
    for (const auto& s : j.at("split").at("test_subjects"))
        m.split.test_subjects.insert(s.get<std::string>());
    const auto& c = j.at("split").at("counts");
    m.split.train_tumorous = c.at("train_tumorous").get<i64>();
    m.split.train_non_tumorous = c.at("train_non_tumorous").get<i64>();
    m.split.test_tumorous = c.at("test_tumorous").get<i64>();
    m.split.test_non_tumorous = c.at("test_non_tumorous").get<i64>();
    for (const auto& e : j.at("records")) {
        ManifestRecord r;
        r.subject_id = e.at("subject_id").get<std::string>();
        r.slice_index = e.at("slice_index").get<i64>();
        r.slice_class = slice_class_from_string(e.at("slice_class").get<std::string>());
        r.tumor_pixel_count = e.at("tumor_pixel_count").get<i64>();
        if (!e.at("age").is_null()) r.age = e.at("age").get<double>();
        r.rows = e.at("rows").get<i64>();
        r.cols = e.at("cols").get<i64>();
        r.image_path = e.at("image_path").get<std::string>();
        r.sidecar_path = e.at("sidecar_path").get<std::string>();
        r.tumor_mask_path = e.at("tumor_mask_path").get<std::string>();
        r.inpaint_mask_path = e.at("inpaint_mask_path").get<std::string>();
        r.edge_path = e.at("edge_path").get<std::string>();
        r.prompt_text = e.at("prompt_text").get<std::string>();
        r.prompt_template = e.at("prompt_template").get<int>();
        r.split = e.at("split").get<std::string>();
        m.records.push_back(std::move(r));
    }
    return m;
}

inline void write_manifest(const std::string& dir, const CacheManifest& m) {
    std::ofstream(dir + "/manifest.json") << manifest_to_json(m).dump(2) << "\n";
}

inline CacheManifest read_manifest(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw io_error("missing manifest: " + dir + "/manifest.json");
    nlohmann::json j;
    f >> j;
    return manifest_from_json(j);
}

}  // namespace phr
