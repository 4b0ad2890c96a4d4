#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phr/cache.hpp"
#include "phr/checkpoint.hpp"
#include "phr/config.hpp"
#include "phr/inference.hpp"
#include "phr/metrics.hpp"
#include "phr/png.hpp"
#include "phr/sampler.hpp"
#include "phr/training.hpp"

namespace phr {

// Exit codes: 0 ok, 2 config error, 3 missing upstream artifact,
// 4 runtime/NaN abort, 5 checkpoint stage mismatch.
enum ExitCode : int {
    kOk = 0,
    kConfigError = 2,
    kMissingArtifact = 3,
    kRuntimeError = 4,
    kStageMismatch = 5,
};

struct missing_artifact_error : io_error {
    using io_error::io_error;
};
struct stage_mismatch_error : io_error {
    using io_error::io_error;
};

using LogFn = std::function<void(const nlohmann::json&)>;

inline LogFn stderr_logger() {
    return [](const nlohmann::json& j) { std::cerr << j.dump() << "\n"; };
}

namespace detail {

inline void write_run_record(const std::string& dir, const std::string& command,
                             const RunConfig& cfg,
                             const std::map<std::string, std::string>& input_hashes,
                             const std::map<std::string, std::string>& output_hashes,
                             double wall_seconds) {
    nlohmann::json j;
    j["command"] = command;
    j["config_hash"] = config_hash(cfg);
    j["config"] = echo_config(cfg);
    j["seed"] = cfg.seed;
    j["inputs"] = input_hashes;
    j["outputs"] = output_hashes;
    j["wall_time_s"] = wall_seconds;
    std::filesystem::create_directories(dir);
    std::ofstream(dir + "/run_record.json") << j.dump(2) << "\n";
}

inline std::map<std::string, std::string> hash_dir_files(const std::string& dir,
                                                         const std::string& suffix) {
    std::map<std::string, std::string> out;
    namespace fs = std::filesystem;
    if (!fs::exists(dir)) return out;
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().string().size() >= suffix.size() &&
            e.path().string().compare(e.path().string().size() - suffix.size(), suffix.size(),
                                      suffix) == 0)
            names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& n : names) out[n] = hash_file(dir + "/" + n);
    return out;
}

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// preprocess

/// Scans data_root for BraTS-convention volumes, runs the slice pipeline,
/// assigns borrowed masks, splits by subject and writes the cache.
inline int run_preprocess(const RunConfig& cfg, bool force, const LogFn& log) {
    namespace fs = std::filesystem;
    detail::Timer timer;
    if (!force && fs::exists(cfg.cache_dir + "/manifest.json")) {
        log({{"event", "noop"}, {"reason", "cache exists; pass --force to rebuild"}});
        return kOk;
    }
    std::vector<std::string> volume_paths;
    if (fs::exists(cfg.data_root))
        for (const auto& e : fs::recursive_directory_iterator(cfg.data_root)) {
            auto s = e.path().filename().string();
            if (s.find("_t1ce.nii") != std::string::npos) volume_paths.push_back(e.path().string());
        }
    std::sort(volume_paths.begin(), volume_paths.end());
    if (volume_paths.empty())
        throw missing_artifact_error("no *_t1ce.nii[.gz] volumes under " + cfg.data_root);

    std::map<std::string, std::string> input_hashes;
    std::vector<SliceRecord> records;
    std::vector<MaskU8> edge_maps;
    TumorMaskPool pool;

    for (const auto& path : volume_paths) {
        input_hashes[fs::path(path).filename().string()] = hash_file(path);
        auto vol = load_volume(path);
        auto slices = extract_slices(vol, cfg.slice_lo, cfg.slice_hi);
        for (auto& raw : slices) {
            auto tumor_raw = merge_tumor_labels(raw.seg);
            i64 count = 0;
            for (u8 v : tumor_raw.data) count += v;
            auto cls = categorize_slice(count, cfg.tumor_min_pixels, cfg.tumor_max_pixels);
            if (cls == SliceClass::excluded) continue;

            SliceRecord rec;
            rec.subject_id = vol.subject_id;
            rec.slice_index = raw.slice_index;
            rec.slice_class = cls;
            rec.tumor_pixel_count = count;
            rec.age = vol.age;
            auto normalized = clip_and_normalize(raw.image, cfg.clip_percentile);
            rec.image = pad_and_resize(normalized, cfg.pad_to, cfg.out_size, -1.0f);
            rec.tumor_mask = pad_and_resize(tumor_raw, cfg.pad_to, cfg.out_size, u8(0));
            if (cls == SliceClass::tumorous) {
                rec.inpaint_mask = dilate_mask(rec.tumor_mask, cfg.dilation_radius);
                pool.add(rec.slice_index, rec.inpaint_mask);
            } else {
                rec.tumor_mask.fill(0);
                rec.inpaint_mask = MaskU8(rec.image.shape);  // borrowed in pass 2
            }
            records.push_back(std::move(rec));
        }
        log({{"event", "volume"}, {"subject", vol.subject_id}});
    }
    if (records.empty()) throw missing_artifact_error("no usable slices after categorization");
    if (pool.empty()) throw missing_artifact_error("no tumorous slices; cannot borrow masks");

    // pass 2: borrowed masks for non-tumorous records, then edges
    Rng root(cfg.seed);
    for (auto& rec : records) {
        if (rec.slice_class == SliceClass::non_tumorous) {
            auto rng = root.derive("borrow/" + rec.subject_id + "/" +
                                   std::to_string(rec.slice_index));
            rec.inpaint_mask = borrow_mask(rec, pool, rng);
        }
        auto smoothed = gaussian_smooth(rec.image, cfg.gaussian_kernel, cfg.gaussian_sigma);
        edge_maps.push_back(canny_edges(smoothed, cfg.canny_low, cfg.canny_high).edges);
    }

    auto split = subject_split(records, cfg.split_ratio, cfg.seed);

    CacheManifest manifest;
    manifest.split = split;
    Tokenizer tokenizer;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        auto rng = root.derive("prompt/" + rec.subject_id + "/" +
                               std::to_string(rec.slice_index));
        PromptSpec prompt =
            rec.slice_class == SliceClass::tumorous
                ? render_prompt(CaseKind::tumorous, rec.age,
                                size_category(rec.tumor_pixel_count, cfg.tumor_min_pixels,
                                              cfg.tumor_max_pixels),
                                rng)
                : render_prompt(CaseKind::non_tumorous, rec.age, std::nullopt, rng);
        std::string split_name = split.train_subjects.count(rec.subject_id) ? "train" : "test";
        manifest.records.push_back(
            write_slice_record(cfg.cache_dir, rec, edge_maps[i], prompt, split_name));
    }
    write_manifest(cfg.cache_dir, manifest);

    auto outputs = detail::hash_dir_files(cfg.cache_dir, ".json");
    detail::write_run_record(cfg.cache_dir, "preprocess", cfg, input_hashes, outputs,
                             timer.seconds());
    log({{"event", "preprocess_done"},
         {"records", manifest.records.size()},
         {"train_subjects", split.train_subjects.size()},
         {"test_subjects", split.test_subjects.size()}});
    return kOk;
}

// ---------------------------------------------------------------------------
// training commands

namespace detail {

inline std::vector<TrainItem> load_train_items(const RunConfig& cfg, bool with_edges) {
    auto manifest = read_manifest(cfg.cache_dir);
    Tokenizer tokenizer;
    std::vector<TrainItem> items;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& m = manifest.records[i];
        if (m.split != "train") continue;
        MaskU8 edges;
        auto rec = read_slice_record(cfg.cache_dir, m, &edges);
        TrainItem item;
        item.image = std::move(rec.image);
        item.inpaint_mask = std::move(rec.inpaint_mask);
        item.tokens = tokenizer.tokenize(m.prompt_text);
        if (with_edges) item.edges = std::move(edges);
        item.source_index = static_cast<i64>(i);
        items.push_back(std::move(item));
    }
    if (items.empty()) throw missing_artifact_error("training split is empty");
    return items;
}

inline void require_runnable_backend(const RunConfig& cfg) {
    if (cfg.autoencoder != "identity")
        throw missing_artifact_error(
            "autoencoder \"" + cfg.autoencoder +
            "\" requires external pretrained weights that are not bundled; "
            "use the desk preset to run end-to-end");
}

}  // namespace detail

inline int run_train_sd(const RunConfig& cfg, bool force, const LogFn& log) {
    namespace fs = std::filesystem;
    detail::Timer timer;
    std::string ckpt_path = cfg.checkpoint_dir + "/stage1.ckpt";
    if (!force && fs::exists(ckpt_path)) {
        log({{"event", "noop"}, {"reason", "stage-1 checkpoint exists; pass --force to retrain"}});
        return kOk;
    }
    if (!fs::exists(cfg.cache_dir + "/manifest.json"))
        throw missing_artifact_error("preprocess cache not found at " + cfg.cache_dir);
    detail::require_runnable_backend(cfg);

    auto items = detail::load_train_items(cfg, /*with_edges=*/false);
    auto bundle = DenoiserBundle::build(cfg.bundle_config());

    fs::create_directories(cfg.checkpoint_dir);
    std::ofstream log_file(cfg.checkpoint_dir + "/stage1_log.jsonl");
    auto sink = [&](const TrainLogEntry& e) {
        nlohmann::json j{{"step", e.step}, {"lr", e.lr}, {"loss", e.loss},
                         {"grad_norm", e.grad_norm}};
        log_file << j.dump() << "\n";
        if (e.step % 25 == 0) log({{"event", "train_sd"}, {"step", e.step}, {"loss", e.loss}});
    };
    double final_loss = train_stage1(items, bundle, cfg.stage1, sink);

    save_checkpoint(bundle, ckpt_path, config_hash(cfg));
    std::map<std::string, std::string> inputs{
        {"manifest.json", hash_file(cfg.cache_dir + "/manifest.json")}};
    std::map<std::string, std::string> outputs{{"stage1.ckpt", hash_file(ckpt_path)}};
    detail::write_run_record(cfg.checkpoint_dir, "train-sd", cfg, inputs, outputs,
                             timer.seconds());
    log({{"event", "train_sd_done"}, {"final_loss", final_loss}});
    return kOk;
}

inline int run_train_controlnet(const RunConfig& cfg, bool force, const LogFn& log) {
    namespace fs = std::filesystem;
    detail::Timer timer;
    std::string out_path = cfg.checkpoint_dir + "/stage2.ckpt";
    if (!force && fs::exists(out_path)) {
        log({{"event", "noop"}, {"reason", "stage-2 checkpoint exists; pass --force to retrain"}});
        return kOk;
    }
    std::string parent_path = cfg.checkpoint_dir + "/stage1.ckpt";
    if (!fs::exists(parent_path))
        throw missing_artifact_error("stage-1 checkpoint not found at " + parent_path);
    detail::require_runnable_backend(cfg);

    CheckpointInfo info;
    auto bundle = load_checkpoint(parent_path, &info);
    if (info.stage != StageTag::stage1)
        throw stage_mismatch_error("expected a stage-1 checkpoint at " + parent_path);

    auto items = detail::load_train_items(cfg, /*with_edges=*/true);
    std::ofstream log_file(cfg.checkpoint_dir + "/stage2_log.jsonl");
    auto sink = [&](const TrainLogEntry& e) {
        nlohmann::json j{{"step", e.step}, {"lr", e.lr}, {"loss", e.loss},
                         {"grad_norm", e.grad_norm}};
        log_file << j.dump() << "\n";
        if (e.step % 25 == 0)
            log({{"event", "train_controlnet"}, {"step", e.step}, {"loss", e.loss}});
    };
    double final_loss = train_stage2(items, bundle, cfg.stage2, sink);

    save_checkpoint(bundle, out_path, config_hash(cfg), hash_file(parent_path));
    std::map<std::string, std::string> inputs{{"stage1.ckpt", hash_file(parent_path)}};
    std::map<std::string, std::string> outputs{{"stage2.ckpt", hash_file(out_path)}};
    detail::write_run_record(cfg.checkpoint_dir, "train-controlnet", cfg, inputs, outputs,
                             timer.seconds());
    log({{"event", "train_controlnet_done"}, {"final_loss", final_loss}});
    return kOk;
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
    std::string checkpoint;  // path; empty -> <checkpoint_dir>/stage2.ckpt
    std::string input;       // "<subject>_<index>" cache stem or a volume path
    std::string mask = "auto";
    i64 steps = 0;           // 0 -> config sampler.steps
    u64 seed = 0;
    std::string out;         // empty -> <output_dir>/recon
    bool diff_map = true;
};

namespace detail {

inline void write_reconstruction(const std::string& dir, const SliceRecord& rec,
                                 const ReconstructionResult& res, bool diff_map) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::string stem = record_stem(rec.subject_id, rec.slice_index) + "_recon";
    write_png16(dir + "/" + stem + ".png", res.output);
    write_raw(dir + "/" + stem + ".f32", res.output.data.data(),
              res.output.data.size() * sizeof(float));
    auto j = res.provenance.to_json();
    j["rows"] = res.output.dim(0);
    j["cols"] = res.output.dim(1);
    std::ofstream(dir + "/" + stem + ".json") << j.dump(2) << "\n";

    // the mask that was actually inpainted, for downstream evaluation
    write_raw(dir + "/" + stem + "_mask.u8", rec.inpaint_mask.data.data(),
              rec.inpaint_mask.data.size());
    if (diff_map) {
        ImageF diff(res.output.shape);
        for (std::size_t i = 0; i < diff.data.size(); ++i)
            diff.data[i] =
                std::abs(res.output.data[i] - rec.image.data[i]) - 1.0f;  // [-1,1] domain
        write_png16(dir + "/" + stem + "_diff.png", diff);
    }
}

}  // namespace detail

inline int run_infer(const RunConfig& cfg, const InferArgs& args_in, bool force,
                     const LogFn& log) {
    namespace fs = std::filesystem;
    detail::Timer timer;
    InferArgs args = args_in;
    if (args.checkpoint.empty()) args.checkpoint = cfg.checkpoint_dir + "/stage2.ckpt";
    if (args.out.empty()) args.out = cfg.output_dir + "/recon";
    if (args.steps <= 0) args.steps = cfg.sampler_steps;
    if (!force && fs::exists(args.out + "/run_record.json")) {
        log({{"event", "noop"}, {"reason", "reconstructions exist; pass --force to redo"}});
        return kOk;
    }
    if (!fs::exists(args.checkpoint))
        throw missing_artifact_error("checkpoint not found: " + args.checkpoint);
    detail::require_runnable_backend(cfg);

    CheckpointInfo info;
    auto bundle = load_checkpoint(args.checkpoint, &info);
    if (info.stage != StageTag::stage2)
        throw stage_mismatch_error("infer requires a stage-2 checkpoint (control branch)");
    std::string ckpt_hash = hash_file(args.checkpoint);

    // collect slices to reconstruct
    std::vector<SliceRecord> slices;
    if (args.input.find(".nii") != std::string::npos) {
        auto vol = load_volume(args.input);
        auto raw_slices = extract_slices(vol, cfg.slice_lo, cfg.slice_hi);
        for (auto& raw : raw_slices) {
            auto tumor_raw = merge_tumor_labels(raw.seg);
            i64 count = 0;
            for (u8 v : tumor_raw.data) count += v;
            if (categorize_slice(count, cfg.tumor_min_pixels, cfg.tumor_max_pixels) !=
                SliceClass::tumorous)
                continue;
            SliceRecord rec;
            rec.subject_id = vol.subject_id;
            rec.slice_index = raw.slice_index;
            rec.slice_class = SliceClass::tumorous;
            rec.tumor_pixel_count = count;
            rec.age = vol.age;
            auto normalized = clip_and_normalize(raw.image, cfg.clip_percentile);
            rec.image = pad_and_resize(normalized, cfg.pad_to, cfg.out_size, -1.0f);
            rec.tumor_mask = pad_and_resize(tumor_raw, cfg.pad_to, cfg.out_size, u8(0));
            rec.inpaint_mask = dilate_mask(rec.tumor_mask, cfg.dilation_radius);
            slices.push_back(std::move(rec));
        }
        if (slices.empty())
            throw missing_artifact_error("volume has no tumorous slices in range: " + args.input);
    } else {
        auto manifest = read_manifest(cfg.cache_dir);
        bool found = false;
        for (const auto& m : manifest.records) {
            if (m.stem() != args.input) continue;
            slices.push_back(read_slice_record(cfg.cache_dir, m));
            found = true;
            break;
        }
        if (!found)
            throw missing_artifact_error("slice stem not found in cache: " + args.input);
    }

    std::optional<MaskU8> mask_override;
    if (args.mask != "auto") {
        if (!fs::exists(args.mask)) throw missing_artifact_error("mask file not found: " + args.mask);
        i64 rows = slices[0].image.dim(0), cols = slices[0].image.dim(1);
        auto raw = detail::read_raw(args.mask, static_cast<std::size_t>(rows * cols));
        MaskU8 m({rows, cols});
        std::memcpy(m.data.data(), raw.data(), raw.size());
        mask_override = std::move(m);
    }

    for (const auto& rec : slices) {
        ReconstructionRequest req;
        req.slice = rec;
        req.steps = args.steps;
        req.seed = args.seed;
        req.mask_override = mask_override;
        req.edge_params = cfg.edge_params();
        auto res = reconstruct(req, bundle, ckpt_hash);
        detail::write_reconstruction(args.out, rec, res, args.diff_map);
        log({{"event", "reconstructed"},
             {"subject", rec.subject_id},
             {"slice", rec.slice_index},
             {"prompt", res.provenance.prompt_text}});
    }

    std::map<std::string, std::string> inputs{{"checkpoint", ckpt_hash}};
    auto outputs = detail::hash_dir_files(args.out, ".f32");
    detail::write_run_record(args.out, "infer", cfg, inputs, outputs, timer.seconds());
    return kOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
    std::string generated;  // dir with *_recon.f32 (+ .json, _mask.u8)
    std::string reference;  // slice cache dir
    std::string detector = "threshold";
    std::string out;        // report path; empty -> <output_dir>/report.json
};

inline int run_evaluate(const RunConfig& cfg, const EvaluateArgs& args_in, bool force,
                        const LogFn& log) {
    namespace fs = std::filesystem;
    detail::Timer timer;
    EvaluateArgs args = args_in;
    if (args.generated.empty()) args.generated = cfg.output_dir + "/recon";
    if (args.reference.empty()) args.reference = cfg.cache_dir;
    if (args.out.empty()) args.out = cfg.output_dir + "/report.json";
    if (!force && fs::exists(args.out)) {
        log({{"event", "noop"}, {"reason", "report exists; pass --force to recompute"}});
        return kOk;
    }
    if (args.detector != "threshold")
        throw missing_artifact_error("detector \"" + args.detector +
                                     "\" is not bundled; available: threshold");
    if (!fs::exists(args.generated))
        throw missing_artifact_error("generated dir not found: " + args.generated);

    // generated set
    std::vector<std::string> stems;
    for (const auto& e : fs::directory_iterator(args.generated)) {
        auto name = e.path().filename().string();
        auto pos = name.rfind("_recon.json");
        if (pos != std::string::npos) stems.push_back(name.substr(0, pos));
    }
    std::sort(stems.begin(), stems.end());
    if (stems.empty())
        throw missing_artifact_error("no reconstructions under " + args.generated);

    std::vector<ImageF> generated;
    std::vector<MaskU8> masks;
    for (const auto& stem : stems) {
        std::ifstream jf(args.generated + "/" + stem + "_recon.json");
        nlohmann::json j;
        jf >> j;
        i64 rows = j.at("rows").get<i64>(), cols = j.at("cols").get<i64>();
        auto raw = detail::read_raw(args.generated + "/" + stem + "_recon.f32",
                                    static_cast<std::size_t>(rows * cols) * 4);
        ImageF img({rows, cols});
        std::memcpy(img.data.data(), raw.data(), raw.size());
        generated.push_back(std::move(img));
        auto mraw = detail::read_raw(args.generated + "/" + stem + "_recon_mask.u8",
                                     static_cast<std::size_t>(rows * cols));
        MaskU8 m({rows, cols});
        std::memcpy(m.data.data(), mraw.data(), mraw.size());
        masks.push_back(std::move(m));
    }

    // reference set: non-tumorous cached slices
    auto manifest = read_manifest(args.reference);
    std::vector<ImageF> reference;
    for (const auto& m : manifest.records) {
        if (m.slice_class != SliceClass::non_tumorous) continue;
        reference.push_back(read_slice_record(args.reference, m).image);
    }
    if (reference.size() < 2)
        throw missing_artifact_error("reference set needs at least 2 non-tumorous slices");

    EvalReport report;
    report.config_hash = config_hash(cfg);
    if (generated.size() >= 2) {
        auto sg = fit_gaussian(feature_extract(generated));
        auto sr = fit_gaussian(feature_extract(reference));
        report.fid = fid(sr, sg);
    } else {
        report.fid_defined = false;  // needs at least two generated samples
    }

    auto det = cfg.detector();
    auto fp = fp_rate(generated, [&det](const ImageF& s) { return det(s); });
    report.fp_rate = fp.rate;

    double ssim_acc = 0.0;
    for (std::size_t i = 0; i < generated.size(); ++i) {
        double s = contralateral_ssim(generated[i], masks[i]);
        report.per_slice.push_back({stems[i], s, fp.verdicts[i]});
        ssim_acc += s;
    }
    report.ssim_mean = ssim_acc / static_cast<double>(generated.size());

    fs::create_directories(fs::path(args.out).parent_path().string().empty()
                               ? "."
                               : fs::path(args.out).parent_path().string());
    std::ofstream(args.out) << report.to_json().dump(2) << "\n";

    std::map<std::string, std::string> inputs = detail::hash_dir_files(args.generated, ".f32");
    std::map<std::string, std::string> outputs{
        {fs::path(args.out).filename().string(), hash_file(args.out)}};
    detail::write_run_record(fs::path(args.out).parent_path().string(), "evaluate", cfg, inputs,
                             outputs, timer.seconds());
    log({{"event", "evaluate_done"},
         {"fid", report.fid},
         {"ssim_mean", report.ssim_mean},
         {"fp_rate", report.fp_rate}});
    return kOk;
}

}  // namespace phr
