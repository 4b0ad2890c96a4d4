#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "phr/bundle.hpp"
#include "phr/hash.hpp"
#include "phr/inference.hpp"
#include "phr/metrics.hpp"
#include "phr/training.hpp"

namespace phr {

enum class Preset { desk, paper };

inline const char* to_string(Preset p) { return p == Preset::desk ? "desk" : "paper"; }

/// Full pipeline configuration. One file drives all five commands; a preset
/// fixes resolution and model-size defaults that individual keys override.
struct RunConfig {
    Preset preset = Preset::desk;
    u64 seed = 0;

    // paths
    std::string data_root = "data";
    std::string cache_dir = "cache";
    std::string checkpoint_dir = "checkpoints";
    std::string output_dir = "outputs";

    // dataset
    i64 slice_lo = 80, slice_hi = 130;
    double clip_percentile = 99.5;
    i64 pad_to = 256, out_size = 512;
    i64 dilation_radius = 5;
    i64 tumor_min_pixels = 1000, tumor_max_pixels = 3000;
    double split_ratio = 0.9;

    // edges
    i64 gaussian_kernel = 5;
    double gaussian_sigma = 1.0;
    double canny_low = 30.0, canny_high = 80.0;

    // model
    i64 base_width = 32;
    i64 txt_dim = 64, time_dim = 64, gn_groups = 8;
    i64 timesteps = 1000;
    std::string schedule = "linear_beta";
    i64 latent_channels = 1;
    i64 downscale_factor = 1;
    std::string autoencoder = "identity";
    i64 token_length = 77;  // fixed contract, echoed for auditability

    TrainConfig stage1, stage2;

    i64 sampler_steps = 50;

    // detector
    i64 detector_patch = 20;
    double detector_percentile = 99.0;
    double detector_margin = 0.1;
    std::string feature_extractor = "desk_hist";

    // ---- derived views -------------------------------------------------
    BundleConfig bundle_config() const {
        BundleConfig b;
        b.unet.in_channels = 2 * latent_channels + 1;
        b.unet.out_channels = latent_channels;
        b.unet.base_width = base_width;
        b.unet.txt_dim = txt_dim;
        b.unet.time_dim = time_dim;
        b.unet.gn_groups = gn_groups;
        b.T = timesteps;
        b.schedule_kind = schedule_kind_from_string(schedule);
        b.autoencoder = autoencoder == "identity" ? AutoencoderKind::identity
                                                  : AutoencoderKind::external_sd;
        b.latent_channels = latent_channels;
        b.downscale_factor = downscale_factor;
        b.vocab_size = Tokenizer().vocab_size();
        b.init_seed = seed;
        return b;
    }

    EdgeParams edge_params() const {
        return {gaussian_kernel, gaussian_sigma, canny_low, canny_high};
    }

    ThresholdDetector detector() const {
        ThresholdDetector d;
        d.patch = detector_patch;
        d.percentile = detector_percentile;
        d.margin = detector_margin;
        return d;
    }
};

/// Paper preset: the full-scale constants.
inline RunConfig paper_preset() {
    RunConfig c;
    c.preset = Preset::paper;
    c.pad_to = 256;
    c.out_size = 512;
    c.latent_channels = 4;
    c.downscale_factor = 8;
    c.autoencoder = "external_sd";
    c.base_width = 320;  // declared SD-compatible dims; weights are not bundled
    c.stage1 = TrainConfig{StageTag::stage1, 8, 4, 30, 0, 5e-5, 0.9, 0.999, 0.01, 0, 1.0, 0};
    c.stage2 = TrainConfig{StageTag::stage2, 8, 4, 20, 0, 5e-4, 0.9, 0.999, 0.01, 500, 1.0, 0};
    return c;
}

/// Desk preset: every command runs on CPU in minutes.
inline RunConfig desk_preset() {
    RunConfig c;
    c.preset = Preset::desk;
    c.slice_lo = 4;
    c.slice_hi = 11;
    c.pad_to = 64;
    c.out_size = 64;
    c.tumor_min_pixels = 40;
    c.tumor_max_pixels = 400;
    c.dilation_radius = 3;
    c.base_width = 32;
    c.stage1 = TrainConfig{StageTag::stage1, 4, 1, 0, 200, 2e-3, 0.9, 0.999, 0.01, 0, 1.0, 0};
    c.stage2 = TrainConfig{StageTag::stage2, 4, 1, 0, 200, 2e-3, 0.9, 0.999, 0.01, 20, 1.0, 0};
    c.timesteps = 300;
    c.detector_patch = 8;
    c.detector_percentile = 60.0;
    c.detector_margin = 0.3;
    return c;
}

// ---------------------------------------------------------------------------
// key/value file parsing ([section] + key = value lines)

namespace detail {

struct RawEntry {
    std::string key;  // "section.key" or bare "key"
    std::string value;
    int line = 0;
};

inline std::string strip(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::vector<RawEntry> parse_keyvalue_file(const std::string& text,
                                                 std::vector<std::string>& errors) {
    std::vector<RawEntry> entries;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = strip(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                errors.push_back("line " + std::to_string(lineno) + ": malformed section header");
                continue;
            }
            section = strip(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            errors.push_back("line " + std::to_string(lineno) + ": expected key = value");
            continue;
        }
        RawEntry e;
        e.key = section.empty() ? strip(line.substr(0, eq))
                                : section + "." + strip(line.substr(0, eq));
        e.value = strip(line.substr(eq + 1));
        if (!e.value.empty() && e.value.front() == '"' && e.value.back() == '"' &&
            e.value.size() >= 2)
            e.value = e.value.substr(1, e.value.size() - 2);
        e.line = lineno;
        entries.push_back(std::move(e));
    }
    return entries;
}

inline bool parse_i64(const std::string& v, i64& out) {
    try {
        std::size_t used = 0;
        out = std::stoll(v, &used);
        return used == v.size();
    } catch (...) {
        return false;
    }
}

inline bool parse_f64(const std::string& v, double& out) {
    try {
        std::size_t used = 0;
        out = std::stod(v, &used);
        return used == v.size();
    } catch (...) {
        return false;
    }
}

}  // namespace detail

struct ConfigResult {
    std::optional<RunConfig> config;
    std::vector<std::string> errors;
    bool ok() const { return errors.empty() && config.has_value(); }
};

/// Validates a parsed key set against the schema: every key type-checked,
/// unknown keys rejected, defaults from the preset.
inline ConfigResult validate_config_text(const std::string& text,
                                         std::optional<Preset> preset_override = std::nullopt) {
    ConfigResult result;
    auto entries = detail::parse_keyvalue_file(text, result.errors);

    // preset decides the defaults, so resolve it first
    Preset preset = preset_override.value_or(Preset::desk);
    for (const auto& e : entries) {
        if (e.key != "preset") continue;
        if (e.value == "desk") preset = Preset::desk;
        else if (e.value == "paper") preset = Preset::paper;
        else result.errors.push_back("preset: expected \"desk\" or \"paper\", got \"" + e.value + "\"");
    }
    if (preset_override.has_value()) preset = *preset_override;
    RunConfig cfg = preset == Preset::paper ? paper_preset() : desk_preset();

    auto want_i64 = [&](const detail::RawEntry& e, i64& target) {
        i64 v;
        if (detail::parse_i64(e.value, v)) target = v;
        else result.errors.push_back(e.key + ": expected an integer, got \"" + e.value + "\"");
    };
    auto want_f64 = [&](const detail::RawEntry& e, double& target) {
        double v;
        if (detail::parse_f64(e.value, v)) target = v;
        else result.errors.push_back(e.key + ": expected a number, got \"" + e.value + "\"");
    };
    auto want_u64 = [&](const detail::RawEntry& e, u64& target) {
        i64 v;
        if (detail::parse_i64(e.value, v) && v >= 0) target = static_cast<u64>(v);
        else result.errors.push_back(e.key + ": expected a non-negative integer, got \"" + e.value + "\"");
    };

    for (const auto& e : entries) {
        const std::string& k = e.key;
        if (k == "preset") continue;  // handled above
        else if (k == "seed") want_u64(e, cfg.seed);
        else if (k == "paths.data_root") cfg.data_root = e.value;
        else if (k == "paths.cache_dir") cfg.cache_dir = e.value;
        else if (k == "paths.checkpoint_dir") cfg.checkpoint_dir = e.value;
        else if (k == "paths.output_dir") cfg.output_dir = e.value;
        else if (k == "dataset.slice_lo") want_i64(e, cfg.slice_lo);
        else if (k == "dataset.slice_hi") want_i64(e, cfg.slice_hi);
        else if (k == "dataset.clip_percentile") want_f64(e, cfg.clip_percentile);
        else if (k == "dataset.pad_to") want_i64(e, cfg.pad_to);
        else if (k == "dataset.out_size") want_i64(e, cfg.out_size);
        else if (k == "dataset.dilation_radius") want_i64(e, cfg.dilation_radius);
        else if (k == "dataset.tumor_min_pixels") want_i64(e, cfg.tumor_min_pixels);
        else if (k == "dataset.tumor_max_pixels") want_i64(e, cfg.tumor_max_pixels);
        else if (k == "dataset.split_ratio") want_f64(e, cfg.split_ratio);
        else if (k == "edges.gaussian_kernel") want_i64(e, cfg.gaussian_kernel);
        else if (k == "edges.gaussian_sigma") want_f64(e, cfg.gaussian_sigma);
        else if (k == "edges.canny_low") want_f64(e, cfg.canny_low);
        else if (k == "edges.canny_high") want_f64(e, cfg.canny_high);
        else if (k == "model.base_width") want_i64(e, cfg.base_width);
        else if (k == "model.txt_dim") want_i64(e, cfg.txt_dim);
        else if (k == "model.time_dim") want_i64(e, cfg.time_dim);
        else if (k == "model.gn_groups") want_i64(e, cfg.gn_groups);
        else if (k == "model.timesteps") want_i64(e, cfg.timesteps);
        else if (k == "model.schedule") {
            if (e.value == "linear_beta" || e.value == "cosine") cfg.schedule = e.value;
            else result.errors.push_back(k + ": expected linear_beta or cosine");
        } else if (k == "model.latent_channels") want_i64(e, cfg.latent_channels);
        else if (k == "model.downscale_factor") want_i64(e, cfg.downscale_factor);
        else if (k == "model.autoencoder") {
            if (e.value == "identity" || e.value == "external_sd") cfg.autoencoder = e.value;
            else result.errors.push_back(k + ": expected identity or external_sd");
        } else if (k == "stage1.batch_size") want_i64(e, cfg.stage1.batch_size);
        else if (k == "stage1.grad_accum") want_i64(e, cfg.stage1.grad_accum);
        else if (k == "stage1.epochs") want_i64(e, cfg.stage1.epochs);
        else if (k == "stage1.max_steps") want_i64(e, cfg.stage1.max_steps);
        else if (k == "stage1.lr") want_f64(e, cfg.stage1.lr);
        else if (k == "stage1.beta1") want_f64(e, cfg.stage1.beta1);
        else if (k == "stage1.beta2") want_f64(e, cfg.stage1.beta2);
        else if (k == "stage1.weight_decay") want_f64(e, cfg.stage1.weight_decay);
        else if (k == "stage1.warmup_steps") want_i64(e, cfg.stage1.warmup_steps);
        else if (k == "stage1.grad_clip") want_f64(e, cfg.stage1.grad_clip);
        else if (k == "stage2.batch_size") want_i64(e, cfg.stage2.batch_size);
        else if (k == "stage2.grad_accum") want_i64(e, cfg.stage2.grad_accum);
        else if (k == "stage2.epochs") want_i64(e, cfg.stage2.epochs);
        else if (k == "stage2.max_steps") want_i64(e, cfg.stage2.max_steps);
        else if (k == "stage2.lr") want_f64(e, cfg.stage2.lr);
        else if (k == "stage2.beta1") want_f64(e, cfg.stage2.beta1);
        else if (k == "stage2.beta2") want_f64(e, cfg.stage2.beta2);
        else if (k == "stage2.weight_decay") want_f64(e, cfg.stage2.weight_decay);
        else if (k == "stage2.warmup_steps") want_i64(e, cfg.stage2.warmup_steps);
        else if (k == "stage2.grad_clip") want_f64(e, cfg.stage2.grad_clip);
        else if (k == "sampler.steps") want_i64(e, cfg.sampler_steps);
        else if (k == "detector.patch") want_i64(e, cfg.detector_patch);
        else if (k == "detector.percentile") want_f64(e, cfg.detector_percentile);
        else if (k == "detector.margin") want_f64(e, cfg.detector_margin);
        else if (k == "metrics.feature_extractor") {
            if (e.value == "desk_hist") cfg.feature_extractor = e.value;
            else result.errors.push_back(k + ": unknown extractor \"" + e.value + "\"");
        } else {
            result.errors.push_back("unknown key: " + k + " (line " + std::to_string(e.line) + ")");
        }
    }

    // cross-field checks
    if (cfg.slice_lo >= cfg.slice_hi)
        result.errors.push_back("dataset.slice_lo: must be below dataset.slice_hi");
    if (cfg.tumor_min_pixels >= cfg.tumor_max_pixels)
        result.errors.push_back("dataset.tumor_min_pixels: must be below tumor_max_pixels");
    if (cfg.canny_low >= cfg.canny_high)
        result.errors.push_back("edges.canny_low: must be below canny_high");
    if (cfg.gaussian_kernel % 2 == 0)
        result.errors.push_back("edges.gaussian_kernel: must be odd");
    if (cfg.split_ratio <= 0.0 || cfg.split_ratio >= 1.0)
        result.errors.push_back("dataset.split_ratio: must be in (0, 1)");
    if (cfg.out_size % cfg.downscale_factor != 0)
        result.errors.push_back("model.downscale_factor: must divide dataset.out_size");

    cfg.stage1.stage = StageTag::stage1;
    cfg.stage2.stage = StageTag::stage2;
    cfg.stage1.seed = cfg.seed;
    cfg.stage2.seed = cfg.seed + 1;

    if (result.errors.empty()) result.config = cfg;
    return result;
}

inline ConfigResult validate_config(const std::string& path,
                                    std::optional<Preset> preset_override = std::nullopt) {
    std::ifstream f(path);
    if (!f) {
        ConfigResult r;
        r.errors.push_back("cannot open config file: " + path);
        return r;
    }
    std::stringstream ss;
    ss << f.rdbuf();
    return validate_config_text(ss.str(), preset_override);
}

/// Canonical serialization of the effective configuration. This text is what
/// gets hashed into run records and checkpoints.
inline std::string echo_config(const RunConfig& c) {
    std::ostringstream o;
    o << "preset = \"" << to_string(c.preset) << "\"\n";
    o << "seed = " << c.seed << "\n";
    o << "[paths]\n";
    o << "data_root = \"" << c.data_root << "\"\n";
    o << "cache_dir = \"" << c.cache_dir << "\"\n";
    o << "checkpoint_dir = \"" << c.checkpoint_dir << "\"\n";
    o << "output_dir = \"" << c.output_dir << "\"\n";
    o << "[dataset]\n";
    o << "slice_lo = " << c.slice_lo << "\n";
    o << "slice_hi = " << c.slice_hi << "\n";
    o << "clip_percentile = " << c.clip_percentile << "\n";
    o << "pad_to = " << c.pad_to << "\n";
    o << "out_size = " << c.out_size << "\n";
    o << "dilation_radius = " << c.dilation_radius << "\n";
    o << "tumor_min_pixels = " << c.tumor_min_pixels << "\n";
    o << "tumor_max_pixels = " << c.tumor_max_pixels << "\n";
    o << "split_ratio = " << c.split_ratio << "\n";
    o << "[edges]\n";
    o << "gaussian_kernel = " << c.gaussian_kernel << "\n";
    o << "gaussian_sigma = " << c.gaussian_sigma << "\n";
    o << "canny_low = " << c.canny_low << "\n";
    o << "canny_high = " << c.canny_high << "\n";
    o << "[model]\n";
    o << "base_width = " << c.base_width << "\n";
    o << "txt_dim = " << c.txt_dim << "\n";
    o << "time_dim = " << c.time_dim << "\n";
    o << "gn_groups = " << c.gn_groups << "\n";
    o << "timesteps = " << c.timesteps << "\n";
    o << "schedule = \"" << c.schedule << "\"\n";
    o << "latent_channels = " << c.latent_channels << "\n";
    o << "downscale_factor = " << c.downscale_factor << "\n";
    o << "autoencoder = \"" << c.autoencoder << "\"\n";
    o << "token_length = " << c.token_length << "\n";
    auto stage = [&o](const char* name, const TrainConfig& s) {
        o << "[" << name << "]\n";
        o << "batch_size = " << s.batch_size << "\n";
        o << "grad_accum = " << s.grad_accum << "\n";
        o << "epochs = " << s.epochs << "\n";
        o << "max_steps = " << s.max_steps << "\n";
        o << "lr = " << s.lr << "\n";
        o << "beta1 = " << s.beta1 << "\n";
        o << "beta2 = " << s.beta2 << "\n";
        o << "weight_decay = " << s.weight_decay << "\n";
        o << "warmup_steps = " << s.warmup_steps << "\n";
        o << "grad_clip = " << s.grad_clip << "\n";
    };
    stage("stage1", c.stage1);
    stage("stage2", c.stage2);
    o << "[sampler]\n";
    o << "steps = " << c.sampler_steps << "\n";
    o << "[detector]\n";
    o << "patch = " << c.detector_patch << "\n";
    o << "percentile = " << c.detector_percentile << "\n";
    o << "margin = " << c.detector_margin << "\n";
    o << "[metrics]\n";
    o << "feature_extractor = \"" << c.feature_extractor << "\"\n";
    return o.str();
}

inline std::string config_hash(const RunConfig& c) { return hash_string(echo_config(c)); }

}  // namespace phr
