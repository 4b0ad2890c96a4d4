// phr: pseudo-healthy reconstruction pipeline front end.
//
//   phr preprocess       volumes -> slice cache + split manifest
//   phr train-sd         stage-1 inpainting fine-tuning
//   phr train-controlnet stage-2 edge-conditioned branch training
//   phr infer            tumorous slice -> pseudo-healthy reconstruction
//   phr evaluate         FID / contralateral SSIM / FP-rate report

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "phr/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string preset;
    std::optional<phr::u64> seed;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "configuration file");
    cmd->add_option("--preset", args.preset, "desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option_function<long long>(
        "--seed", [&args](long long v) { args.seed = static_cast<phr::u64>(v); },
        "seed override");
    cmd->add_flag("--force", args.force, "redo even when outputs exist");
}

int resolve_config(const CommonArgs& args, phr::RunConfig& out) {
    std::optional<phr::Preset> preset;
    if (args.preset == "desk") preset = phr::Preset::desk;
    if (args.preset == "paper") preset = phr::Preset::paper;

    phr::ConfigResult result;
    if (!args.config_path.empty()) {
        result = phr::validate_config(args.config_path, preset);
    } else {
        result.config = preset == phr::Preset::paper ? phr::paper_preset() : phr::desk_preset();
    }
    if (!result.ok()) {
        for (const auto& e : result.errors)
            std::cerr << nlohmann::json{{"event", "config_error"}, {"message", e}}.dump() << "\n";
        return phr::kConfigError;
    }
    out = *result.config;
    if (args.seed.has_value()) {
        out.seed = *args.seed;
        out.stage1.seed = out.seed;
        out.stage2.seed = out.seed + 1;
    }
    return phr::kOk;
}

template <class Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const phr::stage_mismatch_error& e) {
        std::cerr << nlohmann::json{{"event", "error"}, {"kind", "stage_mismatch"},
                                    {"message", e.what()}}.dump() << "\n";
        return phr::kStageMismatch;
    } catch (const phr::missing_artifact_error& e) {
        std::cerr << nlohmann::json{{"event", "error"}, {"kind", "missing_artifact"},
                                    {"message", e.what()}}.dump() << "\n";
        return phr::kMissingArtifact;
    } catch (const phr::training_abort& e) {
        nlohmann::json j{{"event", "error"}, {"kind", "training_abort"}, {"message", e.what()}};
        j["batch_indices"] = e.batch_indices;
        std::cerr << j.dump() << "\n";
        return phr::kRuntimeError;
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"event", "error"}, {"kind", "runtime"},
                                    {"message", e.what()}}.dump() << "\n";
        return phr::kRuntimeError;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pseudo-healthy brain MRI reconstruction pipeline"};
    app.require_subcommand(1);

    CommonArgs common;
    phr::InferArgs infer_args;
    phr::EvaluateArgs eval_args;

    auto* preprocess = app.add_subcommand("preprocess", "build the slice cache");
    add_common(preprocess, common);

    auto* train_sd = app.add_subcommand("train-sd", "stage-1 inpainting fine-tuning");
    add_common(train_sd, common);

    auto* train_cn = app.add_subcommand("train-controlnet", "stage-2 control-branch training");
    add_common(train_cn, common);

    auto* infer = app.add_subcommand("infer", "reconstruct pseudo-healthy slices");
    add_common(infer, common);
    infer->add_option("--checkpoint", infer_args.checkpoint, "stage-2 checkpoint path");
    infer->add_option("--input", infer_args.input,
                      "cache stem (<subject>_<index>) or volume path")->required();
    infer->add_option("--mask", infer_args.mask, "mask .u8 path or \"auto\"");
    infer->add_option("--steps", infer_args.steps, "sampler steps");
    infer->add_option("--out", infer_args.out, "output directory");

    auto* evaluate = app.add_subcommand("evaluate", "score a generated set");
    add_common(evaluate, common);
    evaluate->add_option("--generated", eval_args.generated, "reconstruction directory");
    evaluate->add_option("--reference", eval_args.reference, "reference slice cache");
    evaluate->add_option("--detector", eval_args.detector, "tumor detector name");
    evaluate->add_option("--out", eval_args.out, "report path");

    CLI11_PARSE(app, argc, argv);

    phr::RunConfig cfg;
    int rc = resolve_config(common, cfg);
    if (rc != phr::kOk) return rc;
    auto log = phr::stderr_logger();

    if (preprocess->parsed())
        return guarded([&] { return phr::run_preprocess(cfg, common.force, log); });
    if (train_sd->parsed())
        return guarded([&] { return phr::run_train_sd(cfg, common.force, log); });
    if (train_cn->parsed())
        return guarded([&] { return phr::run_train_controlnet(cfg, common.force, log); });
    if (infer->parsed()) {
        infer_args.seed = common.seed.value_or(cfg.seed);
        return guarded([&] { return phr::run_infer(cfg, infer_args, common.force, log); });
    }
    if (evaluate->parsed())
        return guarded([&] { return phr::run_evaluate(cfg, eval_args, common.force, log); });
    return phr::kConfigError;
}
