#pragma once

#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "phr/dataset.hpp"
#include "phr/edges.hpp"
#include "phr/prompts.hpp"
#include "phr/sampler.hpp"

namespace phr {

/// Pixel-space blend: masked pixels come from `generated`, unmasked pixels
/// are copied from `input` untouched.
inline ImageF composite(const ImageF& generated, const ImageF& input, const MaskU8& mask) {
    require(generated.same_shape(input), "composite: shape mismatch");
    require(mask.shape == input.shape, "composite: mask shape mismatch");
    ImageF out(input.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = mask.data[i] ? generated.data[i] : input.data[i];
    return out;
}

struct EdgeParams {
    i64 gaussian_kernel = 5;
    double gaussian_sigma = 1.0;
    double canny_low = 30.0;
    double canny_high = 80.0;
};

struct ReconstructionRequest {
    SliceRecord slice;
    i64 steps = 50;
    u64 seed = 0;
    std::optional<MaskU8> mask_override;  // e.g. an expanded clinician mask
    EdgeParams edge_params;
};

/// Everything needed to replay one reconstruction bit-exactly.
struct Provenance {
    std::string prompt_text;
    int template_index = 0;
    u64 seed = 0;
    std::string checkpoint_hash;
    std::string mask_source;  // "dilated_tumor_mask" or "override"
    i64 steps = 0;
    std::string subject_id;
    i64 slice_index = 0;

    nlohmann::json to_json() const {
        return {{"prompt_text", prompt_text},       {"template_index", template_index},
                {"seed", seed},                     {"checkpoint_hash", checkpoint_hash},
                {"mask_source", mask_source},       {"steps", steps},
                {"subject_id", subject_id},         {"slice_index", slice_index}};
    }
};

struct ReconstructionResult {
    ImageF output;
    Provenance provenance;
};

/// Deliberate-misalignment reconstruction: the tumorous slice and its mask
/// are paired with a healthy prompt and a mirrored contralateral edge map,
/// then sampled with edge conditioning and composited so unmasked anatomy is
/// preserved bit-exactly.
inline ReconstructionResult reconstruct(const ReconstructionRequest& request,
                                        DenoiserBundle& bundle,
                                        const std::string& checkpoint_hash = "") {
    require(bundle.stage == StageTag::stage2 && bundle.control.has_value(),
            "reconstruct: stage-2 checkpoint with a control branch required");
    const auto& slice = request.slice;
    require(slice.slice_class == SliceClass::tumorous || request.mask_override.has_value(),
            "reconstruct: slice must be tumorous unless a mask override is given");

    MaskU8 mask = request.mask_override.has_value() ? *request.mask_override : slice.inpaint_mask;
    require(mask.shape == slice.image.shape, "reconstruct: mask dims");
    bool nonempty = false;
    for (u8 v : mask.data)
        if (v) nonempty = true;
    require(nonempty, "reconstruct: empty mask");

    Rng root(request.seed);
    auto rng_prompt = root.derive("prompt");
    auto rng_sample = root.derive("sample");

    // healthy prompt; subject age reused when known
    auto prompt = render_prompt(CaseKind::non_tumorous, slice.age, std::nullopt, rng_prompt);
    Tokenizer tokenizer;
    auto tokens = tokenizer.tokenize(prompt.text);

    // native edges -> mirrored composite inside the inpaint mask
    auto smoothed = gaussian_smooth(slice.image, request.edge_params.gaussian_kernel,
                                    request.edge_params.gaussian_sigma);
    auto native = canny_edges(smoothed, request.edge_params.canny_low,
                              request.edge_params.canny_high);
    auto mirrored = mirror_composite(native, mask);

    // masked input as context
    ImageF masked = slice.image;
    for (std::size_t i = 0; i < masked.data.size(); ++i)
        if (mask.data[i]) masked.data[i] = 0.0f;

    ConditioningPack pack;
    pack.tokens = tokens;
    pack.latent_mask = downsample_mask(mask, bundle.cfg.downscale_factor);
    pack.edge_map = mirrored.edges;
    pack.context_latent = bundle.encode_image(masked);

    i64 f = bundle.cfg.downscale_factor;
    std::vector<i64> latent_shape = {bundle.cfg.latent_channels, slice.image.dim(0) / f,
                                     slice.image.dim(1) / f};
    auto z0_hat = sample(bundle, latent_shape, pack, request.steps, rng_sample);
    auto generated = bundle.decode_latent(z0_hat);

    ReconstructionResult result;
    result.output = composite(generated, slice.image, mask);
    result.provenance.prompt_text = prompt.text;
    result.provenance.template_index = prompt.template_index;
    result.provenance.seed = request.seed;
    result.provenance.checkpoint_hash = checkpoint_hash;
    result.provenance.mask_source =
        request.mask_override.has_value() ? "override" : "dilated_tumor_mask";
    result.provenance.steps = request.steps;
    result.provenance.subject_id = slice.subject_id;
    result.provenance.slice_index = slice.slice_index;
    return result;
}

}  // namespace phr
