#pragma once

#include <cstdint>
#include <vector>

#include "mvlm/config.hpp"
#include "mvlm/rng.hpp"
#include "mvlm/tensor.hpp"

namespace mvlm {

enum class StrategyLeg { mlm_leg, mim_leg, both };

// Per-sample record of which text tokens and which image masking patches are
// hidden, plus the originals needed by the losses.
struct MaskPlan {
    std::vector<std::uint8_t> text_mask;          // per token position, 1 = replaced by [MASK]
    std::vector<std::uint8_t> image_mask;         // per masking patch, 1 = hidden
    std::vector<std::int32_t> masked_token_ids;   // original ids at masked positions, in position order
    StrategyLeg leg = StrategyLeg::both;

    std::int64_t masked_token_count() const;
    std::int64_t hidden_patch_count() const;
};

// max(1, round-half-to-even(ratio * maskable)). Rounding uses the default
// IEEE round-to-nearest-even mode on the double product.
std::int64_t masked_count(double ratio, std::int64_t maskable);

struct TextMaskResult {
    std::vector<std::int32_t> masked_tokens;      // tokens with [MASK] substituted
    std::vector<std::uint8_t> text_mask;
    std::vector<std::int32_t> masked_token_ids;
};

// Replaces a uniformly chosen subset of maskable positions by [MASK] (never
// random tokens, never identity-keep). [START], [END] and [PAD] are
// protected. Throws if no position is maskable.
TextMaskResult mask_text(const std::vector<std::int32_t>& tokens, double ratio, RngStream& rng);

struct ImageMaskResult {
    std::vector<std::uint8_t> patch_hidden;       // per masking patch on the (image_size/mask_patch)^2 grid
    std::vector<std::uint8_t> encoder_visible;    // per encoder patch, 1 = visible
};

// Hides whole masking patches; every encoder patch inside a hidden masking
// patch is hidden with it.
ImageMaskResult mask_image(std::int64_t image_size, std::int64_t mask_patch, std::int64_t encoder_patch,
                           double ratio, RngStream& rng);

// One model input leg: (input image visibility, input tokens, plan).
struct Leg {
    StrategyLeg kind;
    std::vector<std::int32_t> tokens;             // input tokens (masked for MLM legs)
    std::vector<std::uint8_t> encoder_visible;    // all ones when the image is unmasked
    bool image_masked = false;
    bool text_masked = false;
    MaskPlan plan;
};

// Builds the reconstruction legs for one sample following the configured
// masking strategy. Strategy "one" yields an (I, T_m) MLM leg and an
// (I_m, T) MIM leg; strategy "both" yields a single (I_m, T_m) leg. Legs
// whose loss component is absent from cfg.loss_set are omitted.
std::vector<Leg> plan_strategy(const Config& cfg, RngStream& rng, const std::vector<std::int32_t>& tokens);

}  // namespace mvlm
