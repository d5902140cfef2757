#include "mvlm/masking.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mvlm/data.hpp"

namespace mvlm {

std::int64_t MaskPlan::masked_token_count() const {
    std::int64_t n = 0;
    for (auto m : text_mask) n += (m != 0);
    return n;
}

std::int64_t MaskPlan::hidden_patch_count() const {
    std::int64_t n = 0;
    for (auto m : image_mask) n += (m != 0);
    return n;
}

std::int64_t masked_count(double ratio, std::int64_t maskable) {
    const double product = ratio * static_cast<double>(maskable);
    const auto rounded = static_cast<std::int64_t>(std::nearbyint(product));
    return std::max<std::int64_t>(1, rounded);
}

TextMaskResult mask_text(const std::vector<std::int32_t>& tokens, double ratio, RngStream& rng) {
    if (tokens.empty() || tokens[0] != Vocabulary::kStart) {
        throw std::invalid_argument("mask_text: token sequence must begin with [START]");
    }
    if (ratio <= 0.0 || ratio >= 1.0) throw std::invalid_argument("mask_text: ratio must be in (0,1)");
    std::vector<std::int64_t> maskable;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto t = tokens[i];
        if (t != Vocabulary::kStart && t != Vocabulary::kEnd && t != Vocabulary::kPad) {
            maskable.push_back(static_cast<std::int64_t>(i));
        }
    }
    if (maskable.empty()) throw std::invalid_argument("mask_text: no maskable positions");
    const std::int64_t count = masked_count(ratio, static_cast<std::int64_t>(maskable.size()));

    const auto perm = rng.permutation(static_cast<std::int64_t>(maskable.size()));
    std::vector<std::int64_t> chosen;
    for (std::int64_t i = 0; i < count; ++i) chosen.push_back(maskable[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
    std::sort(chosen.begin(), chosen.end());

    TextMaskResult res;
    res.masked_tokens = tokens;
    res.text_mask.assign(tokens.size(), 0);
    for (auto pos : chosen) {
        res.text_mask[static_cast<std::size_t>(pos)] = 1;
        res.masked_token_ids.push_back(tokens[static_cast<std::size_t>(pos)]);
        res.masked_tokens[static_cast<std::size_t>(pos)] = Vocabulary::kMask;
    }
    return res;
}

ImageMaskResult mask_image(std::int64_t image_size, std::int64_t mask_patch, std::int64_t encoder_patch,
                           double ratio, RngStream& rng) {
    if (image_size % mask_patch != 0 || mask_patch % encoder_patch != 0) {
        throw std::invalid_argument("mask_image: divisibility invariants violated");
    }
    const std::int64_t mg = image_size / mask_patch;     // masking-patch grid side
    const std::int64_t pg = image_size / encoder_patch;  // encoder-patch grid side
    const std::int64_t ratio_side = mask_patch / encoder_patch;
    const std::int64_t total = mg * mg;
    const std::int64_t count = masked_count(ratio, total);

    ImageMaskResult res;
    res.patch_hidden.assign(static_cast<std::size_t>(total), 0);
    const auto perm = rng.permutation(total);
    for (std::int64_t i = 0; i < count; ++i) res.patch_hidden[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = 1;

    res.encoder_visible.assign(static_cast<std::size_t>(pg * pg), 1);
    for (std::int64_t my = 0; my < mg; ++my) {
        for (std::int64_t mx = 0; mx < mg; ++mx) {
            if (!res.patch_hidden[static_cast<std::size_t>(my * mg + mx)]) continue;
            for (std::int64_t dy = 0; dy < ratio_side; ++dy) {
                for (std::int64_t dx = 0; dx < ratio_side; ++dx) {
                    res.encoder_visible[static_cast<std::size_t>((my * ratio_side + dy) * pg + mx * ratio_side + dx)] = 0;
                }
            }
        }
    }
    return res;
}

std::vector<Leg> plan_strategy(const Config& cfg, RngStream& rng, const std::vector<std::int32_t>& tokens) {
    const bool want_mlm = cfg.loss_set.has(LossKind::MLM);
    const bool want_mim = cfg.loss_set.has(LossKind::MIM);
    std::vector<Leg> legs;
    if (!want_mlm && !want_mim) return legs;

    const auto all_visible = [&] {
        return std::vector<std::uint8_t>(static_cast<std::size_t>(cfg.num_patches()), 1);
    };

    if (cfg.masking_strategy == MaskingStrategy::one) {
        if (want_mlm) {
            const auto tm = mask_text(tokens, cfg.text_mask_ratio, rng);
            Leg leg;
            leg.kind = StrategyLeg::mlm_leg;
            leg.tokens = tm.masked_tokens;
            leg.encoder_visible = all_visible();
            leg.text_masked = true;
            leg.plan.text_mask = tm.text_mask;
            leg.plan.masked_token_ids = tm.masked_token_ids;
            leg.plan.leg = StrategyLeg::mlm_leg;
            legs.push_back(std::move(leg));
        }
        if (want_mim) {
            const auto im = mask_image(cfg.image_size, cfg.mask_patch, cfg.encoder_patch, cfg.image_mask_ratio, rng);
            Leg leg;
            leg.kind = StrategyLeg::mim_leg;
            leg.tokens = tokens;  // unmasked text
            leg.encoder_visible = im.encoder_visible;
            leg.image_masked = true;
            leg.plan.image_mask = im.patch_hidden;
            leg.plan.leg = StrategyLeg::mim_leg;
            legs.push_back(std::move(leg));
        }
        return legs;
    }

    // strategy "both": one jointly masked leg
    Leg leg;
    leg.kind = StrategyLeg::both;
    leg.plan.leg = StrategyLeg::both;
    const auto tm = mask_text(tokens, cfg.text_mask_ratio, rng);
    leg.tokens = tm.masked_tokens;
    leg.text_masked = true;
    leg.plan.text_mask = tm.text_mask;
    leg.plan.masked_token_ids = tm.masked_token_ids;
    const auto im = mask_image(cfg.image_size, cfg.mask_patch, cfg.encoder_patch, cfg.image_mask_ratio, rng);
    leg.encoder_visible = im.encoder_visible;
    leg.image_masked = true;
    leg.plan.image_mask = im.patch_hidden;
    legs.push_back(std::move(leg));
    return legs;
}

}  // namespace mvlm
