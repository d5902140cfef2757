#include <doctest.h>

#include <cmath>

#include "mvlm/data.hpp"
#include "mvlm/masking.hpp"

using namespace mvlm;

namespace {

// Independent rounding oracle: decompose the double product exactly and
// apply half-to-even by hand.
std::int64_t oracle_count(double ratio, std::int64_t maskable) {
    const double p = ratio * static_cast<double>(maskable);
    const double fl = std::floor(p);
    const double frac = p - fl;
    std::int64_t r;
    if (frac > 0.5) {
        r = static_cast<std::int64_t>(fl) + 1;
    } else if (frac < 0.5) {
        r = static_cast<std::int64_t>(fl);
    } else {
        const auto f = static_cast<std::int64_t>(fl);
        r = (f % 2 == 0) ? f : f + 1;
    }
    return std::max<std::int64_t>(1, r);
}

std::vector<std::int32_t> sample_tokens(std::int64_t content, std::int64_t pad = 2) {
    std::vector<std::int32_t> t = {Vocabulary::kStart};
    for (std::int64_t i = 0; i < content; ++i) t.push_back(5 + static_cast<std::int32_t>(i % 20));
    t.push_back(Vocabulary::kEnd);
    for (std::int64_t i = 0; i < pad; ++i) t.push_back(Vocabulary::kPad);
    return t;
}

}  // namespace

TEST_CASE("masked_count matches the independent rounding oracle everywhere") {
    for (std::int64_t n = 1; n <= 32; ++n) {
        for (int r = 1; r <= 9; ++r) {
            const double ratio = r / 10.0;
            CHECK(masked_count(ratio, n) == oracle_count(ratio, n));
        }
    }
    // the spec's stated cases
    CHECK(masked_count(0.3, 10) == 3);
    CHECK(masked_count(0.3, 5) == 2);   // round-half-to-even of 1.5
    CHECK(masked_count(0.6, 16) == 10); // round(9.6)
    CHECK(masked_count(0.05, 4) == 1);  // floor of 1
}

TEST_CASE("mask_text: exact count, protected positions, originals recorded") {
    RngStream rng(3, "m");
    const auto tokens = sample_tokens(10);
    const auto res = mask_text(tokens, 0.3, rng);
    std::int64_t count = 0;
    for (std::size_t i = 0; i < res.text_mask.size(); ++i) {
        if (res.text_mask[i]) {
            ++count;
            CHECK(res.masked_tokens[i] == Vocabulary::kMask);
        } else {
            CHECK(res.masked_tokens[i] == tokens[i]);
        }
    }
    CHECK(count == 3);
    CHECK(res.text_mask[0] == 0);  // [START]
    CHECK(res.masked_token_ids.size() == 3);

    // masked ids are the originals at masked positions, in order
    std::size_t k = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (res.text_mask[i]) CHECK(res.masked_token_ids[k++] == tokens[i]);
    }
}

TEST_CASE("mask_text never touches START/END/PAD across many draws") {
    RngStream rng(5, "m");
    for (int it = 0; it < 200; ++it) {
        const auto tokens = sample_tokens(1 + it % 12, it % 4);
        const auto res = mask_text(tokens, 0.9, rng);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] == Vocabulary::kStart || tokens[i] == Vocabulary::kEnd || tokens[i] == Vocabulary::kPad) {
                CHECK(res.text_mask[i] == 0);
            }
        }
    }
}

TEST_CASE("mask_text errors without maskable positions") {
    RngStream rng(1, "m");
    std::vector<std::int32_t> empty = {Vocabulary::kStart, Vocabulary::kEnd};
    CHECK_THROWS_AS(mask_text(empty, 0.3, rng), std::invalid_argument);
    std::vector<std::int32_t> no_start = {5, 6};
    CHECK_THROWS_AS(mask_text(no_start, 0.3, rng), std::invalid_argument);
}

TEST_CASE("mask_text exact counts over the full sweep") {
    RngStream rng(7, "m");
    for (std::int64_t n = 1; n <= 32; ++n) {
        for (int r = 1; r <= 9; ++r) {
            const double ratio = r / 10.0;
            const auto res = mask_text(sample_tokens(n), ratio, rng);
            std::int64_t count = 0;
            for (auto m : res.text_mask) count += m;
            CHECK(count == oracle_count(ratio, n));
        }
    }
}

TEST_CASE("mask_text per-position uniformity over 10000 plans") {
    RngStream rng(11, "m");
    const std::int64_t content = 10;
    const auto tokens = sample_tokens(content);
    std::vector<std::int64_t> hits(tokens.size(), 0);
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        const auto res = mask_text(tokens, 0.3, rng);
        for (std::size_t j = 0; j < tokens.size(); ++j) hits[j] += res.text_mask[j];
    }
    const double p = 3.0 / 10.0;  // 3 of 10 maskable positions per plan
    const double sigma = std::sqrt(p * (1 - p) / trials);
    for (std::size_t j = 1; j <= content; ++j) {
        const double freq = static_cast<double>(hits[j]) / trials;
        CHECK(std::abs(freq - p) < 4.0 * sigma);
    }
}

TEST_CASE("mask_image: desk defaults hide 10 of 16 masking patches") {
    RngStream rng(2, "m");
    const auto res = mask_image(32, 8, 4, 0.6, rng);
    CHECK(res.patch_hidden.size() == 16);
    std::int64_t hidden = 0;
    for (auto h : res.patch_hidden) hidden += h;
    CHECK(hidden == 10);

    // each hidden masking patch hides exactly 4 encoder patches
    std::int64_t enc_hidden = 0;
    for (auto v : res.encoder_visible) enc_hidden += (v == 0);
    CHECK(enc_hidden == 40);
}

TEST_CASE("mask_image: containment of encoder patches in masking patches") {
    RngStream rng(4, "m");
    const auto res = mask_image(16, 8, 4, 0.3, rng);  // 2x2 masking grid, 4x4 encoder grid
    // max(1, round(0.3*4)) = 1 hidden patch
    std::int64_t hidden = 0;
    std::int64_t which = -1;
    for (std::size_t i = 0; i < res.patch_hidden.size(); ++i) {
        if (res.patch_hidden[i]) {
            ++hidden;
            which = static_cast<std::int64_t>(i);
        }
    }
    CHECK(hidden == 1);
    const std::int64_t my = which / 2, mx = which % 2;
    for (std::int64_t y = 0; y < 4; ++y) {
        for (std::int64_t x = 0; x < 4; ++x) {
            const bool inside = (y / 2 == my) && (x / 2 == mx);
            CHECK(res.encoder_visible[static_cast<std::size_t>(y * 4 + x)] == (inside ? 0 : 1));
        }
    }
}

TEST_CASE("mask_image: at least one patch always hidden") {
    RngStream rng(6, "m");
    const auto res = mask_image(32, 8, 4, 0.01, rng);
    std::int64_t hidden = 0;
    for (auto h : res.patch_hidden) hidden += h;
    CHECK(hidden == 1);
}

TEST_CASE("plan_strategy one: two legs with the right inputs") {
    Config cfg;
    RngStream rng(9, "m");
    const auto tokens = sample_tokens(8, 24);
    const auto legs = plan_strategy(cfg, rng, tokens);
    REQUIRE(legs.size() == 2);

    const Leg& mlm = legs[0];
    CHECK(mlm.kind == StrategyLeg::mlm_leg);
    CHECK(mlm.text_masked);
    CHECK_FALSE(mlm.image_masked);
    for (auto v : mlm.encoder_visible) CHECK(v == 1);  // image unmasked
    bool has_mask_token = false;
    for (auto t : mlm.tokens) has_mask_token = has_mask_token || (t == Vocabulary::kMask);
    CHECK(has_mask_token);

    const Leg& mim = legs[1];
    CHECK(mim.kind == StrategyLeg::mim_leg);
    CHECK(mim.image_masked);
    CHECK_FALSE(mim.text_masked);
    CHECK(mim.tokens == tokens);  // text unmasked
    for (auto t : mim.tokens) CHECK(t != Vocabulary::kMask);
    std::int64_t hidden = 0;
    for (auto h : mim.plan.image_mask) hidden += h;
    CHECK(hidden >= 1);
}

TEST_CASE("plan_strategy both: one leg, both masks nonempty") {
    Config cfg;
    cfg.masking_strategy = MaskingStrategy::both;
    RngStream rng(10, "m");
    const auto legs = plan_strategy(cfg, rng, sample_tokens(8, 24));
    REQUIRE(legs.size() == 1);
    CHECK(legs[0].kind == StrategyLeg::both);
    CHECK(legs[0].text_masked);
    CHECK(legs[0].image_masked);
    CHECK(legs[0].plan.masked_token_count() >= 1);
    CHECK(legs[0].plan.hidden_patch_count() >= 1);
}

TEST_CASE("plan_strategy omits legs for absent losses") {
    Config cfg;
    cfg.loss_set = LossSet::of({LossKind::ITC, LossKind::MLM});
    RngStream rng(11, "m");
    const auto legs = plan_strategy(cfg, rng, sample_tokens(8, 24));
    REQUIRE(legs.size() == 1);
    CHECK(legs[0].kind == StrategyLeg::mlm_leg);

    cfg.loss_set = LossSet::of({LossKind::ITC, LossKind::ITM});
    RngStream rng2(11, "m");
    CHECK(plan_strategy(cfg, rng2, sample_tokens(8, 24)).empty());
}

TEST_CASE("plans are deterministic given the rng state") {
    Config cfg;
    RngStream r1(12, "m"), r2(12, "m");
    const auto tokens = sample_tokens(9, 23);
    const auto a = plan_strategy(cfg, r1, tokens);
    const auto b = plan_strategy(cfg, r2, tokens);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].tokens == b[i].tokens);
        CHECK(a[i].encoder_visible == b[i].encoder_visible);
        CHECK(a[i].plan.text_mask == b[i].plan.text_mask);
        CHECK(a[i].plan.image_mask == b[i].plan.image_mask);
    }
}
