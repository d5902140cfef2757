#include <doctest.h>

#include <stdexcept>

#include "mvlm/config.hpp"

using namespace mvlm;

TEST_CASE("empty file yields desk defaults") {
    const Config cfg = parse_config_text("");
    CHECK(cfg == Config{});
    CHECK(cfg.image_size == 32);
    CHECK(cfg.encoder_patch == 4);
    CHECK(cfg.mask_patch == 8);
    CHECK(cfg.dim == 64);
    CHECK(cfg.n_heads == 4);
    CHECK(cfg.n_enc_blocks == 4);
    CHECK(cfg.n_cross_blocks == 3);
    CHECK(cfg.image_mask_ratio == doctest::Approx(0.6));
    CHECK(cfg.text_mask_ratio == doctest::Approx(0.3));
    CHECK(validate(cfg).empty());
}

TEST_CASE("single keys parse") {
    CHECK(parse_config_text("image_mask_ratio 0.6").image_mask_ratio == doctest::Approx(0.6));
    CHECK(parse_config_text("text_mask_ratio 0.3").text_mask_ratio == doctest::Approx(0.3));
    CHECK(parse_config_text("masking_strategy both").masking_strategy == MaskingStrategy::both);
    CHECK(parse_config_text("loss_set ITC,MLM").loss_set == LossSet::of({LossKind::ITC, LossKind::MLM}));
}

TEST_CASE("comments and blank lines are ignored") {
    const Config cfg = parse_config_text("# a comment\n\ndim 16 # trailing\n");
    CHECK(cfg.dim == 16);
}

TEST_CASE("errors carry line numbers") {
    CHECK_THROWS_WITH_AS(parse_config_text("dim 16\nbogus_key 3\n"),
                         doctest::Contains(":2"), std::runtime_error);
    CHECK_THROWS_AS(parse_config_text("dim sixteen"), std::runtime_error);
    CHECK_THROWS_AS(parse_config_text("dim"), std::runtime_error);
    CHECK_THROWS_AS(parse_config_text("dim 16 17"), std::runtime_error);
}

TEST_CASE("config round-trips through serialization") {
    Config cfg;
    cfg.dim = 48;
    cfg.temperature = 0.05;
    cfg.loss_set = LossSet::of({LossKind::ITC, LossKind::ITM});
    cfg.masking_strategy = MaskingStrategy::both;
    cfg.seed = 123456789;
    const Config back = parse_config_text(serialize_config(cfg));
    CHECK(back == cfg);
}

TEST_CASE("validate reports every violation, not only the first") {
    Config cfg;
    cfg.image_size = 30;
    cfg.mask_patch = 8;
    cfg.temperature = 0.0;
    const auto v = validate(cfg);
    CHECK(v.size() >= 2);
    bool div = false, temp = false;
    for (const auto& msg : v) {
        if (msg.find("divisibility") != std::string::npos) div = true;
        if (msg.find("temperature") != std::string::npos) temp = true;
    }
    CHECK(div);
    CHECK(temp);
}

TEST_CASE("defaults validate; loss_set must be nonempty") {
    Config cfg;
    cfg.loss_set = LossSet{};
    const auto v = validate(cfg);
    REQUIRE(!v.empty());
}

TEST_CASE("apply_override") {
    Config cfg;
    apply_override(cfg, "dim=128");
    CHECK(cfg.dim == 128);
    CHECK_THROWS_AS(apply_override(cfg, "nonsense"), std::runtime_error);
    CHECK_THROWS_AS(apply_override(cfg, "unknown_key=3"), std::runtime_error);
}
