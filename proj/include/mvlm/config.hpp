#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mvlm {

enum class LossKind : unsigned { ITC = 1u << 0, ITM = 1u << 1, MLM = 1u << 2, MIM = 1u << 3 };

// Bitmask of LossKind values.
struct LossSet {
    unsigned bits = 0;

    bool has(LossKind k) const { return (bits & static_cast<unsigned>(k)) != 0; }
    void add(LossKind k) { bits |= static_cast<unsigned>(k); }
    bool empty() const { return bits == 0; }
    bool operator==(const LossSet&) const = default;

    static LossSet all();
    static LossSet of(std::initializer_list<LossKind> ks) {
        LossSet s;
        for (auto k : ks) s.add(k);
        return s;
    }
    std::string to_string() const;           // e.g. "ITC,ITM,MLM,MIM"
    static LossSet parse(const std::string&);  // throws on unknown component
};

enum class MaskingStrategy { one, both };

// Full model/data/training configuration. Defaults are the desk-scale
// reference configuration used by the acceptance runs.
struct Config {
    // geometry
    std::int64_t image_size = 32;     // pixels per side, square images
    std::int64_t encoder_patch = 4;   // pixels per encoder patch side
    std::int64_t mask_patch = 8;      // pixels per masking patch side
    std::int64_t channels = 3;

    // text
    std::int64_t vocab_size = 28;     // matches the builtin vocabulary
    std::int64_t max_text_len = 36;

    // model
    std::int64_t dim = 64;
    std::int64_t n_heads = 4;
    std::int64_t n_enc_blocks = 4;
    std::int64_t n_cross_blocks = 3;
    std::int64_t proj_dim = 32;

    // masking
    double image_mask_ratio = 0.6;
    double text_mask_ratio = 0.3;
    MaskingStrategy masking_strategy = MaskingStrategy::one;

    // losses
    double temperature = 0.07;
    bool learnable_temperature = false;
    LossSet loss_set = LossSet::all();

    // training
    std::int64_t batch_size = 32;
    std::int64_t epochs = 30;
    std::int64_t warmup_epochs = 5;
    double lr_peak = 3e-4;
    double lr_floor = 3e-5;
    double lr_unimodal = 1e-5;
    double weight_decay = 0.05;
    std::uint64_t seed = 42;

    // downstream
    bool answer_loss_weighting = false;  // per-answer occurrence weighting for VQA

    // derived quantities
    std::int64_t patch_grid() const { return image_size / encoder_patch; }
    std::int64_t num_patches() const { return patch_grid() * patch_grid(); }           // N
    std::int64_t mask_grid() const { return image_size / mask_patch; }
    std::int64_t num_mask_patches() const { return mask_grid() * mask_grid(); }
    std::int64_t patch_pixels() const { return encoder_patch * encoder_patch * channels; }

    bool operator==(const Config&) const = default;
};

// Flat "key value" text format, '#' starts a comment. Missing keys keep
// their defaults. Throws std::runtime_error with a line number on parse
// failures and on unknown keys.
Config load_config(const std::string& path);
Config parse_config_text(const std::string& text, const std::string& origin = "<text>");
std::string serialize_config(const Config& cfg);

// Applies one "key=value" override (CLI --set).
void apply_override(Config& cfg, const std::string& key_eq_value);

// Returns every violated invariant (empty means ok).
std::vector<std::string> validate(const Config& cfg);

}  // namespace mvlm
