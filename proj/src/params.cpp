#include "mvlm/params.hpp"

#include <cmath>
#include <stdexcept>

namespace mvlm {

std::int64_t ParamStore::add(const std::string& name, std::vector<std::int64_t> shape) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
    const std::int64_t id = count();
    names_.push_back(name);
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    shapes_.push_back(std::move(shape));
    values_.emplace_back(static_cast<std::size_t>(n), 0.0f);
    index_[name] = id;
    return id;
}

std::int64_t ParamStore::find(const std::string& name) const {
    const auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
}

std::int64_t ParamStore::index(const std::string& name) const {
    const auto id = find(name);
    if (id < 0) throw std::out_of_range("unknown parameter " + name);
    return id;
}

std::int64_t ParamStore::total_scalars() const {
    std::int64_t n = 0;
    for (const auto& v : values_) n += static_cast<std::int64_t>(v.size());
    return n;
}

std::vector<std::string> self_block_suffixes() {
    return {"attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
            "norm1.g", "norm1.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2", "norm2.g", "norm2.b"};
}

std::vector<std::string> cross_block_suffixes() {
    auto s = self_block_suffixes();
    for (auto* extra : {"xattn.wq", "xattn.bq", "xattn.wk", "xattn.bk", "xattn.wv", "xattn.bv",
                        "xattn.wo", "xattn.bo", "normx.g", "normx.b"}) {
        s.push_back(extra);
    }
    return s;
}

namespace {

void add_block(ParamStore& store, const Config& cfg, const std::string& prefix, bool cross) {
    const std::int64_t d = cfg.dim, hidden = 4 * cfg.dim;
    auto mat = [&](const std::string& suffix, std::int64_t r, std::int64_t c) {
        store.add(prefix + suffix, {r, c});
    };
    auto vec = [&](const std::string& suffix, std::int64_t n) { store.add(prefix + suffix, {n}); };
    mat("attn.wq", d, d);
    vec("attn.bq", d);
    mat("attn.wk", d, d);
    vec("attn.bk", d);
    mat("attn.wv", d, d);
    vec("attn.bv", d);
    mat("attn.wo", d, d);
    vec("attn.bo", d);
    vec("norm1.g", d);
    vec("norm1.b", d);
    mat("mlp.w1", d, hidden);
    vec("mlp.b1", hidden);
    mat("mlp.w2", hidden, d);
    vec("mlp.b2", d);
    vec("norm2.g", d);
    vec("norm2.b", d);
    if (cross) {
        mat("xattn.wq", d, d);
        vec("xattn.bq", d);
        mat("xattn.wk", d, d);
        vec("xattn.bk", d);
        mat("xattn.wv", d, d);
        vec("xattn.bv", d);
        mat("xattn.wo", d, d);
        vec("xattn.bo", d);
        vec("normx.g", d);
        vec("normx.b", d);
    }
}

}  // namespace

ParamStore build_model_params(const Config& cfg) {
    ParamStore store;
    const std::int64_t d = cfg.dim;
    store.add("patch_embed.w", {cfg.patch_pixels(), d});
    store.add("patch_embed.b", {d});
    store.add("image_cls", {d});
    store.add("image_pos", {cfg.num_patches() + 1, d});
    store.add("image_mask_embed", {d});
    store.add("token_embed", {cfg.vocab_size, d});
    store.add("text_pos", {cfg.max_text_len, d});
    for (std::int64_t i = 0; i < cfg.n_enc_blocks; ++i) {
        add_block(store, cfg, "img_enc." + std::to_string(i) + ".", false);
    }
    for (std::int64_t i = 0; i < cfg.n_enc_blocks; ++i) {
        add_block(store, cfg, "txt_enc." + std::to_string(i) + ".", false);
    }
    for (std::int64_t i = 0; i < cfg.n_cross_blocks; ++i) {
        add_block(store, cfg, "img_cross." + std::to_string(i) + ".", true);
    }
    for (std::int64_t i = 0; i < cfg.n_cross_blocks; ++i) {
        add_block(store, cfg, "txt_cross." + std::to_string(i) + ".", true);
    }
    for (std::int64_t i = 0; i < cfg.n_cross_blocks; ++i) {
        add_block(store, cfg, "img_dec." + std::to_string(i) + ".", true);
    }
    store.add("img_dec.out.w", {d, cfg.patch_pixels()});
    store.add("img_dec.out.b", {cfg.patch_pixels()});
    store.add("mlm_head.w", {d, cfg.vocab_size});
    store.add("mlm_head.b", {cfg.vocab_size});
    store.add("itc_img.w", {d, cfg.proj_dim});
    store.add("itc_img.b", {cfg.proj_dim});
    store.add("itc_txt.w", {d, cfg.proj_dim});
    store.add("itc_txt.b", {cfg.proj_dim});
    store.add("itm_head.w", {d, 2});
    store.add("itm_head.b", {2});
    store.add("log_temperature", {1});
    return store;
}

void add_head_params(ParamStore& store, const Config& cfg, const std::string& task) {
    const std::int64_t d = cfg.dim;
    if (task == "vqa") {
        add_block(store, cfg, "vqa.fusion.", true);
        for (std::int64_t i = 0; i < cfg.n_cross_blocks; ++i) {
            add_block(store, cfg, "vqa.dec." + std::to_string(i) + ".", true);
        }
        store.add("vqa.cls.w", {d, cfg.vocab_size});
        store.add("vqa.cls.b", {cfg.vocab_size});
    } else if (task == "nlvr") {
        store.add("nlvr.fc1.w", {2 * d, d});
        store.add("nlvr.fc1.b", {d});
        store.add("nlvr.fc2.w", {d, 2});
        store.add("nlvr.fc2.b", {2});
    } else if (task == "ve") {
        store.add("ve.fc1.w", {d, d});
        store.add("ve.fc1.b", {d});
        store.add("ve.fc2.w", {d, 3});
        store.add("ve.fc2.b", {3});
    } else {
        throw std::invalid_argument("add_head_params: unknown task " + task);
    }
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_norm_param(const std::string& name) { return name.find("norm") != std::string::npos; }

}  // namespace

void init_params(ParamStore& store, const Config& cfg) {
    RngStream rng(cfg.seed, "init");
    for (std::int64_t i = 0; i < store.count(); ++i) {
        const std::string& name = store.name(i);
        auto& v = store.values(i);
        if (name == "log_temperature") {
            v[0] = static_cast<float>(std::log(cfg.temperature));
        } else if (is_norm_param(name)) {
            const float fill = ends_with(name, ".g") ? 1.0f : 0.0f;
            std::fill(v.begin(), v.end(), fill);
        } else if (ends_with(name, ".b") || ends_with(name, ".bq") || ends_with(name, ".bk") ||
                   ends_with(name, ".bv") || ends_with(name, ".bo") || ends_with(name, ".b1") ||
                   ends_with(name, ".b2")) {
            std::fill(v.begin(), v.end(), 0.0f);
        } else {
            for (auto& x : v) x = static_cast<float>(rng.truncated_normal(0.02));
        }
    }
}

ParamGroup param_group(const std::string& name) {
    for (const auto* prefix : {"img_enc.", "txt_enc.", "patch_embed.", "token_embed", "image_cls",
                               "image_pos", "image_mask_embed", "text_pos"}) {
        if (name.rfind(prefix, 0) == 0) return ParamGroup::unimodal_encoders;
    }
    return ParamGroup::cross_and_heads;
}

bool decay_excluded(const std::string& name) {
    if (is_norm_param(name)) return true;
    if (ends_with(name, ".b") || ends_with(name, ".bq") || ends_with(name, ".bk") || ends_with(name, ".bv") ||
        ends_with(name, ".bo") || ends_with(name, ".b1") || ends_with(name, ".b2")) {
        return true;
    }
    return name == "image_cls" || name == "image_mask_embed" || name == "image_pos" || name == "text_pos" ||
           name == "log_temperature";
}

TensorF interpolate_positions(const TensorF& table, std::int64_t old_grid, std::int64_t new_grid) {
    if (new_grid < 1) throw std::invalid_argument("interpolate_positions: new_grid must be >= 1");
    if (table.rank() != 2 || table.shape[0] != old_grid * old_grid + 1) {
        throw std::invalid_argument("interpolate_positions: table must hold cls row + old_grid^2 rows");
    }
    const std::int64_t d = table.shape[1];
    TensorF out({new_grid * new_grid + 1, d});
    std::copy(table.data.begin(), table.data.begin() + d, out.data.begin());  // cls row
    if (old_grid == new_grid) {
        std::copy(table.data.begin() + d, table.data.end(), out.data.begin() + d);
        return out;
    }
    for (std::int64_t ny = 0; ny < new_grid; ++ny) {
        for (std::int64_t nx = 0; nx < new_grid; ++nx) {
            // corner-aligned source coordinates
            const double sy = new_grid == 1 ? 0.5 * (old_grid - 1)
                                            : static_cast<double>(ny) * (old_grid - 1) / static_cast<double>(new_grid - 1);
            const double sx = new_grid == 1 ? 0.5 * (old_grid - 1)
                                            : static_cast<double>(nx) * (old_grid - 1) / static_cast<double>(new_grid - 1);
            const auto y0 = static_cast<std::int64_t>(std::floor(sy));
            const auto x0 = static_cast<std::int64_t>(std::floor(sx));
            const std::int64_t y1 = std::min(y0 + 1, old_grid - 1);
            const std::int64_t x1 = std::min(x0 + 1, old_grid - 1);
            const double fy = sy - static_cast<double>(y0);
            const double fx = sx - static_cast<double>(x0);
            const float* r00 = table.data.data() + (1 + y0 * old_grid + x0) * d;
            const float* r01 = table.data.data() + (1 + y0 * old_grid + x1) * d;
            const float* r10 = table.data.data() + (1 + y1 * old_grid + x0) * d;
            const float* r11 = table.data.data() + (1 + y1 * old_grid + x1) * d;
            float* dst = out.data.data() + (1 + ny * new_grid + nx) * d;
            for (std::int64_t j = 0; j < d; ++j) {
                const double top = (1.0 - fx) * r00[j] + fx * r01[j];
                const double bot = (1.0 - fx) * r10[j] + fx * r11[j];
                dst[j] = static_cast<float>((1.0 - fy) * top + fy * bot);
            }
        }
    }
    return out;
}

}  // namespace mvlm
