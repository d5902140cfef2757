#include "mvlm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mvlm {

LossSet LossSet::all() {
    return of({LossKind::ITC, LossKind::ITM, LossKind::MLM, LossKind::MIM});
}

std::string LossSet::to_string() const {
    std::string out;
    auto append = [&](LossKind k, const char* name) {
        if (!has(k)) return;
        if (!out.empty()) out += ',';
        out += name;
    };
    append(LossKind::ITC, "ITC");
    append(LossKind::ITM, "ITM");
    append(LossKind::MLM, "MLM");
    append(LossKind::MIM, "MIM");
    return out;
}

LossSet LossSet::parse(const std::string& text) {
    LossSet set;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::string up;
        for (char c : item) {
            if (!std::isspace(static_cast<unsigned char>(c))) up += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        }
        if (up.empty()) continue;
        if (up == "ITC") set.add(LossKind::ITC);
        else if (up == "ITM") set.add(LossKind::ITM);
        else if (up == "MLM") set.add(LossKind::MLM);
        else if (up == "MIM") set.add(LossKind::MIM);
        else throw std::runtime_error("unknown loss component '" + item + "'");
    }
    return set;
}

namespace {

struct Field {
    std::function<void(Config&, const std::string&)> set;
    std::function<std::string(const Config&)> get;
};

std::int64_t parse_i64(const std::string& v) {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::runtime_error("trailing characters in integer '" + v + "'");
    return x;
}

double parse_f64(const std::string& v) {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::runtime_error("trailing characters in number '" + v + "'");
    return x;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::runtime_error("expected true/false, got '" + v + "'");
}

std::string format_f64(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

const std::map<std::string, Field>& field_table() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> t;
        auto i64 = [&](const char* name, std::int64_t Config::* member) {
            t[name] = {[member](Config& c, const std::string& v) { c.*member = parse_i64(v); },
                       [member](const Config& c) { return std::to_string(c.*member); }};
        };
        auto f64 = [&](const char* name, double Config::* member) {
            t[name] = {[member](Config& c, const std::string& v) { c.*member = parse_f64(v); },
                       [member](const Config& c) { return format_f64(c.*member); }};
        };
        auto boolean = [&](const char* name, bool Config::* member) {
            t[name] = {[member](Config& c, const std::string& v) { c.*member = parse_bool(v); },
                       [member](const Config& c) { return (c.*member) ? "true" : "false"; }};
        };
        i64("image_size", &Config::image_size);
        i64("encoder_patch", &Config::encoder_patch);
        i64("mask_patch", &Config::mask_patch);
        i64("channels", &Config::channels);
        i64("vocab_size", &Config::vocab_size);
        i64("max_text_len", &Config::max_text_len);
        i64("dim", &Config::dim);
        i64("n_heads", &Config::n_heads);
        i64("n_enc_blocks", &Config::n_enc_blocks);
        i64("n_cross_blocks", &Config::n_cross_blocks);
        i64("proj_dim", &Config::proj_dim);
        f64("image_mask_ratio", &Config::image_mask_ratio);
        f64("text_mask_ratio", &Config::text_mask_ratio);
        f64("temperature", &Config::temperature);
        boolean("learnable_temperature", &Config::learnable_temperature);
        boolean("answer_loss_weighting", &Config::answer_loss_weighting);
        i64("batch_size", &Config::batch_size);
        i64("epochs", &Config::epochs);
        i64("warmup_epochs", &Config::warmup_epochs);
        f64("lr_peak", &Config::lr_peak);
        f64("lr_floor", &Config::lr_floor);
        f64("lr_unimodal", &Config::lr_unimodal);
        f64("weight_decay", &Config::weight_decay);
        t["seed"] = {[](Config& c, const std::string& v) { c.seed = std::stoull(v); },
                     [](const Config& c) { return std::to_string(c.seed); }};
        t["masking_strategy"] = {
            [](Config& c, const std::string& v) {
                if (v == "one") c.masking_strategy = MaskingStrategy::one;
                else if (v == "both") c.masking_strategy = MaskingStrategy::both;
                else throw std::runtime_error("masking_strategy must be 'one' or 'both', got '" + v + "'");
            },
            [](const Config& c) { return c.masking_strategy == MaskingStrategy::one ? "one" : "both"; }};
        t["loss_set"] = {[](Config& c, const std::string& v) { c.loss_set = LossSet::parse(v); },
                         [](const Config& c) { return c.loss_set.to_string(); }};
        return t;
    }();
    return table;
}

void set_field(Config& cfg, const std::string& key, const std::string& value) {
    const auto& table = field_table();
    auto it = table.find(key);
    if (it == table.end()) throw std::runtime_error("unknown config key '" + key + "'");
    it->second.set(cfg, value);
}

}  // namespace

Config parse_config_text(const std::string& text, const std::string& origin) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::string key, value, extra;
        if (!(ls >> key)) continue;
        if (!(ls >> value)) {
            throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": missing value for key '" + key + "'");
        }
        if (ls >> extra) {
            throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": unexpected trailing token '" + extra + "'");
        }
        try {
            set_field(cfg, key, value);
        } catch (const std::exception& e) {
            throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cfg;
}

Config load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string serialize_config(const Config& cfg) {
    std::string out;
    for (const auto& [name, field] : field_table()) {
        out += name;
        out += ' ';
        out += field.get(cfg);
        out += '\n';
    }
    return out;
}

void apply_override(Config& cfg, const std::string& key_eq_value) {
    const auto eq = key_eq_value.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw std::runtime_error("--set expects key=value, got '" + key_eq_value + "'");
    }
    set_field(cfg, key_eq_value.substr(0, eq), key_eq_value.substr(eq + 1));
}

std::vector<std::string> validate(const Config& cfg) {
    std::vector<std::string> v;
    auto require = [&](bool ok, const std::string& msg) {
        if (!ok) v.push_back(msg);
    };
    require(cfg.image_size > 0 && cfg.encoder_patch > 0 && cfg.mask_patch > 0,
            "image_size, encoder_patch and mask_patch must be positive");
    if (cfg.mask_patch > 0 && cfg.encoder_patch > 0 && cfg.image_size > 0) {
        require(cfg.image_size % cfg.mask_patch == 0, "divisibility: image_size must be divisible by mask_patch");
        require(cfg.mask_patch % cfg.encoder_patch == 0, "divisibility: mask_patch must be divisible by encoder_patch");
    }
    require(cfg.channels == 3, "channels must be 3");
    require(cfg.n_enc_blocks >= 1, "n_enc_blocks >= 1");
    require(cfg.n_cross_blocks >= 1, "n_cross_blocks >= 1");
    require(cfg.n_heads >= 1 && cfg.dim >= 1 && cfg.dim % cfg.n_heads == 0, "dim must be divisible by n_heads");
    require(cfg.image_mask_ratio > 0.0 && cfg.image_mask_ratio < 1.0, "0 < image_mask_ratio < 1");
    require(cfg.text_mask_ratio > 0.0 && cfg.text_mask_ratio < 1.0, "0 < text_mask_ratio < 1");
    require(cfg.temperature > 0.0, "temperature > 0");
    require(!cfg.loss_set.empty(), "loss_set must be nonempty");
    require(cfg.vocab_size > 5, "vocab_size must exceed the special-token count");
    require(cfg.max_text_len >= 3, "max_text_len too small for [START] token [END]");
    require(cfg.proj_dim >= 1, "proj_dim >= 1");
    require(cfg.batch_size >= 1, "batch_size >= 1");
    require(cfg.epochs >= 1, "epochs >= 1");
    require(cfg.warmup_epochs >= 0, "warmup_epochs >= 0");
    require(cfg.lr_peak > 0.0 && cfg.lr_floor > 0.0 && cfg.lr_unimodal > 0.0, "learning rates must be positive");
    require(cfg.weight_decay >= 0.0, "weight_decay >= 0");
    return v;
}

}  // namespace mvlm
