#include "mvlm/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mvlm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

namespace {

const std::array<const char*, kNumShapes> kShapeWords = {"square", "circle", "triangle"};
const std::array<const char*, kNumColors> kColorWords = {"red", "green", "blue", "yellow", "white"};
const std::array<std::array<float, 3>, kNumColors> kColorRgb = {{
    {1.f, 0.f, 0.f},
    {0.f, 1.f, 0.f},
    {0.f, 0.f, 1.f},
    {1.f, 1.f, 0.f},
    {1.f, 1.f, 1.f},
}};
constexpr float kBackground = 0.1f;

}  // namespace

const char* shape_word(Shape s) { return kShapeWords[static_cast<std::size_t>(s)]; }
const char* color_word(Color c) { return kColorWords[static_cast<std::size_t>(c)]; }

Vocabulary Vocabulary::builtin() {
    Vocabulary v;
    v.tokens = {"[PAD]", "[START]", "[END]", "[MASK]", "[SEP]"};
    for (auto* w : kColorWords) v.tokens.push_back(w);
    for (auto* w : kShapeWords) v.tokens.push_back(w);
    for (auto* w : {"top", "bottom", "left", "right", "center"}) v.tokens.push_back(w);
    for (auto* w : {"a", "in", "the", "and"}) v.tokens.push_back(w);
    for (auto* w : {"what", "color", "is", "both", "images", "contain"}) v.tokens.push_back(w);
    return v;
}

std::int32_t Vocabulary::id(const std::string& word) const {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == word) return static_cast<std::int32_t>(i);
    }
    throw std::out_of_range("word not in vocabulary: '" + word + "'");
}

const std::string& Vocabulary::word(std::int32_t id_) const {
    if (id_ < 0 || id_ >= size()) throw std::out_of_range("token id out of range: " + std::to_string(id_));
    return tokens[static_cast<std::size_t>(id_)];
}

std::vector<std::int32_t> Vocabulary::tokenize(const std::string& text) const {
    std::vector<std::int32_t> out;
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(id(w));
    return out;
}

std::string Vocabulary::detokenize(const std::vector<std::int32_t>& ids) const {
    std::string out;
    for (auto t : ids) {
        if (!out.empty()) out += ' ';
        out += word(t);
    }
    return out;
}

// ---------------------------------------------------------------------------
// scenes
// ---------------------------------------------------------------------------

std::int64_t Scene::object_count() const {
    std::int64_t n = 0;
    for (const auto& c : cells) n += c.has_value();
    return n;
}

std::string Scene::canonical_key() const {
    std::string key = "g" + std::to_string(grid);
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (!cells[i]) continue;
        key += ";" + std::to_string(i) + ":" + std::to_string(static_cast<int>(cells[i]->shape)) + "," +
               std::to_string(static_cast<int>(cells[i]->color));
    }
    return key;
}

bool Scene::contains_shape(Shape s) const {
    for (const auto& c : cells) {
        if (c && c->shape == s) return true;
    }
    return false;
}

bool Scene::contains(Color col, Shape s) const {
    for (const auto& c : cells) {
        if (c && c->shape == s && c->color == col) return true;
    }
    return false;
}

std::int64_t scene_capacity(std::int64_t grid) {
    const std::int64_t cells = grid * grid;
    const std::int64_t kinds = kNumShapes * kNumColors;
    // sum over k in 1..cells of C(cells,k) * kinds^k
    std::int64_t total = 0;
    for (std::int64_t k = 1; k <= cells; ++k) {
        std::int64_t comb = 1;
        for (std::int64_t i = 0; i < k; ++i) comb = comb * (cells - i) / (i + 1);
        std::int64_t pw = 1;
        for (std::int64_t i = 0; i < k; ++i) pw *= kinds;
        total += comb * pw;
    }
    return total;
}

Scene gen_scene(RngStream& rng, std::int64_t grid) {
    if (grid < 1) throw std::invalid_argument("gen_scene: grid must be >= 1");
    Scene scene;
    scene.grid = grid;
    scene.cells.assign(static_cast<std::size_t>(grid * grid), std::nullopt);
    const std::int64_t count = rng.uniform_int(1, grid * grid);
    const auto perm = rng.permutation(grid * grid);
    for (std::int64_t i = 0; i < count; ++i) {
        SceneObject obj;
        obj.shape = static_cast<Shape>(rng.uniform_int(0, kNumShapes - 1));
        obj.color = static_cast<Color>(rng.uniform_int(0, kNumColors - 1));
        scene.cells[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = obj;
    }
    return scene;
}

namespace {

bool pixel_in_shape(Shape shape, double x, double y, double x0, double x1, double y0, double y1) {
    switch (shape) {
        case Shape::square:
            return true;  // the whole inset region
        case Shape::circle: {
            const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
            const double r = 0.5 * (x1 - x0);
            const double dx = x - cx, dy = y - cy;
            return dx * dx + dy * dy <= r * r;
        }
        case Shape::triangle: {
            // filled upward triangle: apex at top-center, base at the bottom
            const double cx = 0.5 * (x0 + x1);
            const double t = (y - y0) / (y1 - y0);  // 0 at apex row, 1 at base
            const double halfw = 0.5 * (x1 - x0) * t;
            return std::abs(x - cx) <= halfw;
        }
    }
    return false;
}

}  // namespace

TensorF render_image(const Scene& scene, std::int64_t image_size, std::int64_t channels) {
    if (image_size % scene.grid != 0) {
        throw std::invalid_argument("render_image: image_size must be divisible by the scene grid");
    }
    TensorF img({image_size, image_size, channels});
    std::fill(img.data.begin(), img.data.end(), kBackground);
    const std::int64_t cell = image_size / scene.grid;
    const std::int64_t inset = std::max<std::int64_t>(1, cell / 8);
    for (std::int64_t r = 0; r < scene.grid; ++r) {
        for (std::int64_t c = 0; c < scene.grid; ++c) {
            const auto& obj = scene.cells[static_cast<std::size_t>(r * scene.grid + c)];
            if (!obj) continue;
            const auto& rgb = kColorRgb[static_cast<std::size_t>(obj->color)];
            const double x0 = static_cast<double>(c * cell + inset);
            const double x1 = static_cast<double>((c + 1) * cell - inset);
            const double y0 = static_cast<double>(r * cell + inset);
            const double y1 = static_cast<double>((r + 1) * cell - inset);
            for (std::int64_t py = r * cell + inset; py < (r + 1) * cell - inset; ++py) {
                for (std::int64_t px = c * cell + inset; px < (c + 1) * cell - inset; ++px) {
                    if (!pixel_in_shape(obj->shape, px + 0.5, py + 0.5, x0, x1, y0, y1)) continue;
                    float* p = img.data.data() + (py * image_size + px) * channels;
                    for (std::int64_t ch = 0; ch < channels; ++ch) p[ch] = rgb[static_cast<std::size_t>(ch % 3)];
                }
            }
        }
    }
    return img;
}

std::vector<std::string> position_words(const Scene& scene, std::int64_t cell) {
    if (scene.grid == 1) return {"center"};
    if (scene.grid == 2) {
        const std::int64_t r = cell / 2, c = cell % 2;
        return {r == 0 ? "top" : "bottom", c == 0 ? "left" : "right"};
    }
    throw std::invalid_argument("position_words: position vocabulary covers grids 1 and 2 only");
}

namespace {

std::vector<std::string> mention_words(const Scene& scene, std::int64_t cell) {
    const auto& obj = *scene.cells[static_cast<std::size_t>(cell)];
    std::vector<std::string> words = {"a", color_word(obj.color), shape_word(obj.shape), "in", "the"};
    for (const auto& p : position_words(scene, cell)) words.push_back(p);
    return words;
}

}  // namespace

std::vector<std::int32_t> render_caption(const Scene& scene, RngStream& rng, const Vocabulary& vocab,
                                         std::int64_t max_len) {
    std::vector<std::int64_t> occupied;
    for (std::size_t i = 0; i < scene.cells.size(); ++i) {
        if (scene.cells[i]) occupied.push_back(static_cast<std::int64_t>(i));
    }
    if (occupied.empty()) throw std::invalid_argument("render_caption: scene has no objects");
    const auto perm = rng.permutation(static_cast<std::int64_t>(occupied.size()));

    for (std::int64_t mention_count = static_cast<std::int64_t>(occupied.size()); mention_count >= 1; --mention_count) {
        std::vector<std::int32_t> ids = {Vocabulary::kStart};
        for (std::int64_t m = 0; m < mention_count; ++m) {
            if (m > 0) ids.push_back(vocab.id("and"));
            for (const auto& w : mention_words(scene, occupied[static_cast<std::size_t>(perm[static_cast<std::size_t>(m)])])) {
                ids.push_back(vocab.id(w));
            }
        }
        ids.push_back(Vocabulary::kEnd);
        if (static_cast<std::int64_t>(ids.size()) <= max_len) {
            ids.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);
            return ids;
        }
    }
    throw std::runtime_error("render_caption: even a single mention exceeds max_text_len");
}

bool caption_truthful(const std::vector<std::int32_t>& tokens, const Scene& scene, const Vocabulary& vocab) {
    // parse: [START] mention (and mention)* [END] [PAD]*
    std::vector<std::string> words;
    for (auto t : tokens) words.push_back(vocab.word(t));
    std::size_t i = 0;
    if (i >= words.size() || words[i] != "[START]") return false;
    ++i;
    std::vector<std::pair<SceneObject, std::int64_t>> mentions;  // (object, cell)
    while (i < words.size() && words[i] != "[END]") {
        if (!mentions.empty()) {
            if (words[i] != "and") return false;
            ++i;
        }
        if (i + 4 >= words.size() || words[i] != "a") return false;
        const std::string color = words[i + 1];
        const std::string shape = words[i + 2];
        if (words[i + 3] != "in" || words[i + 4] != "the") return false;
        i += 5;
        std::vector<std::string> pos;
        while (i < words.size() && words[i] != "and" && words[i] != "[END]") {
            pos.push_back(words[i]);
            ++i;
        }
        int color_id = -1, shape_id = -1;
        for (int k = 0; k < kNumColors; ++k) {
            if (color == kColorWords[static_cast<std::size_t>(k)]) color_id = k;
        }
        for (int k = 0; k < kNumShapes; ++k) {
            if (shape == kShapeWords[static_cast<std::size_t>(k)]) shape_id = k;
        }
        if (color_id < 0 || shape_id < 0) return false;
        std::int64_t cell = -1;
        for (std::int64_t cidx = 0; cidx < scene.grid * scene.grid; ++cidx) {
            if (position_words(scene, cidx) == pos) cell = cidx;
        }
        if (cell < 0) return false;
        mentions.push_back({SceneObject{static_cast<Shape>(shape_id), static_cast<Color>(color_id)}, cell});
    }
    if (i >= words.size() || words[i] != "[END]") return false;
    for (++i; i < words.size(); ++i) {
        if (words[i] != "[PAD]") return false;
    }
    if (mentions.empty()) return false;
    // each mention must match a distinct cell with exactly that object
    std::set<std::int64_t> used;
    for (const auto& [obj, cell] : mentions) {
        if (used.count(cell)) return false;
        const auto& actual = scene.cells[static_cast<std::size_t>(cell)];
        if (!actual || actual->shape != obj.shape || actual->color != obj.color) return false;
        used.insert(cell);
    }
    return true;
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

const std::vector<PairedSample>& Corpus::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split '" + name + "'");
}

Corpus build_corpus(const Config& cfg, std::int64_t n, std::int64_t grid, std::uint64_t seed,
                    const std::array<double, 3>& split_fractions) {
    const double fsum = split_fractions[0] + split_fractions[1] + split_fractions[2];
    if (std::abs(fsum - 1.0) > 1e-9) throw std::invalid_argument("build_corpus: split fractions must sum to 1");
    const std::int64_t capacity = scene_capacity(grid);
    if (n > capacity) {
        throw std::runtime_error("build_corpus: " + std::to_string(n) + " scenes requested but grid " +
                                 std::to_string(grid) + " only has " + std::to_string(capacity) + " distinct scenes");
    }

    Corpus corpus;
    corpus.vocab = Vocabulary::builtin();
    corpus.image_size = cfg.image_size;
    corpus.max_text_len = cfg.max_text_len;
    corpus.grid = grid;
    corpus.seed = seed;

    RngStream scene_rng(seed, "data.scene");
    RngStream caption_rng(seed, "data.caption");

    std::set<std::string> seen;
    while (static_cast<std::int64_t>(corpus.scenes.size()) < n) {
        Scene s = gen_scene(scene_rng, grid);
        if (seen.insert(s.canonical_key()).second) corpus.scenes.push_back(std::move(s));
    }

    const auto n0 = static_cast<std::int64_t>(std::llround(split_fractions[0] * static_cast<double>(n)));
    const auto n1 = static_cast<std::int64_t>(std::llround(split_fractions[1] * static_cast<double>(n)));
    const std::int64_t n2 = n - n0 - n1;
    if (n0 < 0 || n1 < 0 || n2 < 0) throw std::invalid_argument("build_corpus: negative split size");

    auto make_sample = [&](std::int64_t scene_id) {
        PairedSample ps;
        ps.scene_id = scene_id;
        ps.image = render_image(corpus.scenes[static_cast<std::size_t>(scene_id)], cfg.image_size, cfg.channels);
        ps.tokens = render_caption(corpus.scenes[static_cast<std::size_t>(scene_id)], caption_rng, corpus.vocab,
                                   cfg.max_text_len);
        return ps;
    };
    for (std::int64_t i = 0; i < n0; ++i) corpus.train.push_back(make_sample(i));
    for (std::int64_t i = n0; i < n0 + n1; ++i) corpus.val.push_back(make_sample(i));
    for (std::int64_t i = n0 + n1; i < n; ++i) corpus.test.push_back(make_sample(i));

    std::set<std::vector<std::int32_t>> test_captions;
    for (const auto& s : corpus.test) {
        if (!test_captions.insert(s.tokens).second) {
            throw std::runtime_error("build_corpus: duplicate caption in test split");
        }
    }
    return corpus;
}

namespace {

json scene_to_json(const Scene& s) {
    json cells = json::array();
    for (const auto& c : s.cells) {
        if (c) {
            cells.push_back({{"shape", static_cast<int>(c->shape)}, {"color", static_cast<int>(c->color)}});
        } else {
            cells.push_back(nullptr);
        }
    }
    return {{"grid", s.grid}, {"cells", cells}};
}

Scene scene_from_json(const json& j) {
    Scene s;
    s.grid = j.at("grid").get<std::int64_t>();
    for (const auto& c : j.at("cells")) {
        if (c.is_null()) {
            s.cells.push_back(std::nullopt);
        } else {
            s.cells.push_back(SceneObject{static_cast<Shape>(c.at("shape").get<int>()),
                                          static_cast<Color>(c.at("color").get<int>())});
        }
    }
    return s;
}

void write_split_blocks(const std::string& dir, const std::string& name, const std::vector<PairedSample>& split) {
    std::ofstream img(dir + "/" + name + ".images.bin", std::ios::binary);
    std::ofstream tok(dir + "/" + name + ".tokens.bin", std::ios::binary);
    if (!img || !tok) throw std::runtime_error("cannot write corpus blocks in " + dir);
    for (const auto& s : split) {
        img.write(reinterpret_cast<const char*>(s.image.data.data()),
                  static_cast<std::streamsize>(s.image.data.size() * sizeof(float)));
        for (auto t : s.tokens) {
            const auto u = static_cast<std::uint16_t>(t);
            tok.write(reinterpret_cast<const char*>(&u), sizeof(u));
        }
    }
}

void read_split_blocks(const std::string& dir, const std::string& name, std::int64_t count,
                       std::int64_t image_size, std::int64_t max_text_len,
                       const std::vector<std::int64_t>& scene_ids, std::vector<PairedSample>& out) {
    std::ifstream img(dir + "/" + name + ".images.bin", std::ios::binary);
    std::ifstream tok(dir + "/" + name + ".tokens.bin", std::ios::binary);
    if (!img || !tok) throw std::runtime_error("cannot read corpus blocks in " + dir);
    for (std::int64_t i = 0; i < count; ++i) {
        PairedSample s;
        s.scene_id = scene_ids[static_cast<std::size_t>(i)];
        s.image = TensorF({image_size, image_size, 3});
        img.read(reinterpret_cast<char*>(s.image.data.data()),
                 static_cast<std::streamsize>(s.image.data.size() * sizeof(float)));
        s.tokens.resize(static_cast<std::size_t>(max_text_len));
        for (auto& t : s.tokens) {
            std::uint16_t u = 0;
            tok.read(reinterpret_cast<char*>(&u), sizeof(u));
            t = static_cast<std::int32_t>(u);
        }
        if (!img || !tok) throw std::runtime_error("corpus block truncated in " + dir);
        out.push_back(std::move(s));
    }
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::string& dir) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format_version"] = 1;
    manifest["image_size"] = corpus.image_size;
    manifest["max_text_len"] = corpus.max_text_len;
    manifest["grid"] = corpus.grid;
    manifest["seed"] = corpus.seed;
    manifest["vocab"] = corpus.vocab.tokens;
    manifest["counts"] = {{"train", corpus.train.size()}, {"val", corpus.val.size()}, {"test", corpus.test.size()}};
    json scenes = json::array();
    for (const auto& s : corpus.scenes) scenes.push_back(scene_to_json(s));
    manifest["scenes"] = scenes;
    for (const auto* name : {"train", "val", "test"}) {
        json ids = json::array();
        for (const auto& s : corpus.split(name)) ids.push_back(s.scene_id);
        manifest["scene_ids"][name] = ids;
    }
    std::ofstream mf(dir + "/manifest.json");
    if (!mf) throw std::runtime_error("cannot write manifest in " + dir);
    mf << manifest.dump(2) << "\n";
    for (const auto* name : {"train", "val", "test"}) write_split_blocks(dir, name, corpus.split(name));
}

Corpus load_corpus(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw std::runtime_error("cannot open corpus manifest in " + dir);
    json manifest;
    mf >> manifest;
    Corpus corpus;
    corpus.vocab.tokens = manifest.at("vocab").get<std::vector<std::string>>();
    corpus.image_size = manifest.at("image_size").get<std::int64_t>();
    corpus.max_text_len = manifest.at("max_text_len").get<std::int64_t>();
    corpus.grid = manifest.at("grid").get<std::int64_t>();
    corpus.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& s : manifest.at("scenes")) corpus.scenes.push_back(scene_from_json(s));
    for (const auto* name : {"train", "val", "test"}) {
        const auto count = manifest.at("counts").at(name).get<std::int64_t>();
        const auto ids = manifest.at("scene_ids").at(name).get<std::vector<std::int64_t>>();
        auto& split = name == std::string("train") ? corpus.train : (name == std::string("val") ? corpus.val : corpus.test);
        read_split_blocks(dir, name, count, corpus.image_size, corpus.max_text_len, ids, split);
    }
    return corpus;
}

std::uint64_t corpus_hash(const std::string& dir) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto* name : {"manifest.json", "train.images.bin", "train.tokens.bin", "val.images.bin",
                             "val.tokens.bin", "test.images.bin", "test.tokens.bin"}) {
        std::ifstream f(dir + "/" + name, std::ios::binary);
        if (!f) throw std::runtime_error("corpus_hash: missing file " + std::string(name));
        char buf[65536];
        while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
            h = fnv1a64_bytes(buf, static_cast<std::size_t>(f.gcount()), h);
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// downstream task samples
// ---------------------------------------------------------------------------

const char* task_name(Task t) {
    switch (t) {
        case Task::vqa: return "vqa";
        case Task::nlvr: return "nlvr";
        case Task::ve: return "ve";
    }
    return "?";
}

Task parse_task(const std::string& name) {
    if (name == "vqa") return Task::vqa;
    if (name == "nlvr") return Task::nlvr;
    if (name == "ve") return Task::ve;
    throw std::invalid_argument("unknown task '" + name + "' (expected vqa, nlvr or ve)");
}

namespace {

std::vector<std::int32_t> pad_tokens(std::vector<std::int32_t> ids, std::int64_t max_len) {
    if (static_cast<std::int64_t>(ids.size()) > max_len) throw std::runtime_error("task text exceeds max_text_len");
    ids.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);
    return ids;
}

std::vector<std::int32_t> wrap_sentence(const std::vector<std::string>& words, const Vocabulary& vocab,
                                        std::int64_t max_len) {
    std::vector<std::int32_t> ids = {Vocabulary::kStart};
    for (const auto& w : words) ids.push_back(vocab.id(w));
    ids.push_back(Vocabulary::kEnd);
    return pad_tokens(std::move(ids), max_len);
}

const Scene& scene_of(const Corpus& corpus, const std::string& split, std::int64_t idx) {
    return corpus.scenes[static_cast<std::size_t>(corpus.split(split)[static_cast<std::size_t>(idx)].scene_id)];
}

std::vector<Shape> unique_shapes(const Scene& scene) {
    std::array<int, kNumShapes> counts{};
    for (const auto& c : scene.cells) {
        if (c) counts[static_cast<std::size_t>(c->shape)]++;
    }
    std::vector<Shape> out;
    for (int s = 0; s < kNumShapes; ++s) {
        if (counts[static_cast<std::size_t>(s)] == 1) out.push_back(static_cast<Shape>(s));
    }
    return out;
}

Color color_of_shape(const Scene& scene, Shape s) {
    for (const auto& c : scene.cells) {
        if (c && c->shape == s) return c->color;
    }
    throw std::logic_error("color_of_shape: shape not present");
}

std::int64_t pick_object_cell(const Scene& scene, RngStream& rng) {
    std::vector<std::int64_t> occupied;
    for (std::size_t i = 0; i < scene.cells.size(); ++i) {
        if (scene.cells[i]) occupied.push_back(static_cast<std::int64_t>(i));
    }
    return occupied[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(occupied.size()) - 1))];
}

}  // namespace

std::optional<TaskSample> derive_vqa(const Corpus& corpus, const std::string& split, std::int64_t idx,
                                     RngStream& rng) {
    const Scene& scene = scene_of(corpus, split, idx);
    const auto uniques = unique_shapes(scene);
    if (uniques.empty()) return std::nullopt;
    const Shape shape = uniques[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(uniques.size()) - 1))];
    TaskSample ts;
    ts.task = Task::vqa;
    ts.sample_a = idx;
    ts.text = wrap_sentence({"what", "color", "is", "the", shape_word(shape)}, corpus.vocab, corpus.max_text_len);
    ts.answer = {Vocabulary::kStart, corpus.vocab.id(color_word(color_of_shape(scene, shape))), Vocabulary::kEnd};
    return ts;
}

TaskSample derive_nlvr(const Corpus& corpus, const std::string& split, std::int64_t idx_a, std::int64_t idx_b,
                       RngStream& rng) {
    const Scene& a = scene_of(corpus, split, idx_a);
    const Scene& b = scene_of(corpus, split, idx_b);
    std::vector<Shape> in_both, not_both;
    for (int s = 0; s < kNumShapes; ++s) {
        const auto shape = static_cast<Shape>(s);
        (a.contains_shape(shape) && b.contains_shape(shape) ? in_both : not_both).push_back(shape);
    }
    bool want_true = rng.uniform_int(0, 1) == 1;
    if (want_true && in_both.empty()) want_true = false;
    if (!want_true && not_both.empty()) want_true = true;
    const auto& pool = want_true ? in_both : not_both;
    const Shape shape = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];

    TaskSample ts;
    ts.task = Task::nlvr;
    ts.sample_a = idx_a;
    ts.sample_b = idx_b;
    ts.text = wrap_sentence({"both", "images", "contain", "a", shape_word(shape)}, corpus.vocab, corpus.max_text_len);
    ts.label = want_true ? 1 : 0;
    return ts;
}

TaskSample derive_ve(const Corpus& corpus, const std::string& split, std::int64_t idx, RngStream& rng) {
    const Scene& scene = scene_of(corpus, split, idx);
    if (scene.grid != 2) throw std::invalid_argument("derive_ve: requires grid 2 scenes");
    const auto label = static_cast<VeLabel>(rng.uniform_int(0, 2));
    const std::int64_t cell = pick_object_cell(scene, rng);
    const SceneObject obj = *scene.cells[static_cast<std::size_t>(cell)];

    TaskSample ts;
    ts.task = Task::ve;
    ts.sample_a = idx;
    ts.label = static_cast<std::int32_t>(label);
    switch (label) {
        case VeLabel::entail: {
            std::vector<std::string> words = {"a", color_word(obj.color), shape_word(obj.shape), "in", "the"};
            for (const auto& p : position_words(scene, cell)) words.push_back(p);
            ts.text = wrap_sentence(words, corpus.vocab, corpus.max_text_len);
            break;
        }
        case VeLabel::contradict: {
            std::vector<Color> wrong;
            for (int c = 0; c < kNumColors; ++c) {
                if (!scene.contains(static_cast<Color>(c), obj.shape)) wrong.push_back(static_cast<Color>(c));
            }
            if (wrong.empty()) throw std::logic_error("derive_ve: no contradictory color available");
            const Color c = wrong[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(wrong.size()) - 1))];
            std::vector<std::string> words = {"a", color_word(c), shape_word(obj.shape), "in", "the"};
            for (const auto& p : position_words(scene, cell)) words.push_back(p);
            ts.text = wrap_sentence(words, corpus.vocab, corpus.max_text_len);
            break;
        }
        case VeLabel::neutral: {
            // single band word leaves the exact cell undetermined
            const auto band = position_words(scene, cell)[static_cast<std::size_t>(rng.uniform_int(0, 1))];
            ts.text = wrap_sentence({"a", color_word(obj.color), shape_word(obj.shape), "in", "the", band},
                                    corpus.vocab, corpus.max_text_len);
            break;
        }
    }
    return ts;
}

std::int32_t rederive_label(const TaskSample& ts, const Corpus& corpus, const std::string& split) {
    const Vocabulary& vocab = corpus.vocab;
    std::vector<std::string> words;
    for (auto t : ts.text) {
        if (t == Vocabulary::kPad || t == Vocabulary::kStart || t == Vocabulary::kEnd) continue;
        words.push_back(vocab.word(t));
    }
    switch (ts.task) {
        case Task::vqa: {
            // "what color is the <shape>" -> ordinal of the color answer
            if (words.size() != 5) throw std::runtime_error("rederive_label: malformed vqa question");
            const Scene& scene = scene_of(corpus, split, ts.sample_a);
            for (int s = 0; s < kNumShapes; ++s) {
                if (words[4] == shape_word(static_cast<Shape>(s))) {
                    return static_cast<std::int32_t>(color_of_shape(scene, static_cast<Shape>(s)));
                }
            }
            throw std::runtime_error("rederive_label: unknown shape in vqa question");
        }
        case Task::nlvr: {
            // "both images contain a <shape>"
            if (words.size() != 5) throw std::runtime_error("rederive_label: malformed nlvr statement");
            for (int s = 0; s < kNumShapes; ++s) {
                if (words[4] == shape_word(static_cast<Shape>(s))) {
                    const auto shape = static_cast<Shape>(s);
                    const bool t = scene_of(corpus, split, ts.sample_a).contains_shape(shape) &&
                                   scene_of(corpus, split, ts.sample_b).contains_shape(shape);
                    return t ? 1 : 0;
                }
            }
            throw std::runtime_error("rederive_label: unknown shape in nlvr statement");
        }
        case Task::ve: {
            // "a <color> <shape> in the <position...>"
            if (words.size() < 6 || words[0] != "a" || words[3] != "in" || words[4] != "the") {
                throw std::runtime_error("rederive_label: malformed ve hypothesis");
            }
            int color_id = -1, shape_id = -1;
            for (int c = 0; c < kNumColors; ++c) {
                if (words[1] == color_word(static_cast<Color>(c))) color_id = c;
            }
            for (int s = 0; s < kNumShapes; ++s) {
                if (words[2] == shape_word(static_cast<Shape>(s))) shape_id = s;
            }
            if (color_id < 0 || shape_id < 0) throw std::runtime_error("rederive_label: unknown words in hypothesis");
            const Scene& scene = scene_of(corpus, split, ts.sample_a);
            std::vector<std::string> pos(words.begin() + 5, words.end());
            if (pos.size() == 1) return static_cast<std::int32_t>(VeLabel::neutral);
            std::int64_t cell = -1;
            for (std::int64_t cidx = 0; cidx < scene.grid * scene.grid; ++cidx) {
                if (position_words(scene, cidx) == pos) cell = cidx;
            }
            if (cell < 0) throw std::runtime_error("rederive_label: unknown position phrase");
            const auto& actual = scene.cells[static_cast<std::size_t>(cell)];
            if (actual && actual->shape == static_cast<Shape>(shape_id) && actual->color == static_cast<Color>(color_id)) {
                return static_cast<std::int32_t>(VeLabel::entail);
            }
            return static_cast<std::int32_t>(VeLabel::contradict);
        }
    }
    throw std::logic_error("rederive_label: unknown task");
}

std::vector<TaskSample> build_task_dataset(const Corpus& corpus, const std::string& split, Task task,
                                           std::int64_t count, RngStream& rng) {
    const auto& samples = corpus.split(split);
    if (samples.empty()) throw std::invalid_argument("build_task_dataset: empty split");
    const auto n = static_cast<std::int64_t>(samples.size());
    std::vector<TaskSample> out;
    std::int64_t guard = 0;
    while (static_cast<std::int64_t>(out.size()) < count) {
        if (++guard > count * 100) throw std::runtime_error("build_task_dataset: unable to derive enough samples");
        const std::int64_t idx = rng.uniform_int(0, n - 1);
        switch (task) {
            case Task::vqa: {
                auto ts = derive_vqa(corpus, split, idx, rng);
                if (ts) out.push_back(std::move(*ts));
                break;
            }
            case Task::nlvr: {
                std::int64_t idx_b = rng.uniform_int(0, n - 1);
                while (n > 1 && idx_b == idx) idx_b = rng.uniform_int(0, n - 1);
                out.push_back(derive_nlvr(corpus, split, idx, idx_b, rng));
                break;
            }
            case Task::ve:
                out.push_back(derive_ve(corpus, split, idx, rng));
                break;
        }
    }
    return out;
}

}  // namespace mvlm
