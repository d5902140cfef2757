#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "mvlm/data.hpp"

using namespace mvlm;

TEST_CASE("vocabulary: specials occupy the first five indices") {
    const auto vocab = Vocabulary::builtin();
    CHECK(vocab.tokens[0] == "[PAD]");
    CHECK(vocab.tokens[1] == "[START]");
    CHECK(vocab.tokens[2] == "[END]");
    CHECK(vocab.tokens[3] == "[MASK]");
    CHECK(vocab.tokens[4] == "[SEP]");
    CHECK(vocab.size() == 28);
}

TEST_CASE("tokenize/detokenize round trip and OOV") {
    const auto vocab = Vocabulary::builtin();
    const auto ids = vocab.tokenize("red square");
    CHECK(ids == std::vector<std::int32_t>{vocab.id("red"), vocab.id("square")});
    CHECK(vocab.detokenize(ids) == "red square");
    CHECK_THROWS_WITH_AS(vocab.tokenize("zebra"), doctest::Contains("zebra"), std::out_of_range);
}

TEST_CASE("gen_scene: grid 1 has exactly one object; deterministic") {
    RngStream a(3, "s"), b(3, "s");
    for (int i = 0; i < 10; ++i) {
        const Scene s = gen_scene(a, 1);
        CHECK(s.object_count() == 1);
        CHECK(gen_scene(b, 1).canonical_key() == s.canonical_key());
    }
}

TEST_CASE("gen_scene: shape frequencies uniform within 3 sigma over 10000 draws") {
    RngStream rng(17, "s");
    std::array<std::int64_t, kNumShapes> counts{};
    std::int64_t total = 0;
    for (int i = 0; i < 10000; ++i) {
        const Scene s = gen_scene(rng, 2);
        CHECK(s.object_count() >= 1);
        CHECK(s.object_count() <= 4);
        for (const auto& c : s.cells) {
            if (c) {
                counts[static_cast<std::size_t>(c->shape)]++;
                ++total;
            }
        }
    }
    const double p = 1.0 / 3.0;
    const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(total));
    for (auto c : counts) {
        const double freq = static_cast<double>(c) / static_cast<double>(total);
        CHECK(std::abs(freq - p) < 3.0 * sigma);
    }
}

TEST_CASE("render_image: background, red square pattern, purity") {
    Scene s;
    s.grid = 2;
    s.cells.assign(4, std::nullopt);
    s.cells[0] = SceneObject{Shape::square, Color::red};
    const auto img = render_image(s, 32);

    // empty cell region stays at the background value
    const float* bottom_right = img.data.data() + ((20 * 32) + 20) * 3;
    CHECK(bottom_right[0] == 0.1f);
    CHECK(bottom_right[1] == 0.1f);
    CHECK(bottom_right[2] == 0.1f);

    // inset interior of cell (0,0) is pure red
    const float* inside = img.data.data() + ((8 * 32) + 8) * 3;
    CHECK(inside[0] == 1.0f);
    CHECK(inside[1] == 0.0f);
    CHECK(inside[2] == 0.0f);

    // rendering is a pure function
    const auto img2 = render_image(s, 32);
    CHECK(img.data == img2.data);
}

TEST_CASE("shapes render distinctly") {
    std::set<std::vector<float>> seen;
    for (int sh = 0; sh < kNumShapes; ++sh) {
        Scene s;
        s.grid = 1;
        s.cells.assign(1, SceneObject{static_cast<Shape>(sh), Color::white});
        seen.insert(render_image(s, 16).data);
    }
    CHECK(seen.size() == 3);
}

TEST_CASE("render_caption: single object template and truthfulness") {
    Scene s;
    s.grid = 2;
    s.cells.assign(4, std::nullopt);
    s.cells[0] = SceneObject{Shape::square, Color::red};
    const auto vocab = Vocabulary::builtin();
    RngStream rng(1, "c");
    const auto ids = render_caption(s, rng, vocab, 36);
    std::vector<std::int32_t> trimmed;
    for (auto t : ids) {
        if (t != Vocabulary::kPad) trimmed.push_back(t);
    }
    CHECK(vocab.detokenize(trimmed) == "[START] a red square in the top left [END]");
    CHECK(caption_truthful(ids, s, vocab));

    // caption of a different scene is not truthful for s
    Scene other = s;
    other.cells[0]->color = Color::blue;
    CHECK_FALSE(caption_truthful(ids, other, vocab));
}

TEST_CASE("render_caption: multi-object order varies, content multiset fixed") {
    Scene s;
    s.grid = 2;
    s.cells.assign(4, std::nullopt);
    s.cells[1] = SceneObject{Shape::circle, Color::blue};
    s.cells[2] = SceneObject{Shape::triangle, Color::yellow};
    const auto vocab = Vocabulary::builtin();
    RngStream r1(1, "c1"), r2(5, "c2");
    auto a = render_caption(s, r1, vocab, 36);
    auto b = render_caption(s, r2, vocab, 36);
    CHECK(caption_truthful(a, s, vocab));
    CHECK(caption_truthful(b, s, vocab));
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
}

TEST_CASE("capacity: grid 1 has 15 distinct scenes") {
    CHECK(scene_capacity(1) == 15);
    CHECK(scene_capacity(2) == 65535);
}

TEST_CASE("build_corpus sizes, disjoint splits, determinism") {
    Config cfg;
    const auto corpus = build_corpus(cfg, 512, 2, 7, {0.75, 0.125, 0.125});
    CHECK(corpus.train.size() == 384);
    CHECK(corpus.val.size() == 64);
    CHECK(corpus.test.size() == 64);

    std::set<std::int64_t> train_ids, other_ids;
    for (const auto& s : corpus.train) train_ids.insert(s.scene_id);
    for (const auto& s : corpus.val) other_ids.insert(s.scene_id);
    for (const auto& s : corpus.test) other_ids.insert(s.scene_id);
    for (auto id : other_ids) CHECK(train_ids.count(id) == 0);

    std::set<std::vector<std::int32_t>> captions;
    for (const auto& s : corpus.test) captions.insert(s.tokens);
    CHECK(captions.size() == corpus.test.size());

    const auto corpus2 = build_corpus(cfg, 512, 2, 7, {0.75, 0.125, 0.125});
    CHECK(corpus2.train[100].image.data == corpus.train[100].image.data);
    CHECK(corpus2.train[100].tokens == corpus.train[100].tokens);

    // every caption is truthful and contains no [MASK]
    for (const auto& s : corpus.train) {
        CHECK(caption_truthful(s.tokens, corpus.scenes[static_cast<std::size_t>(s.scene_id)], corpus.vocab));
        CHECK(std::count(s.tokens.begin(), s.tokens.end(), Vocabulary::kMask) == 0);
    }
}

TEST_CASE("build_corpus capacity error") {
    Config cfg;
    CHECK_THROWS_WITH_AS(build_corpus(cfg, 16, 1, 7, {0.5, 0.25, 0.25}),
                         doctest::Contains("15"), std::runtime_error);
}

TEST_CASE("corpus save/load round trip") {
    Config cfg;
    const auto corpus = build_corpus(cfg, 24, 2, 9, {0.5, 0.25, 0.25});
    const std::string dir = std::filesystem::temp_directory_path() / "mvlm_corpus_test";
    std::filesystem::remove_all(dir);
    save_corpus(corpus, dir);
    const auto loaded = load_corpus(dir);
    REQUIRE(loaded.train.size() == corpus.train.size());
    REQUIRE(loaded.test.size() == corpus.test.size());
    CHECK(loaded.train[3].image.data == corpus.train[3].image.data);
    CHECK(loaded.train[3].tokens == corpus.train[3].tokens);
    CHECK(loaded.scenes.size() == corpus.scenes.size());
    CHECK(loaded.scenes[5].canonical_key() == corpus.scenes[5].canonical_key());
    CHECK(corpus_hash(dir) == corpus_hash(dir));
    std::filesystem::remove_all(dir);
}

namespace {

Corpus tiny_corpus() {
    Config cfg;
    return build_corpus(cfg, 48, 2, 21, {0.5, 0.25, 0.25});
}

}  // namespace

TEST_CASE("derive_vqa: forced answer for a unique shape") {
    Config cfg;
    auto corpus = build_corpus(cfg, 8, 2, 3, {1.0, 0.0, 0.0});
    // craft a known scene: one blue circle
    Scene s;
    s.grid = 2;
    s.cells.assign(4, std::nullopt);
    s.cells[2] = SceneObject{Shape::circle, Color::blue};
    corpus.scenes[corpus.train[0].scene_id] = s;

    RngStream rng(1, "t");
    const auto ts = derive_vqa(corpus, "train", 0, rng);
    REQUIRE(ts.has_value());
    std::vector<std::int32_t> text;
    for (auto t : ts->text) {
        if (t != Vocabulary::kPad) text.push_back(t);
    }
    CHECK(corpus.vocab.detokenize(text) == "[START] what color is the circle [END]");
    REQUIRE(ts->answer.size() == 3);
    CHECK(ts->answer[1] == corpus.vocab.id("blue"));

    // a scene with no unique shape yields the skip signal
    Scene dup;
    dup.grid = 2;
    dup.cells.assign(4, std::nullopt);
    dup.cells[0] = SceneObject{Shape::square, Color::red};
    dup.cells[1] = SceneObject{Shape::square, Color::blue};
    corpus.scenes[corpus.train[1].scene_id] = dup;
    CHECK_FALSE(derive_vqa(corpus, "train", 1, rng).has_value());
}

TEST_CASE("derive_nlvr label matches containment") {
    auto corpus = tiny_corpus();
    RngStream rng(5, "t");
    for (int i = 0; i < 200; ++i) {
        const std::int64_t a = rng.uniform_int(0, 23), b = rng.uniform_int(0, 23);
        const auto ts = derive_nlvr(corpus, "train", a, b, rng);
        CHECK(rederive_label(ts, corpus, "train") == ts.label);
    }
}

TEST_CASE("derive_ve labels re-derive correctly and cover all classes") {
    auto corpus = tiny_corpus();
    RngStream rng(6, "t");
    std::set<std::int32_t> seen;
    for (int i = 0; i < 300; ++i) {
        const std::int64_t a = rng.uniform_int(0, 23);
        const auto ts = derive_ve(corpus, "train", a, rng);
        CHECK(rederive_label(ts, corpus, "train") == ts.label);
        seen.insert(ts.label);
    }
    CHECK(seen.size() == 3);
}

TEST_CASE("vqa labels re-derive correctly") {
    auto corpus = tiny_corpus();
    RngStream rng(7, "t");
    const auto ds = build_task_dataset(corpus, "train", Task::vqa, 64, rng);
    CHECK(ds.size() == 64);
    for (const auto& ts : ds) {
        const auto color_ordinal = rederive_label(ts, corpus, "train");
        CHECK(ts.answer[1] == corpus.vocab.id(color_word(static_cast<Color>(color_ordinal))));
    }
}

TEST_CASE("nlvr dataset is roughly balanced") {
    auto corpus = tiny_corpus();
    RngStream rng(8, "t");
    const auto ds = build_task_dataset(corpus, "train", Task::nlvr, 2000, rng);
    std::int64_t pos = 0;
    for (const auto& ts : ds) pos += ts.label;
    const double frac = static_cast<double>(pos) / static_cast<double>(ds.size());
    CHECK(frac > 0.40);
    CHECK(frac < 0.60);
}

TEST_CASE("patchify layout") {
    TensorF img({4, 4, 3});
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i);
    const auto p = patchify<double>(img, 2);
    CHECK(p.shape == std::vector<std::int64_t>{4, 12});
    // patch (0,0) = pixels (0,0),(0,1),(1,0),(1,1)
    CHECK(p.data[0] == 0.0);                       // (0,0,c0)
    CHECK(p.data[3] == doctest::Approx(3.0));      // (0,1,c0)
    CHECK(p.data[6] == doctest::Approx(12.0));     // (1,0,c0)
    // patch (0,1) starts at pixel (0,2)
    CHECK(p.data[12] == doctest::Approx(6.0));
}
