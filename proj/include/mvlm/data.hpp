#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mvlm/config.hpp"
#include "mvlm/rng.hpp"
#include "mvlm/tensor.hpp"

namespace mvlm {

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

struct Vocabulary {
    std::vector<std::string> tokens;

    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kStart = 1;
    static constexpr std::int32_t kEnd = 2;
    static constexpr std::int32_t kMask = 3;
    static constexpr std::int32_t kSep = 4;

    // The fixed word list: 5 specials, 5 colors, 3 shapes, 5 position words,
    // 4 glue words and 6 task words.
    static Vocabulary builtin();

    std::int64_t size() const { return static_cast<std::int64_t>(tokens.size()); }
    std::int32_t id(const std::string& word) const;  // throws on OOV, names the word
    const std::string& word(std::int32_t id) const;

    std::vector<std::int32_t> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<std::int32_t>& ids) const;
};

// ---------------------------------------------------------------------------
// scenes
// ---------------------------------------------------------------------------

enum class Shape : std::uint8_t { square = 0, circle = 1, triangle = 2 };
enum class Color : std::uint8_t { red = 0, green = 1, blue = 2, yellow = 3, white = 4 };

constexpr int kNumShapes = 3;
constexpr int kNumColors = 5;

const char* shape_word(Shape s);
const char* color_word(Color c);

struct SceneObject {
    Shape shape;
    Color color;
};

struct Scene {
    std::int64_t grid = 2;
    std::vector<std::optional<SceneObject>> cells;  // row-major, grid*grid entries

    std::int64_t object_count() const;
    std::string canonical_key() const;  // unique per distinct scene
    bool contains_shape(Shape s) const;
    bool contains(Color c, Shape s) const;
};

// Number of distinct scenes for a grid size (objects in 1..grid^2 cells).
std::int64_t scene_capacity(std::int64_t grid);

Scene gen_scene(RngStream& rng, std::int64_t grid);

// Renders the scene onto a dark background (all channels 0.1): each object
// drawn filled in its cell at a fixed inset. Pure function of the scene.
TensorF render_image(const Scene& scene, std::int64_t image_size, std::int64_t channels = 3);

// Position phrase for a cell: {"top","left"}-style words for grid 2,
// {"center"} for grid 1.
std::vector<std::string> position_words(const Scene& scene, std::int64_t cell);

// Caption "a <color> <shape> in the <position>" per object, joined by "and";
// object order randomized by rng; wrapped in [START]/[END], padded with
// [PAD] to max_len. Retries with fewer mentioned objects only if the full
// caption does not fit (never silently truncates).
std::vector<std::int32_t> render_caption(const Scene& scene, RngStream& rng, const Vocabulary& vocab,
                                         std::int64_t max_len);

// Parses a caption back into (color, shape, position-words) mention list and
// confirms each against the scene; full captions must mention every object.
bool caption_truthful(const std::vector<std::int32_t>& tokens, const Scene& scene, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

struct PairedSample {
    TensorF image;                     // (H,W,C) in [0,1]
    std::vector<std::int32_t> tokens;  // [START] ... [END] [PAD]*, length max_text_len
    std::int64_t scene_id = -1;
};

struct Corpus {
    Vocabulary vocab;
    std::int64_t image_size = 0;
    std::int64_t max_text_len = 0;
    std::int64_t grid = 2;
    std::uint64_t seed = 0;
    std::vector<Scene> scenes;  // indexed by scene_id
    std::vector<PairedSample> train, val, test;

    const std::vector<PairedSample>& split(const std::string& name) const;
};

// Builds n distinct scenes, renders and captions them, and partitions them
// into train/val/test with no scene shared between splits. Throws if n
// exceeds the distinct-scene capacity of the grid.
Corpus build_corpus(const Config& cfg, std::int64_t n, std::int64_t grid, std::uint64_t seed,
                    const std::array<double, 3>& split_fractions);

void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);
std::uint64_t corpus_hash(const std::string& dir);

// ---------------------------------------------------------------------------
// downstream task samples
// ---------------------------------------------------------------------------

enum class Task { vqa, nlvr, ve };

const char* task_name(Task t);
Task parse_task(const std::string& name);

enum class VeLabel : std::int32_t { entail = 0, neutral = 1, contradict = 2 };

struct TaskSample {
    Task task;
    std::int64_t sample_a = -1;          // index into the source split
    std::int64_t sample_b = -1;          // second image (nlvr only)
    std::vector<std::int32_t> text;      // question/statement/hypothesis tokens, padded
    std::vector<std::int32_t> answer;    // vqa answer tokens [START] <word> [END]
    std::int32_t label = -1;             // nlvr: 0/1 matched; ve: VeLabel
};

// Derives one task sample. VQA returns nullopt when the scene has no shape
// occurring exactly once (caller resamples).
std::optional<TaskSample> derive_vqa(const Corpus& corpus, const std::string& split, std::int64_t idx,
                                     RngStream& rng);
TaskSample derive_nlvr(const Corpus& corpus, const std::string& split, std::int64_t idx_a, std::int64_t idx_b,
                       RngStream& rng);
TaskSample derive_ve(const Corpus& corpus, const std::string& split, std::int64_t idx, RngStream& rng);

// Re-derives the label of a task sample from its scene(s) by the fixed rule;
// used as the brute-force label checker.
std::int32_t rederive_label(const TaskSample& ts, const Corpus& corpus, const std::string& split);

// Builds a deterministic task dataset of exactly `count` samples over a split.
std::vector<TaskSample> build_task_dataset(const Corpus& corpus, const std::string& split, Task task,
                                           std::int64_t count, RngStream& rng);

// ---------------------------------------------------------------------------
// patch extraction
// ---------------------------------------------------------------------------

// (H,W,C) image -> (N, patch*patch*C) rows, patches in row-major grid order,
// pixels row-major (py, px, c) within a patch.
template <typename S>
Tensor<S> patchify(const TensorF& image, std::int64_t patch) {
    const std::int64_t h = image.shape[0], w = image.shape[1], c = image.shape[2];
    const std::int64_t gy = h / patch, gx = w / patch;
    Tensor<S> out({gy * gx, patch * patch * c});
    for (std::int64_t py = 0; py < gy; ++py) {
        for (std::int64_t px = 0; px < gx; ++px) {
            S* dst = out.data.data() + (py * gx + px) * patch * patch * c;
            for (std::int64_t y = 0; y < patch; ++y) {
                const float* src = image.data.data() + ((py * patch + y) * w + px * patch) * c;
                for (std::int64_t i = 0; i < patch * c; ++i) dst[y * patch * c + i] = static_cast<S>(src[i]);
            }
        }
    }
    return out;
}

}  // namespace mvlm
