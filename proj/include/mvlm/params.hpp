#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mvlm/config.hpp"
#include "mvlm/rng.hpp"
#include "mvlm/tensor.hpp"

namespace mvlm {

// Learning-rate groups: the uni-modal encoders train at the constant
// lr_unimodal; cross-modality encoders and all heads follow the
// warmup-cosine schedule.
enum class ParamGroup { unimodal_encoders, cross_and_heads };

// Named master weights (32-bit, the canonical checkpoint precision).
class ParamStore {
public:
    std::int64_t add(const std::string& name, std::vector<std::int64_t> shape);
    std::int64_t find(const std::string& name) const;  // -1 when absent
    std::int64_t index(const std::string& name) const;  // throws when absent

    std::int64_t count() const { return static_cast<std::int64_t>(values_.size()); }
    const std::string& name(std::int64_t i) const { return names_[static_cast<std::size_t>(i)]; }
    const std::vector<std::int64_t>& shape(std::int64_t i) const { return shapes_[static_cast<std::size_t>(i)]; }
    std::vector<float>& values(std::int64_t i) { return values_[static_cast<std::size_t>(i)]; }
    const std::vector<float>& values(std::int64_t i) const { return values_[static_cast<std::size_t>(i)]; }

    template <typename S>
    Tensor<S> tensor(std::int64_t i) const {
        Tensor<S> t;
        t.shape = shapes_[static_cast<std::size_t>(i)];
        const auto& v = values_[static_cast<std::size_t>(i)];
        t.data.resize(v.size());
        for (std::size_t j = 0; j < v.size(); ++j) t.data[j] = static_cast<S>(v[j]);
        return t;
    }

    std::int64_t total_scalars() const;

private:
    std::vector<std::string> names_;
    std::vector<std::vector<std::int64_t>> shapes_;
    std::vector<std::vector<float>> values_;
    std::map<std::string, std::int64_t> index_;
};

// Gradient buffers aligned with a ParamStore; a tensor stays empty until the
// backward pass touches its parameter.
template <typename S>
struct GradStore {
    std::vector<Tensor<S>> grads;

    explicit GradStore(const ParamStore& store) : grads(static_cast<std::size_t>(store.count())) {}
    void clear() {
        for (auto& g : grads) g = Tensor<S>{};
    }
    bool touched(std::int64_t i) const { return !grads[static_cast<std::size_t>(i)].data.empty(); }
};

// Builds every base-model array: patch/token embeddings, positional tables,
// both uni-modal encoders, both cross-modality encoders, the image decoder,
// the token classifier, ITC projections, the ITM head and the temperature.
ParamStore build_model_params(const Config& cfg);

// Adds the arrays of one downstream head ("vqa", "nlvr" or "ve").
void add_head_params(ParamStore& store, const Config& cfg, const std::string& task);

// weights ~ truncated normal(0, 0.02) clipped at 2 sigma; biases and norm
// shifts 0; norm scales 1; log-temperature ln(cfg.temperature). Uses the
// "init" stream of cfg.seed.
void init_params(ParamStore& store, const Config& cfg);

ParamGroup param_group(const std::string& name);
bool decay_excluded(const std::string& name);

// Block array name suffixes (shared by the model builder and the VQA head
// initialization).
std::vector<std::string> self_block_suffixes();
std::vector<std::string> cross_block_suffixes();

// Bilinear (corner-aligned) resampling of a (old^2+1, dim) positional table
// to (new^2+1, dim); the class-token row is copied.
TensorF interpolate_positions(const TensorF& table, std::int64_t old_grid, std::int64_t new_grid);

}  // namespace mvlm
