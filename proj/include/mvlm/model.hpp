#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mvlm/config.hpp"
#include "mvlm/data.hpp"
#include "mvlm/graph.hpp"
#include "mvlm/params.hpp"
#include "mvlm/tensor.hpp"

namespace mvlm {

enum class CrossSide { image, text };

// Builds all network forward computations on one tape. Parameter leaves are
// cached so every reuse of a weight accumulates into a single gradient sink.
template <typename S>
class ModelGraph {
public:
    using Id = typename Graph<S>::Id;

    ModelGraph(const Config& cfg, const ParamStore& params, GradStore<S>* grads)
        : cfg_(cfg), params_(params), grads_(grads), graph_(grads != nullptr) {}

    Graph<S>& graph() { return graph_; }
    const Config& config() const { return cfg_; }

    Id leaf(const std::string& name);

    // Stacks per-sample images into a (B, N, patch_pixels) tensor.
    Tensor<S> stack_patches(const std::vector<const TensorF*>& images) const;

    // patchify -> embed -> substitute hidden patches -> prepend [CLS] ->
    // positions -> pre-norm self-attention blocks. visible == nullptr means
    // the unmasked forward.
    Id encode_image(const Tensor<S>& patches, const MaskTensor* visible);

    // token embed + positions -> post-norm self-attention blocks with [PAD]
    // keys masked out of every attention.
    Id encode_text(const IndexTensor& tokens);

    // Pad mask (1 = real token) for a token batch.
    static MaskTensor pad_mask(const IndexTensor& tokens);

    // n_cross_blocks of self-attention + cross-attention + MLP (post-norm).
    Id cross_encode(CrossSide side, Id queries, Id keys_values, const MaskTensor* q_pad,
                    const MaskTensor* kv_pad);

    // Image cross-modality decoder: cross blocks + final linear to
    // per-encoder-patch RGB groups, class row dropped. -> (B, N, patch_pixels)
    Id decode_image(Id image_cross, Id text_features, const MaskTensor* text_pad);

    // Token classifier logits (B, M, vocab).
    Id classify_tokens(Id text_cross);

    // ITC projections of the [CLS]/[START] feature rows -> unit rows (B, proj_dim).
    Id project_itc_image(Id image_features);
    Id project_itc_text(Id text_features);

    // ITM head over the element-wise product of the cross [CLS]/[START]
    // features: logits (G, 2), index 1 = matched.
    Id itm_logits(Id image_cross, Id text_cross);

    // Temperature currently stored in the parameters (always positive).
    double temperature() const;
    // Node for the learnable log-temperature, or -1 when fixed.
    Id log_temperature_node();

    // Re-usable transformer pieces (downstream heads build on these).
    Id self_attention_block(const std::string& prefix, Id x, bool pre_norm, const MaskTensor* kv_mask,
                            bool causal = false);
    Id cross_attention_block(const std::string& prefix, Id x, Id kv, const MaskTensor* x_pad,
                             const MaskTensor* kv_pad, bool causal_self = false);

private:
    Id mlp(const std::string& prefix, Id x);
    Id attention_sublayer(const std::string& prefix, Id q_in, Id kv_in, const MaskTensor* kv_mask, bool causal);

    const Config& cfg_;
    const ParamStore& params_;
    GradStore<S>* grads_;
    Graph<S> graph_;
    std::map<std::int64_t, Id> leaves_;
};

extern template class ModelGraph<float>;
extern template class ModelGraph<double>;

}  // namespace mvlm
