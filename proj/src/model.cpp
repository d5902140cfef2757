#include "mvlm/model.hpp"

#include <cmath>
#include <stdexcept>

namespace mvlm {

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::leaf(const std::string& name) {
    const std::int64_t idx = params_.index(name);
    const auto it = leaves_.find(idx);
    if (it != leaves_.end()) return it->second;
    Tensor<S>* sink = grads_ ? &grads_->grads[static_cast<std::size_t>(idx)] : nullptr;
    const Id id = graph_.param(params_.template tensor<S>(idx), sink);
    leaves_[idx] = id;
    return id;
}

template <typename S>
Tensor<S> ModelGraph<S>::stack_patches(const std::vector<const TensorF*>& images) const {
    const auto bsz = static_cast<std::int64_t>(images.size());
    Tensor<S> out({bsz, cfg_.num_patches(), cfg_.patch_pixels()});
    for (std::int64_t b = 0; b < bsz; ++b) {
        const TensorF& img = *images[static_cast<std::size_t>(b)];
        if (img.shape != std::vector<std::int64_t>{cfg_.image_size, cfg_.image_size, cfg_.channels}) {
            throw std::invalid_argument("stack_patches: image shape " + shape_string(img.shape) +
                                        " does not match the configuration");
        }
        const Tensor<S> p = patchify<S>(img, cfg_.encoder_patch);
        std::copy(p.data.begin(), p.data.end(), out.batch_ptr(b));
    }
    return out;
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::mlp(const std::string& prefix, Id x) {
    const Id h = graph_.gelu(graph_.linear(x, leaf(prefix + "mlp.w1"), leaf(prefix + "mlp.b1")));
    return graph_.linear(h, leaf(prefix + "mlp.w2"), leaf(prefix + "mlp.b2"));
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::attention_sublayer(const std::string& prefix, Id q_in, Id kv_in,
                                                             const MaskTensor* kv_mask, bool causal) {
    const Id q = graph_.linear(q_in, leaf(prefix + "wq"), leaf(prefix + "bq"));
    const Id k = graph_.linear(kv_in, leaf(prefix + "wk"), leaf(prefix + "bk"));
    const Id v = graph_.linear(kv_in, leaf(prefix + "wv"), leaf(prefix + "bv"));
    const Id att = graph_.attention(q, k, v, cfg_.n_heads, kv_mask, causal);
    return graph_.linear(att, leaf(prefix + "wo"), leaf(prefix + "bo"));
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::self_attention_block(const std::string& prefix, Id x, bool pre_norm,
                                                               const MaskTensor* kv_mask, bool causal) {
    if (pre_norm) {
        const Id n1 = graph_.layer_norm(x, leaf(prefix + "norm1.g"), leaf(prefix + "norm1.b"));
        x = graph_.add(x, attention_sublayer(prefix + "attn.", n1, n1, kv_mask, causal));
        const Id n2 = graph_.layer_norm(x, leaf(prefix + "norm2.g"), leaf(prefix + "norm2.b"));
        return graph_.add(x, mlp(prefix, n2));
    }
    const Id h = graph_.layer_norm(graph_.add(x, attention_sublayer(prefix + "attn.", x, x, kv_mask, causal)),
                                   leaf(prefix + "norm1.g"), leaf(prefix + "norm1.b"));
    return graph_.layer_norm(graph_.add(h, mlp(prefix, h)), leaf(prefix + "norm2.g"), leaf(prefix + "norm2.b"));
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::cross_attention_block(const std::string& prefix, Id x, Id kv,
                                                                const MaskTensor* x_pad, const MaskTensor* kv_pad,
                                                                bool causal_self) {
    const Id h1 = graph_.layer_norm(graph_.add(x, attention_sublayer(prefix + "attn.", x, x, x_pad, causal_self)),
                                    leaf(prefix + "norm1.g"), leaf(prefix + "norm1.b"));
    const Id h2 = graph_.layer_norm(graph_.add(h1, attention_sublayer(prefix + "xattn.", h1, kv, kv_pad, false)),
                                    leaf(prefix + "normx.g"), leaf(prefix + "normx.b"));
    return graph_.layer_norm(graph_.add(h2, mlp(prefix, h2)), leaf(prefix + "norm2.g"), leaf(prefix + "norm2.b"));
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::encode_image(const Tensor<S>& patches, const MaskTensor* visible) {
    if (patches.rank() != 3 || patches.shape[1] != cfg_.num_patches() || patches.shape[2] != cfg_.patch_pixels()) {
        throw std::invalid_argument("encode_image: patch tensor shape " + shape_string(patches.shape) +
                                    " does not match the configuration");
    }
    Id x = graph_.linear(graph_.input(patches), leaf("patch_embed.w"), leaf("patch_embed.b"));
    if (visible) x = graph_.mask_rows(x, *visible, leaf("image_mask_embed"));
    x = graph_.prepend_row(x, leaf("image_cls"));
    x = graph_.add_positions(x, leaf("image_pos"));
    for (std::int64_t i = 0; i < cfg_.n_enc_blocks; ++i) {
        x = self_attention_block("img_enc." + std::to_string(i) + ".", x, /*pre_norm=*/true, nullptr);
    }
    return x;
}

template <typename S>
MaskTensor ModelGraph<S>::pad_mask(const IndexTensor& tokens) {
    MaskTensor m(tokens.shape);
    for (std::size_t i = 0; i < tokens.data.size(); ++i) m.data[i] = tokens.data[i] != Vocabulary::kPad;
    return m;
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::encode_text(const IndexTensor& tokens) {
    if (tokens.cols() != cfg_.max_text_len) {
        throw std::invalid_argument("encode_text: token batches must be padded to max_text_len");
    }
    const MaskTensor pads = pad_mask(tokens);
    Id x = graph_.embed(leaf("token_embed"), tokens);
    x = graph_.add_positions(x, leaf("text_pos"));
    for (std::int64_t i = 0; i < cfg_.n_enc_blocks; ++i) {
        x = self_attention_block("txt_enc." + std::to_string(i) + ".", x, /*pre_norm=*/false, &pads);
    }
    return x;
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::cross_encode(CrossSide side, Id queries, Id keys_values,
                                                       const MaskTensor* q_pad, const MaskTensor* kv_pad) {
    const std::string base = side == CrossSide::image ? "img_cross." : "txt_cross.";
    Id x = queries;
    for (std::int64_t i = 0; i < cfg_.n_cross_blocks; ++i) {
        x = cross_attention_block(base + std::to_string(i) + ".", x, keys_values, q_pad, kv_pad);
    }
    return x;
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::decode_image(Id image_cross, Id text_features, const MaskTensor* text_pad) {
    Id x = image_cross;
    for (std::int64_t i = 0; i < cfg_.n_cross_blocks; ++i) {
        x = cross_attention_block("img_dec." + std::to_string(i) + ".", x, text_features, nullptr, text_pad);
    }
    x = graph_.drop_row0(x);
    return graph_.linear(x, leaf("img_dec.out.w"), leaf("img_dec.out.b"));
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::classify_tokens(Id text_cross) {
    return graph_.linear(text_cross, leaf("mlm_head.w"), leaf("mlm_head.b"));
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::project_itc_image(Id image_features) {
    const Id cls = graph_.row(image_features, 0);
    return graph_.l2_normalize(graph_.linear(cls, leaf("itc_img.w"), leaf("itc_img.b")));
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::project_itc_text(Id text_features) {
    const Id start = graph_.row(text_features, 0);
    return graph_.l2_normalize(graph_.linear(start, leaf("itc_txt.w"), leaf("itc_txt.b")));
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::itm_logits(Id image_cross, Id text_cross) {
    const Id fused = graph_.mul(graph_.row(image_cross, 0), graph_.row(text_cross, 0));
    return graph_.linear(fused, leaf("itm_head.w"), leaf("itm_head.b"));
}

template <typename S>
double ModelGraph<S>::temperature() const {
    return std::exp(static_cast<double>(params_.values(params_.index("log_temperature"))[0]));
}

template <typename S>
typename ModelGraph<S>::Id ModelGraph<S>::log_temperature_node() {
    if (!cfg_.learnable_temperature) return -1;
    return leaf("log_temperature");
}

template class ModelGraph<float>;
template class ModelGraph<double>;

}  // namespace mvlm
