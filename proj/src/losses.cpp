#include "mvlm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvlm {

HardNegatives sample_hard_negatives(const TensorD& similarities, double temperature, RngStream& rng) {
    if (similarities.rank() != 2 || similarities.shape[0] != similarities.shape[1]) {
        throw std::invalid_argument("sample_hard_negatives: similarity matrix must be square");
    }
    const std::int64_t n = similarities.shape[0];
    if (n < 2) throw std::invalid_argument("sample_hard_negatives: batch of at least 2 required");
    if (temperature <= 0.0) throw std::invalid_argument("sample_hard_negatives: temperature must be positive");

    HardNegatives out;
    auto draw = [&](auto value_at, std::int64_t self) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < n; ++j) {
            if (j != self) mx = std::max(mx, value_at(j) / temperature);
        }
        std::vector<double> weights;
        std::vector<std::int32_t> ids;
        weights.reserve(static_cast<std::size_t>(n - 1));
        for (std::int64_t j = 0; j < n; ++j) {
            if (j == self) continue;
            weights.push_back(std::exp(value_at(j) / temperature - mx));
            ids.push_back(static_cast<std::int32_t>(j));
        }
        return ids[rng.categorical(weights)];
    };
    for (std::int64_t i = 0; i < n; ++i) {
        out.text_for_image.push_back(draw([&](std::int64_t j) { return similarities.at(i * n + j); }, i));
    }
    for (std::int64_t j = 0; j < n; ++j) {
        out.image_for_text.push_back(draw([&](std::int64_t i) { return similarities.at(i * n + j); }, j));
    }
    return out;
}

PretrainBatch make_pretrain_batch(const Config& cfg, const std::vector<const PairedSample*>& samples,
                                  RngStream& mask_rng) {
    PretrainBatch batch;
    const auto bsz = static_cast<std::int64_t>(samples.size());
    batch.tokens = IndexTensor({bsz, cfg.max_text_len});
    for (std::int64_t b = 0; b < bsz; ++b) {
        const PairedSample& s = *samples[static_cast<std::size_t>(b)];
        if (static_cast<std::int64_t>(s.tokens.size()) != cfg.max_text_len) {
            throw std::invalid_argument("make_pretrain_batch: sample tokens not padded to max_text_len");
        }
        batch.images.push_back(&s.image);
        std::copy(s.tokens.begin(), s.tokens.end(), batch.tokens.data.begin() + b * cfg.max_text_len);
        batch.legs.push_back(plan_strategy(cfg, mask_rng, s.tokens));
    }
    return batch;
}

namespace {

// Gathers per-sample leg data of one kind into batch-level tensors.
struct LegBatch {
    IndexTensor tokens;          // (B,M) leg input tokens
    MaskTensor text_mask;        // (B,M) positions replaced by [MASK]
    MaskTensor encoder_visible;  // (B,N)
    MaskTensor encoder_hidden;   // (B,N) complement, rows entering the MIM loss
    std::int64_t hidden_mask_patches = 0;
};

LegBatch collect_leg(const Config& cfg, const PretrainBatch& batch, StrategyLeg kind) {
    const auto bsz = static_cast<std::int64_t>(batch.images.size());
    LegBatch lb;
    lb.tokens = IndexTensor({bsz, cfg.max_text_len});
    lb.text_mask = MaskTensor({bsz, cfg.max_text_len});
    lb.encoder_visible = MaskTensor({bsz, cfg.num_patches()}, 1);
    lb.encoder_hidden = MaskTensor({bsz, cfg.num_patches()}, 0);
    for (std::int64_t b = 0; b < bsz; ++b) {
        const auto& legs = batch.legs[static_cast<std::size_t>(b)];
        const Leg* leg = nullptr;
        for (const auto& l : legs) {
            if (l.kind == kind) leg = &l;
        }
        if (!leg) throw std::logic_error("collect_leg: requested leg missing from the plan");
        std::copy(leg->tokens.begin(), leg->tokens.end(), lb.tokens.data.begin() + b * cfg.max_text_len);
        if (!leg->plan.text_mask.empty()) {
            std::copy(leg->plan.text_mask.begin(), leg->plan.text_mask.end(),
                      lb.text_mask.data.begin() + b * cfg.max_text_len);
        }
        if (leg->image_masked) {
            for (std::int64_t i = 0; i < cfg.num_patches(); ++i) {
                const auto vis = leg->encoder_visible[static_cast<std::size_t>(i)];
                lb.encoder_visible.data[static_cast<std::size_t>(b * cfg.num_patches() + i)] = vis;
                lb.encoder_hidden.data[static_cast<std::size_t>(b * cfg.num_patches() + i)] = vis ? 0 : 1;
            }
            lb.hidden_mask_patches += leg->plan.hidden_patch_count();
        }
    }
    return lb;
}

MaskTensor gather_mask(const MaskTensor& m, const std::vector<std::int32_t>& idx) {
    MaskTensor out({static_cast<std::int64_t>(idx.size()), m.cols()});
    for (std::size_t g = 0; g < idx.size(); ++g) {
        std::copy(m.data.begin() + idx[g] * m.cols(), m.data.begin() + (idx[g] + 1) * m.cols(),
                  out.data.begin() + static_cast<std::int64_t>(g) * m.cols());
    }
    return out;
}

}  // namespace

template <typename S>
BatchLossResult<S> build_total_loss(ModelGraph<S>& mg, const PretrainBatch& batch, RngStream* negative_rng,
                                    const HardNegatives* frozen_negatives) {
    using Id = typename Graph<S>::Id;
    const Config& cfg = mg.config();
    Graph<S>& g = mg.graph();
    const auto bsz = static_cast<std::int64_t>(batch.images.size());
    if (bsz == 0) throw std::invalid_argument("build_total_loss: empty batch");

    const bool want_itc = cfg.loss_set.has(LossKind::ITC);
    const bool want_itm = cfg.loss_set.has(LossKind::ITM);
    const bool want_mlm = cfg.loss_set.has(LossKind::MLM);
    const bool want_mim = cfg.loss_set.has(LossKind::MIM);

    BatchLossResult<S> res;
    const Tensor<S> patches = mg.stack_patches(batch.images);
    const MaskTensor text_pads = ModelGraph<S>::pad_mask(batch.tokens);

    Id v_unmasked = -1;  // f_im(I), shared by the alignment losses and the MLM leg
    Id w_unmasked = -1;  // f_txt(T), shared by the alignment losses and the MIM leg
    auto image_features = [&] {
        if (v_unmasked < 0) v_unmasked = mg.encode_image(patches, nullptr);
        return v_unmasked;
    };
    auto text_features = [&] {
        if (w_unmasked < 0) w_unmasked = mg.encode_text(batch.tokens);
        return w_unmasked;
    };

    std::vector<Id> components;

    // ---- alignment losses on the unmasked pair ----
    if (want_itc || want_itm) {
        const Id zi = mg.project_itc_image(image_features());
        const Id zt = mg.project_itc_text(text_features());
        if (want_itc) {
            const Id itc = g.contrastive_loss(zi, zt, mg.temperature(), mg.log_temperature_node());
            res.breakdown.itc = static_cast<double>(g.value(itc).data[0]);
            components.push_back(itc);
        }
        if (want_itm) {
            if (frozen_negatives) {
                res.negatives = *frozen_negatives;
            } else {
                if (!negative_rng) throw std::invalid_argument("build_total_loss: ITM requires a negative rng");
                // similarities detached: selection is a constant for gradients
                const Tensor<S>& vi = g.value(zi);
                const Tensor<S>& vt = g.value(zt);
                TensorD sims({bsz, bsz});
                for (std::int64_t i = 0; i < bsz; ++i) {
                    for (std::int64_t j = 0; j < bsz; ++j) {
                        double dot = 0.0;
                        for (std::int64_t k = 0; k < cfg.proj_dim; ++k) {
                            dot += static_cast<double>(vi.at(i * cfg.proj_dim + k)) *
                                   static_cast<double>(vt.at(j * cfg.proj_dim + k));
                        }
                        sims.at(i * bsz + j) = dot;
                    }
                }
                res.negatives = sample_hard_negatives(sims, mg.temperature(), *negative_rng);
            }

            std::vector<std::int32_t> img_idx, txt_idx;
            for (std::int64_t i = 0; i < bsz; ++i) {  // positives
                img_idx.push_back(static_cast<std::int32_t>(i));
                txt_idx.push_back(static_cast<std::int32_t>(i));
            }
            for (std::int64_t i = 0; i < bsz; ++i) {  // (image i, hard-negative text)
                img_idx.push_back(static_cast<std::int32_t>(i));
                txt_idx.push_back(res.negatives.text_for_image[static_cast<std::size_t>(i)]);
            }
            for (std::int64_t j = 0; j < bsz; ++j) {  // (hard-negative image, text j)
                img_idx.push_back(res.negatives.image_for_text[static_cast<std::size_t>(j)]);
                txt_idx.push_back(static_cast<std::int32_t>(j));
            }

            const Id v_sel = g.gather_batch(image_features(), img_idx);
            const Id w_sel = g.gather_batch(text_features(), txt_idx);
            const MaskTensor sel_pads = gather_mask(text_pads, txt_idx);
            const Id img_cross = mg.cross_encode(CrossSide::image, v_sel, w_sel, nullptr, &sel_pads);
            const Id txt_cross = mg.cross_encode(CrossSide::text, w_sel, v_sel, &sel_pads, nullptr);
            const Id logits = mg.itm_logits(img_cross, txt_cross);

            IndexTensor labels({static_cast<std::int64_t>(img_idx.size())});
            for (std::int64_t i = 0; i < bsz; ++i) labels.data[static_cast<std::size_t>(i)] = 1;
            const Id itm = g.softmax_cross_entropy(logits, labels);
            res.breakdown.itm = static_cast<double>(g.value(itm).data[0]);
            components.push_back(itm);
        }
    }

    // ---- masked-signal reconstruction legs ----
    const bool joint = cfg.masking_strategy == MaskingStrategy::both;
    if (want_mlm) {
        const LegBatch lb = collect_leg(cfg, batch, joint ? StrategyLeg::both : StrategyLeg::mlm_leg);
        const Id w_m = mg.encode_text(lb.tokens);
        // strategy "one" conditions on the unmasked image, "both" on the masked one
        Id kv = -1;
        if (joint) {
            kv = mg.encode_image(patches, &lb.encoder_visible);
        } else {
            kv = image_features();
        }
        const Id txt_cross = mg.cross_encode(CrossSide::text, w_m, kv, &text_pads, nullptr);
        const Id logits = mg.classify_tokens(txt_cross);
        const Id mlm = g.masked_token_cross_entropy(logits, batch.tokens, lb.text_mask);
        res.breakdown.mlm = static_cast<double>(g.value(mlm).data[0]);
        std::int64_t masked = 0;
        for (auto m : lb.text_mask.data) masked += m;
        res.breakdown.masked_token_count = masked;
        components.push_back(mlm);
    }
    if (want_mim) {
        const LegBatch lb = collect_leg(cfg, batch, joint ? StrategyLeg::both : StrategyLeg::mim_leg);
        const Id v_m = mg.encode_image(patches, &lb.encoder_visible);
        Id kv = -1;
        MaskTensor kv_pads = text_pads;
        if (joint) {
            kv = mg.encode_text(lb.tokens);  // masked text; pad structure unchanged
        } else {
            kv = text_features();
        }
        const Id img_cross = mg.cross_encode(CrossSide::image, v_m, kv, nullptr, &kv_pads);
        const Id pred = mg.decode_image(img_cross, kv, &kv_pads);
        const Id mim = g.masked_l1(pred, patches, lb.encoder_hidden);
        res.breakdown.mim = static_cast<double>(g.value(mim).data[0]);
        res.breakdown.masked_pixel_count = lb.hidden_mask_patches * cfg.mask_patch * cfg.mask_patch * cfg.channels;
        components.push_back(mim);
    }

    if (components.empty()) throw std::logic_error("build_total_loss: loss set produced no components");
    Id total = components[0];
    for (std::size_t i = 1; i < components.size(); ++i) total = g.add(total, components[i]);
    res.total_node = total;
    res.breakdown.total = static_cast<double>(g.value(total).data[0]);
    return res;
}

template BatchLossResult<float> build_total_loss<float>(ModelGraph<float>&, const PretrainBatch&, RngStream*,
                                                        const HardNegatives*);
template BatchLossResult<double> build_total_loss<double>(ModelGraph<double>&, const PretrainBatch&, RngStream*,
                                                          const HardNegatives*);

}  // namespace mvlm
