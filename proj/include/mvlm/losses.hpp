#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mvlm/config.hpp"
#include "mvlm/data.hpp"
#include "mvlm/masking.hpp"
#include "mvlm/model.hpp"

namespace mvlm {

// Per-batch loss scalars. Components absent from the configured loss set
// stay disengaged (nullopt), which is distinct from a measured zero.
struct LossBreakdown {
    std::optional<double> mlm, mim, itc, itm;
    double total = 0.0;
    std::int64_t masked_token_count = 0;
    std::int64_t masked_pixel_count = 0;

    double component_sum() const {
        double s = 0.0;
        for (const auto& c : {mlm, mim, itc, itm}) {
            if (c) s += *c;
        }
        return s;
    }
};

struct HardNegatives {
    std::vector<std::int32_t> text_for_image;   // text index j != i sampled for image i
    std::vector<std::int32_t> image_for_text;   // image index i != j sampled for text j
};

// Samples in-batch hard negatives from the detached similarity matrix:
// probability proportional to the softmax of sim/temperature over the
// off-diagonal entries of each row (texts per image) and column (images per
// text). Requires N >= 2.
HardNegatives sample_hard_negatives(const TensorD& similarities, double temperature, RngStream& rng);

// One pretraining batch: original tokens plus the per-sample masking legs.
struct PretrainBatch {
    std::vector<const TensorF*> images;
    IndexTensor tokens;                     // (B, max_text_len) originals
    std::vector<std::vector<Leg>> legs;     // per sample, per plan_strategy
};

PretrainBatch make_pretrain_batch(const Config& cfg, const std::vector<const PairedSample*>& samples,
                                  RngStream& mask_rng);

template <typename S>
struct BatchLossResult {
    typename Graph<S>::Id total_node = -1;
    LossBreakdown breakdown;
    HardNegatives negatives;                // as used (empty when ITM absent)
};

// Builds every forward required by cfg.loss_set on the batch and returns the
// total loss node: ITC/ITM on the unmasked pair, MLM on the (I, T_m) leg and
// MIM on the (I_m, T) leg under strategy "one", both on the jointly masked
// leg under strategy "both". frozen_negatives bypasses sampling (used by the
// gradient checker to keep the selection constant across evaluations).
template <typename S>
BatchLossResult<S> build_total_loss(ModelGraph<S>& mg, const PretrainBatch& batch, RngStream* negative_rng,
                                    const HardNegatives* frozen_negatives = nullptr);

extern template BatchLossResult<float> build_total_loss<float>(ModelGraph<float>&, const PretrainBatch&,
                                                               RngStream*, const HardNegatives*);
extern template BatchLossResult<double> build_total_loss<double>(ModelGraph<double>&, const PretrainBatch&,
                                                                 RngStream*, const HardNegatives*);

}  // namespace mvlm
