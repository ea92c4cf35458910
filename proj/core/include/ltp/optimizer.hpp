#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "ltp/autodiff.hpp"
#include "ltp/mask.hpp"
#include "ltp/model.hpp"
#include "ltp/prompt.hpp"

namespace ltp {

struct AdamWConfig {
    double learning_rate = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

// Moments are created on first touch and only ever written for gated-in entries.
struct OptimizerState {
    AdamWConfig hp;
    std::map<std::string, Tensor> first_moment;
    std::map<std::string, Tensor> second_moment;
    std::size_t step = 0;
};

// One AdamW step (decoupled weight decay, bias-corrected moments) over every tensor that
// has a gradient. Backbone entries whose mask bit is false keep value and both moments
// untouched; prompt tensors are never gated. A null mask gates nothing.
void masked_adamw_step(Checkpoint& checkpoint, SoftPrompt* prompt, const GradientMap& grads,
                       const SparsityMask* mask, OptimizerState& state);

// Scales gradients in place so their global L2 norm (over gated-in entries, in name order)
// is at most max_norm. Returns the norm before clipping.
double clip_grad_norm(GradientMap& grads, const SparsityMask* mask, double max_norm);

}  // namespace ltp
