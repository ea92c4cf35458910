#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ltp/corpus.hpp"
#include "ltp/mask.hpp"
#include "ltp/model.hpp"

namespace ltp {

struct SelectionConfig {
    Strategy strategy = Strategy::Vanilla;
    Scope scope;
    double active_ratio = 0.2;
    double l1_coefficient = 0.1;
    std::size_t epochs = 3;
    std::size_t batch_size = 32;
    double learning_rate = 5e-5;
    std::size_t eval_every = 1000;
    double validation_fraction = 0.1;
    std::size_t max_steps = 0;  // 0: no cap beyond epochs
    double clip_norm = 1.0;
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

struct ParamInfo {
    Shape shape;
    ParamTag tag;
};

// |theta_l - theta| per eligible parameter, plus the layout of the whole backbone.
struct DeltaMap {
    std::map<std::string, Tensor> deltas;
    std::map<std::string, ParamInfo> params;  // every backbone parameter
    std::size_t num_layers = 0;
    Strategy strategy = Strategy::Vanilla;
    Scope scope;
    std::string theta_fingerprint;
    std::string theta_l_fingerprint;
    std::string structure_fingerprint;

    // Bare map for tests and tools; `params` covers exactly the given deltas.
    static DeltaMap from_tensors(std::map<std::string, Tensor> deltas, const std::map<std::string, ParamTag>& tags,
                                 std::size_t num_layers);
};

DeltaMap compute_deltas(const Checkpoint& theta, const Checkpoint& theta_l, Strategy strategy, const Scope& scope);

// K = floor(mu * N) entries under the order: delta descending, then parameter name,
// then flat index. per_layer applies the rule inside each transformer layer.
SparsityMask select_mask(const DeltaMap& deltas, double mu, const Scope& scope);

std::size_t active_count(double mu, std::size_t eligible);

struct LayerStat {
    int layer = 0;
    std::size_t selected = 0;
    std::size_t eligible = 0;
    double share = 0.0;
};

struct MaskReport {
    std::vector<LayerStat> layers;  // 0 = embedding block, num_layers + 1 = head
    std::size_t selected = 0;

    double share_of(int layer) const;
};

MaskReport mask_report(const SparsityMask& mask, const Checkpoint& checkpoint);

struct AdaptEval {
    std::size_t step = 0;
    double validation_loss = 0.0;
};

struct AdaptResult {
    Checkpoint theta_l;
    std::size_t steps = 0;
    std::size_t best_step = 0;
    std::vector<double> train_losses;
    std::vector<AdaptEval> evals;
};

// MLM adaptation with an L1 pull towards the starting values. Strategy-frozen
// parameters are constants; decouple_untie unties the head first. The result is the
// evaluated checkpoint with the lowest held-out MLM loss.
AdaptResult mlm_adapt(const Checkpoint& pretrained, const Corpus& corpus, const SelectionConfig& config);

}  // namespace ltp
