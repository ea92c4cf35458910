#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ltp/corpus.hpp"
#include "ltp/mask.hpp"
#include "ltp/model.hpp"
#include "ltp/optimizer.hpp"
#include "ltp/prompt.hpp"

namespace ltp {

// Mean cross-entropy over every loss position in the batch.
Var mlm_batch_loss(const BoundModel& model, const MlmBatch& batch);

// Mean verbalizer cross-entropy at the MASK slot of each templated input.
Var prompt_batch_loss(const BoundModel& model, std::optional<Var> prompt_embeddings,
                      std::span<const TemplatedInput> inputs, std::span<const Label> labels,
                      const Verbalizer& verbalizer);

double mlm_eval_loss(const Checkpoint& checkpoint, const std::vector<MlmBatch>& batches);

// Top-1 recovery of the original token at loss positions.
double mlm_recovery_accuracy(const Checkpoint& checkpoint, const std::vector<MlmBatch>& batches);

struct PretrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
    MlmRecipe recipe;
};

struct PretrainResult {
    Checkpoint theta;
    std::vector<double> losses;  // one per step
};

// MLM training from build_model(config, seed) on the mixture of all corpora.
PretrainResult pretrain_multilingual(const ModelConfig& config, const std::vector<Corpus>& corpora,
                                     const PretrainConfig& pretrain);

// A copy of theta shaped like `current`: when `current` has an untied head and theta
// does not, theta is untied first. Any other layout difference is a FingerprintMismatch.
Checkpoint reset_backbone(const Checkpoint& current, const Checkpoint& theta);

enum class RegimeKind { PretrainMlm, FullFt, SoftPromptOnly, Ltp };

std::string_view regime_name(RegimeKind kind);
RegimeKind parse_regime(std::string_view name);

struct TrainRegime {
    RegimeKind kind = RegimeKind::Ltp;
    std::size_t epochs = 70;
    std::size_t batch_size = 32;
    double learning_rate = 2e-5;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    TemplateLayout layout = TemplateLayout::TemplateOrder;
    std::uint64_t seed = 0;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double dev_accuracy = 0.0;
};

struct TuneResult {
    Checkpoint backbone;
    std::optional<SoftPrompt> prompt;
    std::size_t best_epoch = 0;  // 1-based
    double best_dev_accuracy = 0.0;
    std::vector<EpochLog> epochs;
};

// Called after each optimizer step with the clipped gradients.
struct TuneHooks {
    std::function<void(std::size_t step, const GradientMap& grads, const Checkpoint& backbone,
                       const SoftPrompt* prompt)>
        after_step;
};

// full_ft: every backbone parameter trains; with a prompt this is Prompt+LM tuning.
// soft_prompt_only: backbone frozen, prompt required, no mask.
// ltp: mask and prompt required; only selected backbone entries move.
TuneResult prompt_tune(const Checkpoint& theta, const SparsityMask* mask, const SoftPrompt* prompt,
                       const std::vector<NliExample>& train, const std::vector<NliExample>& dev,
                       const Verbalizer& verbalizer, const TrainRegime& regime, const TuneHooks& hooks = {});

struct Accuracy {
    std::size_t correct = 0;
    std::size_t count = 0;

    double value() const { return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count); }
};

struct EvalResult {
    Accuracy overall;
    std::map<std::string, Accuracy> per_language;
    std::vector<Label> predictions;
};

EvalResult evaluate(const Checkpoint& checkpoint, const SoftPrompt* prompt, const Verbalizer& verbalizer,
                    const std::vector<NliExample>& examples, TemplateLayout layout = TemplateLayout::TemplateOrder);

}  // namespace ltp
