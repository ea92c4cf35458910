#include "ltp/trainer.hpp"

#include <algorithm>
#include <numeric>

#include "ltp/error.hpp"
#include "ltp/rng.hpp"

namespace ltp {

Var mlm_batch_loss(const BoundModel& model, const MlmBatch& batch) {
    std::optional<Var> total;
    std::size_t count = 0;
    for (const MlmExample& ex : batch) {
        std::vector<std::size_t> positions;
        std::vector<std::size_t> targets;
        for (std::size_t i = 0; i < ex.loss.size(); ++i) {
            if (ex.loss[i] != 0) {
                positions.push_back(i);
                targets.push_back(ex.target[i]);
            }
        }
        if (positions.empty()) {
            continue;
        }
        Var hidden = encode(model, ex.input);
        Var ce = scale(cross_entropy(mlm_logits(model, hidden, positions), targets),
                       static_cast<double>(positions.size()));
        total = total ? add(*total, ce) : ce;
        count += positions.size();
    }
    if (!total) {
        throw DataError("mlm loss: batch has no loss positions");
    }
    return scale(*total, 1.0 / static_cast<double>(count));
}

Var prompt_batch_loss(const BoundModel& model, std::optional<Var> prompt_embeddings,
                      std::span<const TemplatedInput> inputs, std::span<const Label> labels,
                      const Verbalizer& verbalizer) {
    if (inputs.empty() || inputs.size() != labels.size()) {
        throw ShapeError("prompt_batch_loss: " + std::to_string(inputs.size()) + " inputs for " +
                         std::to_string(labels.size()) + " labels");
    }
    std::optional<Var> total;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const TemplatedInput& ti = inputs[i];
        Var hidden = encode(model, ti.tokens, prompt_embeddings, ti.prompt_insert_index);
        const std::size_t pos[] = {ti.mask_position};
        const std::size_t target[] = {verbalizer.token(labels[i])};
        Var ce = cross_entropy(mlm_logits(model, hidden, pos), target);
        total = total ? add(*total, ce) : ce;
    }
    return scale(*total, 1.0 / static_cast<double>(inputs.size()));
}

double mlm_eval_loss(const Checkpoint& checkpoint, const std::vector<MlmBatch>& batches) {
    if (batches.empty()) {
        throw DataError("mlm_eval_loss: no batches");
    }
    double sum = 0.0;
    for (const MlmBatch& b : batches) {
        Tape tape;
        sum += mlm_batch_loss(bind_model(tape, checkpoint), b).value().item();
    }
    return sum / static_cast<double>(batches.size());
}

double mlm_recovery_accuracy(const Checkpoint& checkpoint, const std::vector<MlmBatch>& batches) {
    std::size_t correct = 0;
    std::size_t count = 0;
    for (const MlmBatch& b : batches) {
        for (const MlmExample& ex : b) {
            std::vector<std::size_t> positions;
            for (std::size_t i = 0; i < ex.loss.size(); ++i) {
                if (ex.loss[i] != 0) {
                    positions.push_back(i);
                }
            }
            if (positions.empty()) {
                continue;
            }
            Tape tape;
            BoundModel bm = bind_model(tape, checkpoint);
            const Tensor logits = mlm_logits(bm, encode(bm, ex.input), positions).value();
            for (std::size_t r = 0; r < positions.size(); ++r) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < logits.cols(); ++c) {
                    if (logits.at(r, c) > logits.at(r, best)) {
                        best = c;
                    }
                }
                correct += best == ex.target[positions[r]] ? 1 : 0;
                ++count;
            }
        }
    }
    return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count);
}

PretrainResult pretrain_multilingual(const ModelConfig& config, const std::vector<Corpus>& corpora,
                                     const PretrainConfig& pretrain) {
    config.validate();
    if (corpora.size() < 2) {
        throw DataError("pretrain_multilingual: the mixture needs at least two languages, got " +
                        std::to_string(corpora.size()));
    }
    if (pretrain.batch_size == 0 || !(pretrain.learning_rate > 0.0)) {
        throw ConfigError("pretrain_multilingual: batch_size and learning_rate must be positive");
    }
    Corpus mixture;
    for (const Corpus& c : corpora) {
        if (c.empty()) {
            throw DataError("pretrain_multilingual: a language corpus is empty");
        }
        mixture.insert(mixture.end(), c.begin(), c.end());
    }
    PretrainResult result{build_model(config, pretrain.seed), {}};
    if (pretrain.steps == 0) {
        return result;
    }
    MlmStream stream = mlm_batches(std::move(mixture), pretrain.batch_size, Rng::mix(pretrain.seed, 0x9E7),
                                   config.vocab_size, pretrain.recipe);
    OptimizerState state;
    state.hp.learning_rate = pretrain.learning_rate;
    state.hp.weight_decay = pretrain.weight_decay;
    auto all = [](const std::string&) { return true; };
    for (std::size_t step = 0; step < pretrain.steps; ++step) {
        const MlmBatch batch = stream.next();
        GradientMap grads;
        {
            Tape tape;
            Var loss = mlm_batch_loss(bind_model(tape, result.theta, all), batch);
            result.losses.push_back(loss.value().item());
            grads = tape.backward(loss);
        }
        clip_grad_norm(grads, nullptr, pretrain.clip_norm);
        masked_adamw_step(result.theta, nullptr, grads, nullptr, state);
    }
    return result;
}

Checkpoint reset_backbone(const Checkpoint& current, const Checkpoint& theta) {
    if (current.config_fingerprint() == theta.config_fingerprint()) {
        if (current.structure_fingerprint() != theta.structure_fingerprint()) {
            throw FingerprintMismatch("reset_backbone: parameter layouts differ");
        }
        return theta;
    }
    ModelConfig relaxed = current.config;
    relaxed.head_tied = theta.config.head_tied;
    if (!current.config.head_tied && theta.config.head_tied && relaxed == theta.config) {
        Checkpoint untied = untie_head(theta);
        if (untied.structure_fingerprint() != current.structure_fingerprint()) {
            throw FingerprintMismatch("reset_backbone: parameter layouts differ");
        }
        return untied;
    }
    throw FingerprintMismatch("reset_backbone: checkpoint config " + current.config_fingerprint() +
                              " does not match theta config " + theta.config_fingerprint());
}

std::string_view regime_name(RegimeKind kind) {
    switch (kind) {
        case RegimeKind::PretrainMlm: return "pretrain_mlm";
        case RegimeKind::FullFt: return "full_ft";
        case RegimeKind::SoftPromptOnly: return "soft_prompt_only";
        case RegimeKind::Ltp: return "ltp";
    }
    return "unknown";
}

RegimeKind parse_regime(std::string_view name) {
    for (RegimeKind k : {RegimeKind::PretrainMlm, RegimeKind::FullFt, RegimeKind::SoftPromptOnly, RegimeKind::Ltp}) {
        if (regime_name(k) == name) {
            return k;
        }
    }
    throw ConfigError("unknown regime '" + std::string(name) + "'");
}

namespace {

void check_regime(const TrainRegime& regime, const SparsityMask* mask, const SoftPrompt* prompt) {
    switch (regime.kind) {
        case RegimeKind::PretrainMlm:
            throw ConfigError("prompt_tune: pretrain_mlm is not a tuning regime");
        case RegimeKind::FullFt:
            if (mask != nullptr) {
                throw ConfigError("prompt_tune: full_ft takes no mask");
            }
            break;
        case RegimeKind::SoftPromptOnly:
            if (mask != nullptr || prompt == nullptr) {
                throw ConfigError("prompt_tune: soft_prompt_only needs a prompt and no mask");
            }
            break;
        case RegimeKind::Ltp:
            if (mask == nullptr || prompt == nullptr) {
                throw ConfigError("prompt_tune: ltp needs both a mask and a prompt");
            }
            break;
    }
    if (regime.epochs == 0 || regime.batch_size == 0) {
        throw ConfigError("prompt_tune: epochs and batch_size must be positive");
    }
    if (!(regime.learning_rate > 0.0) || !(regime.clip_norm > 0.0) || !(regime.weight_decay >= 0.0)) {
        throw ConfigError("prompt_tune: learning_rate and clip_norm must be positive, weight_decay nonnegative");
    }
}

std::vector<TemplatedInput> templates_for(const std::vector<NliExample>& examples, std::size_t prompt_length,
                                          TemplateLayout layout, std::size_t max_seq_len) {
    std::vector<TemplatedInput> out;
    out.reserve(examples.size());
    for (const NliExample& e : examples) {
        out.push_back(build_template(e.premise, e.hypothesis, prompt_length, layout, max_seq_len));
    }
    return out;
}

}  // namespace

TuneResult prompt_tune(const Checkpoint& theta, const SparsityMask* mask, const SoftPrompt* prompt,
                       const std::vector<NliExample>& train, const std::vector<NliExample>& dev,
                       const Verbalizer& verbalizer, const TrainRegime& regime, const TuneHooks& hooks) {
    check_regime(regime, mask, prompt);
    if (train.empty()) {
        throw DataError("prompt_tune: training set is empty");
    }
    if (dev.empty()) {
        throw DataError("prompt_tune: development set is empty");
    }
    verbalizer.validate(theta.config.vocab_size);

    Checkpoint backbone = theta;
    if (mask != nullptr) {
        if (mask->theta_fingerprint != theta.content_fingerprint()) {
            throw FingerprintMismatch("prompt_tune: mask was selected from theta " + mask->theta_fingerprint +
                                      ", got theta " + theta.content_fingerprint());
        }
        if (theta.config.head_tied && mask->entries.count(std::string(param_names::kOutputEmbedding)) != 0) {
            backbone = untie_head(theta);
        }
        check_mask_matches(*mask, backbone);
    }
    const Checkpoint start = backbone;

    std::optional<SoftPrompt> sp;
    if (prompt != nullptr) {
        if (prompt->hidden_dim != theta.config.hidden_dim) {
            throw ShapeError("prompt_tune: prompt width " + std::to_string(prompt->hidden_dim) +
                             " does not match hidden_dim " + std::to_string(theta.config.hidden_dim));
        }
        sp = *prompt;
    }
    const std::size_t n = sp ? sp->length : 0;
    const std::vector<TemplatedInput> inputs = templates_for(train, n, regime.layout, theta.config.max_seq_len);
    templates_for(dev, n, regime.layout, theta.config.max_seq_len);

    TrainablePredicate trainable;
    switch (regime.kind) {
        case RegimeKind::FullFt: trainable = [](const std::string&) { return true; }; break;
        case RegimeKind::SoftPromptOnly: trainable = [](const std::string&) { return false; }; break;
        default: trainable = [mask](const std::string& name) { return mask->any(name); }; break;
    }

    OptimizerState state;
    state.hp.learning_rate = regime.learning_rate;
    state.hp.weight_decay = regime.weight_decay;
    Rng rng(Rng::mix(regime.seed, 0x7E2E));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    TuneResult result{start, sp, 0, -1.0, {}};
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= regime.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += regime.batch_size) {
            const std::size_t end = std::min(order.size(), begin + regime.batch_size);
            GradientMap grads;
            {
                Tape tape;
                BoundModel bm = bind_model(tape, backbone, trainable);
                std::optional<Var> pe;
                if (sp) {
                    pe = prompt_embeddings(bind_prompt(tape, *sp, true));
                }
                std::vector<TemplatedInput> batch_inputs;
                std::vector<Label> batch_labels;
                for (std::size_t i = begin; i < end; ++i) {
                    batch_inputs.push_back(inputs[order[i]]);
                    batch_labels.push_back(train[order[i]].label);
                }
                Var loss = prompt_batch_loss(bm, pe, batch_inputs, batch_labels, verbalizer);
                loss_sum += loss.value().item();
                grads = tape.backward(loss);
            }
            clip_grad_norm(grads, mask, regime.clip_norm);
            masked_adamw_step(backbone, sp ? &*sp : nullptr, grads, mask, state);
            ++batches;
            ++step;
            if (hooks.after_step) {
                hooks.after_step(step, grads, backbone, sp ? &*sp : nullptr);
            }
        }
        const double acc = evaluate(backbone, sp ? &*sp : nullptr, verbalizer, dev, regime.layout).overall.value();
        result.epochs.push_back({epoch, loss_sum / static_cast<double>(batches), acc});
        if (acc > result.best_dev_accuracy) {
            result.best_dev_accuracy = acc;
            result.best_epoch = epoch;
            result.backbone = backbone;
            result.prompt = sp;
        }
    }
    return result;
}

EvalResult evaluate(const Checkpoint& checkpoint, const SoftPrompt* prompt, const Verbalizer& verbalizer,
                    const std::vector<NliExample>& examples, TemplateLayout layout) {
    EvalResult r;
    std::optional<Tensor> pe;
    if (prompt != nullptr) {
        pe = prompt_embeddings(*prompt);
    }
    const std::size_t n = prompt != nullptr ? prompt->length : 0;
    r.predictions.reserve(examples.size());
    for (const NliExample& e : examples) {
        const TemplatedInput ti = build_template(e.premise, e.hypothesis, n, layout, checkpoint.config.max_seq_len);
        const Tensor hidden = encode(checkpoint, ti.tokens, pe ? &*pe : nullptr, ti.prompt_insert_index);
        const Tensor logits = mlm_logits(checkpoint, hidden, ti.mask_position);
        const Label predicted = predict_label(logits.values(), verbalizer);
        r.predictions.push_back(predicted);
        const std::size_t hit = predicted == e.label ? 1 : 0;
        r.overall.correct += hit;
        r.overall.count += 1;
        Accuracy& lang = r.per_language[e.language];
        lang.correct += hit;
        lang.count += 1;
    }
    return r;
}

}  // namespace ltp
