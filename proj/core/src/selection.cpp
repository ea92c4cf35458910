#include "ltp/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ltp/error.hpp"
#include "ltp/optimizer.hpp"
#include "ltp/trainer.hpp"

namespace ltp {

void SelectionConfig::validate() const {
    if (!(active_ratio >= 0.0 && active_ratio <= 1.0)) {
        throw ConfigError("selection: active_ratio must lie in [0, 1], got " + std::to_string(active_ratio));
    }
    if (!(l1_coefficient >= 0.0) || !std::isfinite(l1_coefficient)) {
        throw ConfigError("selection: l1_coefficient must be finite and nonnegative");
    }
    if (batch_size == 0) {
        throw ConfigError("selection: batch_size must be positive");
    }
    if (!(learning_rate > 0.0)) {
        throw ConfigError("selection: learning_rate must be positive");
    }
    if (eval_every == 0) {
        throw ConfigError("selection: eval_every must be positive");
    }
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
        throw ConfigError("selection: validation_fraction must lie in [0, 1)");
    }
    if (!(clip_norm > 0.0)) {
        throw ConfigError("selection: clip_norm must be positive");
    }
}

DeltaMap DeltaMap::from_tensors(std::map<std::string, Tensor> deltas, const std::map<std::string, ParamTag>& tags,
                                std::size_t num_layers) {
    DeltaMap d;
    d.num_layers = num_layers;
    for (const auto& [name, t] : deltas) {
        auto it = tags.find(name);
        if (it == tags.end()) {
            throw DomainError("DeltaMap: no layer tag for " + name);
        }
        d.params.emplace(name, ParamInfo{t.shape(), it->second});
    }
    d.deltas = std::move(deltas);
    return d;
}

DeltaMap compute_deltas(const Checkpoint& theta, const Checkpoint& theta_l, Strategy strategy, const Scope& scope) {
    const bool untie = strategy == Strategy::DecoupleUntie && theta.config.head_tied;
    const Checkpoint untied = untie ? untie_head(theta) : Checkpoint{};
    const Checkpoint& base = untie ? untied : theta;
    if (base.config_fingerprint() != theta_l.config_fingerprint() ||
        base.structure_fingerprint() != theta_l.structure_fingerprint()) {
        throw FingerprintMismatch("compute_deltas: theta (" + base.config_fingerprint() + ") and theta_l (" +
                                  theta_l.config_fingerprint() + ") do not share a layout");
    }
    DeltaMap d;
    d.num_layers = base.config.num_layers;
    d.strategy = strategy;
    d.scope = scope;
    d.theta_fingerprint = theta.content_fingerprint();
    d.theta_l_fingerprint = theta_l.content_fingerprint();
    d.structure_fingerprint = theta_l.structure_fingerprint();
    for (const auto& [name, t] : base.params) {
        const ParamTag& tag = base.tags.at(name);
        d.params.emplace(name, ParamInfo{t.shape(), tag});
        if (frozen_by_strategy(strategy, tag) || !in_scope(scope, tag, d.num_layers)) {
            continue;
        }
        const Tensor& adapted = theta_l.at(name);
        Tensor delta(t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) {
            delta.data()[i] = std::abs(adapted.data()[i] - t.data()[i]);
        }
        d.deltas.emplace(name, std::move(delta));
    }
    return d;
}

std::size_t active_count(double mu, std::size_t eligible) {
    if (!(mu >= 0.0 && mu <= 1.0)) {
        throw DomainError("active ratio must lie in [0, 1], got " + std::to_string(mu));
    }
    // The small slack keeps decimal ratios such as 0.29 * 100 from flooring to 28.
    const auto k = static_cast<std::size_t>(std::floor(mu * static_cast<double>(eligible) + 1e-9));
    return std::min(k, eligible);
}

namespace {

struct Candidate {
    double delta;
    std::uint32_t name;
    std::uint32_t index;
};

bool ranks_before(const Candidate& a, const Candidate& b) {
    if (a.delta != b.delta) {
        return a.delta > b.delta;
    }
    if (a.name != b.name) {
        return a.name < b.name;
    }
    return a.index < b.index;
}

// Marks the top floor(mu * n) candidates.
std::size_t select_top(std::vector<Candidate>& cands, double mu, std::vector<std::vector<std::uint8_t>*>& bits) {
    const std::size_t k = active_count(mu, cands.size());
    if (k == 0) {
        return 0;
    }
    if (k < cands.size()) {
        std::nth_element(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k - 1), cands.end(), ranks_before);
    }
    for (std::size_t i = 0; i < k; ++i) {
        (*bits[cands[i].name])[cands[i].index] = 1;
    }
    return k;
}

}  // namespace

SparsityMask select_mask(const DeltaMap& deltas, double mu, const Scope& scope) {
    if (!(mu >= 0.0 && mu <= 1.0)) {
        throw DomainError("select_mask: active ratio must lie in [0, 1], got " + std::to_string(mu));
    }
    SparsityMask mask;
    mask.active_ratio = mu;
    mask.strategy = deltas.strategy;
    mask.scope = scope;
    mask.num_layers = deltas.num_layers;
    mask.theta_fingerprint = deltas.theta_fingerprint;
    mask.theta_l_fingerprint = deltas.theta_l_fingerprint;
    mask.structure_fingerprint = deltas.structure_fingerprint;

    // Name ids follow map order, so comparing ids compares names.
    std::vector<std::vector<std::uint8_t>*> bits;
    std::vector<const Tensor*> values;
    std::vector<int> layers;
    for (const auto& [name, info] : deltas.params) {
        MaskEntry e;
        e.shape = info.shape;
        e.tag = info.tag;
        e.bits.assign(shape_numel(info.shape), 0);
        auto it = deltas.deltas.find(name);
        e.eligible = it != deltas.deltas.end() && in_scope(scope, info.tag, deltas.num_layers);
        MaskEntry& stored = mask.entries.emplace(name, std::move(e)).first->second;
        if (!stored.eligible) {
            continue;
        }
        if (it->second.shape() != info.shape) {
            throw ShapeError("select_mask: delta for " + name + " has shape " + shape_str(it->second.shape()));
        }
        for (double v : it->second.values()) {
            if (!(v >= 0.0) || !std::isfinite(v)) {
                throw DomainError("select_mask: delta for " + name + " is negative or not finite");
            }
        }
        bits.push_back(&stored.bits);
        values.push_back(&it->second);
        layers.push_back(info.tag.layer);
        mask.eligible += it->second.size();
    }
    if (bits.size() > std::numeric_limits<std::uint32_t>::max()) {
        throw DomainError("select_mask: too many parameters");
    }

    auto candidates_of = [&](auto&& keep) {
        std::vector<Candidate> cands;
        for (std::size_t n = 0; n < values.size(); ++n) {
            if (!keep(layers[n])) {
                continue;
            }
            const Tensor& t = *values[n];
            for (std::size_t i = 0; i < t.size(); ++i) {
                cands.push_back({t.data()[i], static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(i)});
            }
        }
        return cands;
    };

    if (scope.kind == Scope::Kind::PerLayer) {
        std::vector<int> distinct(layers);
        std::sort(distinct.begin(), distinct.end());
        distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
        for (int layer : distinct) {
            std::vector<Candidate> cands = candidates_of([layer](int l) { return l == layer; });
            mask.selected += select_top(cands, mu, bits);
        }
    } else {
        std::vector<Candidate> cands = candidates_of([](int) { return true; });
        mask.selected += select_top(cands, mu, bits);
    }
    return mask;
}

double MaskReport::share_of(int layer) const {
    for (const LayerStat& s : layers) {
        if (s.layer == layer) {
            return s.share;
        }
    }
    return 0.0;
}

MaskReport mask_report(const SparsityMask& mask, const Checkpoint& checkpoint) {
    check_mask_matches(mask, checkpoint);
    const int top = static_cast<int>(checkpoint.config.num_layers) + 1;
    MaskReport r;
    for (int l = 0; l <= top; ++l) {
        r.layers.push_back(LayerStat{l, 0, 0, 0.0});
    }
    for (const auto& [name, e] : mask.entries) {
        if (e.tag.layer < 0 || e.tag.layer > top) {
            throw DomainError("mask_report: " + name + " has layer " + std::to_string(e.tag.layer));
        }
        LayerStat& s = r.layers[static_cast<std::size_t>(e.tag.layer)];
        s.selected += e.count();
        if (e.eligible) {
            s.eligible += e.bits.size();
        }
    }
    for (LayerStat& s : r.layers) {
        r.selected += s.selected;
    }
    if (r.selected > 0) {
        for (LayerStat& s : r.layers) {
            s.share = static_cast<double>(s.selected) / static_cast<double>(r.selected);
        }
    }
    return r;
}

// ---------------------------------------------------------------------------

AdaptResult mlm_adapt(const Checkpoint& pretrained, const Corpus& corpus, const SelectionConfig& config) {
    config.validate();
    if (corpus.empty()) {
        throw DataError("mlm_adapt: corpus is empty");
    }
    const bool untie = config.strategy == Strategy::DecoupleUntie && pretrained.config.head_tied;
    AdaptResult result;
    result.theta_l = untie ? untie_head(pretrained) : pretrained;
    const Checkpoint start = result.theta_l;
    const std::size_t vocab = start.config.vocab_size;

    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng split_rng(Rng::mix(config.seed, 0xADA1));
    split_rng.shuffle(std::span<std::size_t>(order));
    const auto n_val = static_cast<std::size_t>(std::floor(config.validation_fraction * static_cast<double>(corpus.size())));
    Corpus train_part;
    Corpus val_part;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < n_val ? val_part : train_part).push_back(corpus[order[i]]);
    }
    if (train_part.empty()) {
        throw DataError("mlm_adapt: no training sentences after holding out validation data");
    }

    const std::size_t per_epoch = (train_part.size() + config.batch_size - 1) / config.batch_size;
    std::size_t total = config.epochs * per_epoch;
    if (config.max_steps > 0) {
        total = std::min(total, config.max_steps);
    }
    result.steps = total;
    if (total == 0) {
        return result;
    }

    std::vector<MlmBatch> val_batches;
    if (!val_part.empty()) {
        const std::size_t n_batches = std::min<std::size_t>(8, (val_part.size() + config.batch_size - 1) / config.batch_size);
        MlmStream val_stream = mlm_batches(std::move(val_part), config.batch_size, Rng::mix(config.seed, 0xADA3), vocab);
        for (std::size_t i = 0; i < n_batches; ++i) {
            val_batches.push_back(val_stream.next());
        }
    }
    MlmStream stream = mlm_batches(std::move(train_part), config.batch_size, Rng::mix(config.seed, 0xADA2), vocab);

    auto trainable = [&](const std::string& name) { return !frozen_by_strategy(config.strategy, start.tags.at(name)); };
    OptimizerState state;
    state.hp.learning_rate = config.learning_rate;

    Checkpoint& current = result.theta_l;
    std::optional<Checkpoint> best;
    double best_loss = std::numeric_limits<double>::infinity();
    for (std::size_t step = 1; step <= total; ++step) {
        const MlmBatch batch = stream.next();
        GradientMap grads;
        {
            Tape tape;
            BoundModel bm = bind_model(tape, current, trainable);
            Var loss = mlm_batch_loss(bm, batch);
            result.train_losses.push_back(loss.value().item());
            if (config.l1_coefficient > 0.0) {
                std::optional<Var> l1;
                for (const auto& [name, t] : start.params) {
                    if (!trainable(name)) {
                        continue;
                    }
                    Var term = abs_sum(sub(bm.at(name), tape.reference(t, false)));
                    l1 = l1 ? add(*l1, term) : term;
                }
                if (l1) {
                    loss = add(loss, scale(*l1, config.l1_coefficient));
                }
            }
            grads = tape.backward(loss);
        }
        clip_grad_norm(grads, nullptr, config.clip_norm);
        masked_adamw_step(current, nullptr, grads, nullptr, state);

        if (!val_batches.empty() && (step % config.eval_every == 0 || step == total)) {
            const double v = mlm_eval_loss(current, val_batches);
            result.evals.push_back({step, v});
            if (v < best_loss) {
                best_loss = v;
                best = current;
                result.best_step = step;
            }
        }
    }
    if (best) {
        result.theta_l = std::move(*best);
    } else {
        result.best_step = total;
    }
    return result;
}

}  // namespace ltp
