#include "ltp/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "ltp/error.hpp"
#include "ltp/hash.hpp"
#include "ltp/rng.hpp"

namespace ltp {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;
constexpr double kMaskedScore = -1e9;

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (vocab_size <= tokens::kFirstRegular) {
        fail("vocab_size must exceed the " + std::to_string(tokens::kFirstRegular) + " reserved tokens");
    }
    if (hidden_dim == 0 || num_layers == 0 || num_heads == 0 || ffn_dim == 0 || max_seq_len == 0) {
        fail("all sizes must be positive");
    }
    if (hidden_dim % num_heads != 0) {
        fail("hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (hidden_dim % 2 != 0) {
        fail("hidden_dim must be even (prompt encoder uses d/2 per direction)");
    }
    if (num_layers > 99) {
        fail("at most 99 layers");
    }
}

std::string ModelConfig::fingerprint() const {
    Fnv1a h;
    h.update("ltp-model-config");
    for (std::size_t v : {vocab_size, hidden_dim, num_layers, num_heads, ffn_dim, max_seq_len}) {
        h.update(static_cast<std::uint64_t>(v));
    }
    h.update(static_cast<std::uint64_t>(head_tied ? 1 : 0));
    return h.hex();
}

std::string_view group_name(ParamGroup group) {
    switch (group) {
        case ParamGroup::InputEmbedding: return "input_embedding";
        case ParamGroup::OutputEmbedding: return "output_embedding";
        case ParamGroup::Attention: return "attention";
        case ParamGroup::Ffn: return "ffn";
        case ParamGroup::LayerNorm: return "layer_norm";
        case ParamGroup::Position: return "position";
        case ParamGroup::HeadBias: return "head_bias";
        case ParamGroup::Prompt: return "prompt";
    }
    return "unknown";
}

ParamGroup parse_group(std::string_view name) {
    for (auto g : {ParamGroup::InputEmbedding, ParamGroup::OutputEmbedding, ParamGroup::Attention, ParamGroup::Ffn,
                   ParamGroup::LayerNorm, ParamGroup::Position, ParamGroup::HeadBias, ParamGroup::Prompt}) {
        if (group_name(g) == name) {
            return g;
        }
    }
    throw FormatError("unknown parameter group '" + std::string(name) + "'");
}

std::string param_names::layer(std::size_t index, std::string_view suffix) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "layer.%02zu.", index);
    return std::string(buf) + std::string(suffix);
}

// ---------------------------------------------------------------------------

const Tensor& Checkpoint::at(std::string_view name) const {
    auto it = params.find(std::string(name));
    if (it == params.end()) {
        throw Error("checkpoint: no parameter '" + std::string(name) + "'");
    }
    return it->second;
}

Tensor& Checkpoint::at(std::string_view name) {
    auto it = params.find(std::string(name));
    if (it == params.end()) {
        throw Error("checkpoint: no parameter '" + std::string(name) + "'");
    }
    return it->second;
}

std::string Checkpoint::content_fingerprint() const {
    Fnv1a h;
    h.update("ltp-checkpoint-content");
    for (const auto& [name, t] : params) {
        h.update(name);
        for (auto d : t.shape()) {
            h.update(static_cast<std::uint64_t>(d));
        }
        h.update(std::as_bytes(t.values()));
    }
    return h.hex();
}

std::string Checkpoint::structure_fingerprint() const {
    Fnv1a h;
    h.update("ltp-checkpoint-structure");
    for (const auto& [name, t] : params) {
        h.update(name);
        for (auto d : t.shape()) {
            h.update(static_cast<std::uint64_t>(d));
        }
    }
    return h.hex();
}

std::size_t Checkpoint::total_entries() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) {
        n += t.size();
    }
    return n;
}

bool Checkpoint::bit_equal(const Checkpoint& other) const {
    if (config != other.config || tags != other.tags || params.size() != other.params.size()) {
        return false;
    }
    for (const auto& [name, t] : params) {
        auto it = other.params.find(name);
        if (it == other.params.end() || !t.bit_equal(it->second)) {
            return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------

Checkpoint build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Checkpoint ck;
    ck.config = config;
    Rng rng(seed);
    const std::size_t d = config.hidden_dim;
    const std::size_t f = config.ffn_dim;

    auto normal = [&](const std::string& name, Shape shape, ParamTag tag) {
        Tensor t(std::move(shape));
        for (double& x : t.values()) {
            x = rng.truncated_normal(kInitStd);
        }
        ck.params.emplace(name, std::move(t));
        ck.tags.emplace(name, tag);
    };
    auto constant = [&](const std::string& name, Shape shape, double value, ParamTag tag) {
        ck.params.emplace(name, Tensor(std::move(shape), value));
        ck.tags.emplace(name, tag);
    };

    normal(std::string(param_names::kInputEmbedding), {config.vocab_size, d}, {0, ParamGroup::InputEmbedding});
    normal(std::string(param_names::kPosition), {config.max_seq_len, d}, {0, ParamGroup::Position});
    constant(std::string(param_names::kEmbeddingLnGamma), {d}, 1.0, {0, ParamGroup::LayerNorm});
    constant(std::string(param_names::kEmbeddingLnBeta), {d}, 0.0, {0, ParamGroup::LayerNorm});

    for (std::size_t l = 1; l <= config.num_layers; ++l) {
        const int li = static_cast<int>(l);
        for (const char* proj : {"q", "k", "v", "o"}) {
            normal(param_names::layer(l, std::string("attn.") + proj + ".weight"), {d, d}, {li, ParamGroup::Attention});
            constant(param_names::layer(l, std::string("attn.") + proj + ".bias"), {d}, 0.0,
                     {li, ParamGroup::Attention});
        }
        constant(param_names::layer(l, "ln1.gamma"), {d}, 1.0, {li, ParamGroup::LayerNorm});
        constant(param_names::layer(l, "ln1.beta"), {d}, 0.0, {li, ParamGroup::LayerNorm});
        normal(param_names::layer(l, "ffn.in.weight"), {d, f}, {li, ParamGroup::Ffn});
        constant(param_names::layer(l, "ffn.in.bias"), {f}, 0.0, {li, ParamGroup::Ffn});
        normal(param_names::layer(l, "ffn.out.weight"), {f, d}, {li, ParamGroup::Ffn});
        constant(param_names::layer(l, "ffn.out.bias"), {d}, 0.0, {li, ParamGroup::Ffn});
        constant(param_names::layer(l, "ln2.gamma"), {d}, 1.0, {li, ParamGroup::LayerNorm});
        constant(param_names::layer(l, "ln2.beta"), {d}, 0.0, {li, ParamGroup::LayerNorm});
    }

    const int head_layer = static_cast<int>(config.num_layers) + 1;
    constant(std::string(param_names::kHeadBias), {config.vocab_size}, 0.0, {head_layer, ParamGroup::HeadBias});
    if (!config.head_tied) {
        ck.params.emplace(std::string(param_names::kOutputEmbedding), ck.at(param_names::kInputEmbedding));
        ck.tags.emplace(std::string(param_names::kOutputEmbedding), ParamTag{head_layer, ParamGroup::OutputEmbedding});
    }
    return ck;
}

Checkpoint untie_head(const Checkpoint& checkpoint) {
    if (!checkpoint.config.head_tied || checkpoint.contains(param_names::kOutputEmbedding)) {
        throw DomainError("untie_head: checkpoint is already untied");
    }
    Checkpoint out = checkpoint;
    out.config.head_tied = false;
    out.params.emplace(std::string(param_names::kOutputEmbedding), out.at(param_names::kInputEmbedding));
    out.tags.emplace(std::string(param_names::kOutputEmbedding),
                     ParamTag{static_cast<int>(out.config.num_layers) + 1, ParamGroup::OutputEmbedding});
    return out;
}

// ---------------------------------------------------------------------------

Var BoundModel::at(std::string_view name) const {
    auto it = vars.find(name);
    if (it == vars.end()) {
        throw Error("model: parameter '" + std::string(name) + "' not bound");
    }
    return it->second;
}

Var BoundModel::output_projection() const {
    return at(config->head_tied ? param_names::kInputEmbedding : param_names::kOutputEmbedding);
}

BoundModel bind_model(Tape& tape, const Checkpoint& checkpoint, const TrainablePredicate& trainable) {
    BoundModel bm;
    bm.config = &checkpoint.config;
    for (const auto& [name, t] : checkpoint.params) {
        const bool train = trainable && trainable(name);
        bm.vars.emplace(name, train ? tape.parameter(name, t) : tape.reference(t, false));
    }
    return bm;
}

Var encode(const BoundModel& model, std::span<const TokenId> tokens, std::optional<Var> prompt_embeddings,
           std::size_t prompt_insert_index, std::span<const bool> key_padding) {
    const ModelConfig& cfg = *model.config;
    const std::size_t n_prompt = prompt_embeddings ? prompt_embeddings->value().rows() : 0;
    const std::size_t total = tokens.size() + n_prompt;
    if (tokens.empty()) {
        throw DataError("encode: empty token sequence");
    }
    if (total > cfg.max_seq_len) {
        throw SequenceOverflow("encode: " + std::to_string(tokens.size()) + " tokens + " + std::to_string(n_prompt) +
                               " prompt slots exceed max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    if (prompt_embeddings && prompt_insert_index > tokens.size()) {
        throw DataError("encode: prompt insert index " + std::to_string(prompt_insert_index) + " beyond " +
                        std::to_string(tokens.size()) + " tokens");
    }
    if (!key_padding.empty() && key_padding.size() != total) {
        throw ShapeError("encode: key padding length " + std::to_string(key_padding.size()) + " != sequence length " +
                         std::to_string(total));
    }

    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    for (std::size_t id : ids) {
        if (id >= cfg.vocab_size) {
            throw DataError("encode: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));
        }
    }
    Var x = gather_rows(model.at(param_names::kInputEmbedding), ids);
    if (prompt_embeddings) {
        if (prompt_embeddings->value().cols() != cfg.hidden_dim) {
            throw ShapeError("encode: prompt embeddings " + shape_str(prompt_embeddings->value().shape()) +
                             " do not match hidden_dim " + std::to_string(cfg.hidden_dim));
        }
        std::vector<Var> parts;
        if (prompt_insert_index > 0) {
            parts.push_back(slice_rows(x, 0, prompt_insert_index));
        }
        parts.push_back(*prompt_embeddings);
        if (prompt_insert_index < tokens.size()) {
            parts.push_back(slice_rows(x, prompt_insert_index, tokens.size() - prompt_insert_index));
        }
        x = concat_rows(parts);
    }

    std::vector<std::size_t> positions(total);
    for (std::size_t i = 0; i < total; ++i) {
        positions[i] = i;
    }
    x = add(x, gather_rows(model.at(param_names::kPosition), positions));
    x = layer_norm(x, model.at(param_names::kEmbeddingLnGamma), model.at(param_names::kEmbeddingLnBeta),
                   kLayerNormEps);

    std::optional<Var> score_mask;
    if (!key_padding.empty()) {
        Tensor m({total, total}, 0.0);
        for (std::size_t r = 0; r < total; ++r) {
            for (std::size_t c = 0; c < total; ++c) {
                if (key_padding[c]) {
                    m.at(r, c) = kMaskedScore;
                }
            }
        }
        score_mask = x.tape()->leaf(std::move(m), false);
    }

    const std::size_t heads = cfg.num_heads;
    const std::size_t dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
        auto p = [&](std::string_view suffix) { return model.at(param_names::layer(l, suffix)); };
        Var q = add(matmul(x, p("attn.q.weight")), p("attn.q.bias"));
        Var k = add(matmul(x, p("attn.k.weight")), p("attn.k.bias"));
        Var v = add(matmul(x, p("attn.v.weight")), p("attn.v.bias"));
        std::vector<Var> head_out;
        head_out.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Var qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
            Var kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
            Var vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
            Var scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
            if (score_mask) {
                scores = add(scores, *score_mask);
            }
            head_out.push_back(matmul(softmax_rows(scores), vh));
        }
        Var attn = heads == 1 ? head_out[0] : concat_cols(head_out);
        Var proj = add(matmul(attn, p("attn.o.weight")), p("attn.o.bias"));
        x = layer_norm(add(x, proj), p("ln1.gamma"), p("ln1.beta"), kLayerNormEps);
        Var hidden = gelu(add(matmul(x, p("ffn.in.weight")), p("ffn.in.bias")));
        Var ffn = add(matmul(hidden, p("ffn.out.weight")), p("ffn.out.bias"));
        x = layer_norm(add(x, ffn), p("ln2.gamma"), p("ln2.beta"), kLayerNormEps);
    }
    return x;
}

Var mlm_logits(const BoundModel& model, Var hidden, std::span<const std::size_t> positions) {
    for (std::size_t pos : positions) {
        if (pos >= hidden.value().rows()) {
            throw DataError("mlm_logits: position " + std::to_string(pos) + " outside sequence of length " +
                            std::to_string(hidden.value().rows()));
        }
    }
    Var rows = gather_rows(hidden, positions);
    return add(matmul_nt(rows, model.output_projection()), model.at(param_names::kHeadBias));
}

Tensor encode(const Checkpoint& checkpoint, std::span<const TokenId> tokens, const Tensor* prompt_embeddings,
              std::size_t prompt_insert_index) {
    Tape tape;
    BoundModel bm = bind_model(tape, checkpoint);
    std::optional<Var> prompt;
    if (prompt_embeddings != nullptr) {
        prompt = tape.reference(*prompt_embeddings, false);
    }
    return encode(bm, tokens, prompt, prompt_insert_index).value();
}

Tensor mlm_logits(const Checkpoint& checkpoint, const Tensor& hidden, std::size_t position) {
    Tape tape;
    BoundModel bm = bind_model(tape, checkpoint);
    const std::size_t pos[] = {position};
    Tensor row = mlm_logits(bm, tape.reference(hidden, false), pos).value();
    const std::size_t n = row.size();
    return Tensor({n}, std::move(row.storage()));
}

std::vector<Tensor> encode_batch(const Checkpoint& checkpoint, const std::vector<TokenSeq>& batch) {
    std::size_t longest = 0;
    for (const auto& seq : batch) {
        longest = std::max(longest, seq.size());
    }
    std::vector<Tensor> out;
    out.reserve(batch.size());
    for (const auto& seq : batch) {
        TokenSeq padded = seq;
        padded.resize(longest, tokens::kPad);
        auto flags = std::make_unique<bool[]>(longest);
        for (std::size_t i = seq.size(); i < longest; ++i) {
            flags[i] = true;
        }
        Tape tape;
        BoundModel bm = bind_model(tape, checkpoint);
        Var h = encode(bm, padded, std::nullopt, 0, std::span<const bool>(flags.get(), longest));
        const Tensor& full = h.value();
        const std::size_t d = full.cols();
        Tensor trimmed({seq.size(), d});
        std::copy(full.data(), full.data() + seq.size() * d, trimmed.data());
        out.push_back(std::move(trimmed));
    }
    return out;
}

}  // namespace ltp
