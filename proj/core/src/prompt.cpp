#include "ltp/prompt.hpp"

#include <cmath>
#include <set>
#include <vector>

#include "ltp/error.hpp"
#include "ltp/hash.hpp"
#include "ltp/rng.hpp"

namespace ltp {

std::string_view label_name(Label label) {
    switch (label) {
        case Label::Entailment: return "entailment";
        case Label::Contradiction: return "contradiction";
        case Label::Neutral: return "neutral";
    }
    return "unknown";
}

Label parse_label(std::string_view name) {
    for (Label l : kAllLabels) {
        if (label_name(l) == name) {
            return l;
        }
    }
    throw FormatError("unknown label '" + std::string(name) + "'");
}

namespace {

const std::string kRaw = "prompt/raw_vectors";
const std::string kMlpW1 = "prompt/mlp.w1";
const std::string kMlpB1 = "prompt/mlp.b1";
const std::string kMlpW2 = "prompt/mlp.w2";
const std::string kMlpB2 = "prompt/mlp.b2";

std::string lstm_name(const char* dir, const char* part) {
    return std::string("prompt/lstm.") + dir + "." + part;
}

}  // namespace

SoftPrompt SoftPrompt::create(std::size_t length, std::size_t hidden_dim, std::uint64_t seed) {
    if (length == 0) {
        throw ConfigError("soft prompt: length must be positive");
    }
    if (hidden_dim == 0 || hidden_dim % 2 != 0) {
        throw ConfigError("soft prompt: hidden_dim must be positive and even");
    }
    SoftPrompt sp;
    sp.length = length;
    sp.hidden_dim = hidden_dim;
    Rng rng(seed);
    const std::size_t d = hidden_dim;
    const std::size_t h = d / 2;

    Tensor raw({length, d});
    for (double& x : raw.values()) {
        x = rng.normal(0.0, 0.02);
    }
    sp.params.emplace(kRaw, std::move(raw));

    auto uniform = [&](Shape shape, double bound) {
        Tensor t(std::move(shape));
        for (double& x : t.values()) {
            x = (2.0 * rng.uniform() - 1.0) * bound;
        }
        return t;
    };
    const double lstm_bound = 1.0 / std::sqrt(static_cast<double>(h));
    for (const char* dir : {"fwd", "bwd"}) {
        sp.params.emplace(lstm_name(dir, "w_ih"), uniform({d, 4 * h}, lstm_bound));
        sp.params.emplace(lstm_name(dir, "w_hh"), uniform({h, 4 * h}, lstm_bound));
        sp.params.emplace(lstm_name(dir, "bias"), uniform({4 * h}, lstm_bound));
    }
    const double mlp_bound = 1.0 / std::sqrt(static_cast<double>(d));
    sp.params.emplace(kMlpW1, uniform({d, d}, mlp_bound));
    sp.params.emplace(kMlpB1, uniform({d}, mlp_bound));
    sp.params.emplace(kMlpW2, uniform({d, d}, mlp_bound));
    sp.params.emplace(kMlpB2, uniform({d}, mlp_bound));
    return sp;
}

SoftPrompt SoftPrompt::from_params(std::map<std::string, Tensor> params) {
    auto it = params.find(kRaw);
    if (it == params.end()) {
        throw FormatError("soft prompt: missing " + kRaw);
    }
    SoftPrompt sp;
    sp.length = it->second.rows();
    sp.hidden_dim = it->second.cols();
    const std::size_t d = sp.hidden_dim;
    const std::size_t h = d / 2;
    const std::map<std::string, Shape> expected = {
        {kRaw, {sp.length, d}},
        {lstm_name("fwd", "w_ih"), {d, 4 * h}},
        {lstm_name("fwd", "w_hh"), {h, 4 * h}},
        {lstm_name("fwd", "bias"), {4 * h}},
        {lstm_name("bwd", "w_ih"), {d, 4 * h}},
        {lstm_name("bwd", "w_hh"), {h, 4 * h}},
        {lstm_name("bwd", "bias"), {4 * h}},
        {kMlpW1, {d, d}},
        {kMlpB1, {d}},
        {kMlpW2, {d, d}},
        {kMlpB2, {d}},
    };
    if (params.size() != expected.size()) {
        throw FormatError("soft prompt: expected " + std::to_string(expected.size()) + " tensors, got " +
                          std::to_string(params.size()));
    }
    for (const auto& [name, shape] : expected) {
        auto p = params.find(name);
        if (p == params.end()) {
            throw FormatError("soft prompt: missing " + name);
        }
        if (p->second.shape() != shape) {
            throw FormatError("soft prompt: " + name + " has shape " + shape_str(p->second.shape()) + ", expected " +
                              shape_str(shape));
        }
    }
    sp.params = std::move(params);
    return sp;
}

std::string SoftPrompt::content_fingerprint() const {
    Fnv1a h;
    h.update("ltp-soft-prompt");
    for (const auto& [name, t] : params) {
        h.update(name);
        h.update(std::as_bytes(t.values()));
    }
    return h.hex();
}

bool SoftPrompt::bit_equal(const SoftPrompt& other) const {
    if (length != other.length || hidden_dim != other.hidden_dim || params.size() != other.params.size()) {
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

BoundPrompt bind_prompt(Tape& tape, const SoftPrompt& prompt, bool trainable) {
    BoundPrompt bp;
    bp.length = prompt.length;
    bp.hidden_dim = prompt.hidden_dim;
    for (const auto& [name, t] : prompt.params) {
        bp.vars.emplace(name, trainable ? tape.parameter(name, t) : tape.reference(t, false));
    }
    return bp;
}

namespace {

// One direction of the LSTM; returns hidden states in time order.
std::vector<Var> lstm_direction(const BoundPrompt& p, Var inputs, const char* dir, bool reverse) {
    const std::size_t n = p.length;
    const std::size_t h = p.hidden_dim / 2;
    Var w_ih = p.vars.at(lstm_name(dir, "w_ih"));
    Var w_hh = p.vars.at(lstm_name(dir, "w_hh"));
    Var bias = p.vars.at(lstm_name(dir, "bias"));
    std::vector<Var> states(n);
    Var hidden;
    Var cell;
    for (std::size_t step = 0; step < n; ++step) {
        const std::size_t t = reverse ? n - 1 - step : step;
        Var gates = add(matmul(slice_rows(inputs, t, 1), w_ih), bias);
        if (step > 0) {
            gates = add(gates, matmul(hidden, w_hh));
        }
        Var in_gate = sigmoid(slice_cols(gates, 0, h));
        Var forget_gate = sigmoid(slice_cols(gates, h, h));
        Var candidate = tanh(slice_cols(gates, 2 * h, h));
        Var out_gate = sigmoid(slice_cols(gates, 3 * h, h));
        cell = step == 0 ? mul(in_gate, candidate) : add(mul(forget_gate, cell), mul(in_gate, candidate));
        hidden = mul(out_gate, tanh(cell));
        states[t] = hidden;
    }
    return states;
}

}  // namespace

Var prompt_embeddings(const BoundPrompt& p) {
    Var raw = p.vars.at(kRaw);
    std::vector<Var> fwd = lstm_direction(p, raw, "fwd", false);
    std::vector<Var> bwd = lstm_direction(p, raw, "bwd", true);
    std::vector<Var> rows;
    rows.reserve(p.length);
    for (std::size_t t = 0; t < p.length; ++t) {
        const Var pair[] = {fwd[t], bwd[t]};
        rows.push_back(concat_cols(pair));
    }
    Var states = p.length == 1 ? rows[0] : concat_rows(rows);
    Var hidden = tanh(add(matmul(states, p.vars.at(kMlpW1)), p.vars.at(kMlpB1)));
    return add(matmul(hidden, p.vars.at(kMlpW2)), p.vars.at(kMlpB2));
}

Tensor prompt_embeddings(const SoftPrompt& prompt) {
    Tape tape;
    return prompt_embeddings(bind_prompt(tape, prompt, false)).value();
}

// ---------------------------------------------------------------------------

std::string_view layout_name(TemplateLayout layout) {
    return layout == TemplateLayout::TemplateOrder ? "template_order" : "prepend_front";
}

TemplateLayout parse_layout(std::string_view name) {
    if (name == "template_order") {
        return TemplateLayout::TemplateOrder;
    }
    if (name == "prepend_front") {
        return TemplateLayout::PrependFront;
    }
    throw ConfigError("unknown template layout '" + std::string(name) + "'");
}

TemplatedInput build_template(std::span<const TokenId> premise, std::span<const TokenId> hypothesis,
                              std::size_t prompt_length, TemplateLayout layout, std::size_t max_seq_len) {
    // BOS . ? MASK . EOS
    constexpr std::size_t kOverhead = 6;
    const std::size_t total = premise.size() + hypothesis.size() + prompt_length + kOverhead;
    if (total > max_seq_len) {
        throw SequenceOverflow("build_template: premise " + std::to_string(premise.size()) + " + hypothesis " +
                               std::to_string(hypothesis.size()) + " + prompt " + std::to_string(prompt_length) +
                               " + " + std::to_string(kOverhead) + " fixed tokens = " + std::to_string(total) +
                               " exceeds max_seq_len " + std::to_string(max_seq_len));
    }
    TemplatedInput out;
    out.prompt_length = prompt_length;
    out.tokens.reserve(total - prompt_length);
    out.tokens.push_back(tokens::kBos);
    out.tokens.insert(out.tokens.end(), premise.begin(), premise.end());
    out.tokens.push_back(tokens::kPeriod);
    out.tokens.insert(out.tokens.end(), hypothesis.begin(), hypothesis.end());
    out.tokens.push_back(tokens::kQmark);
    const std::size_t mask_token_index = out.tokens.size();
    out.tokens.push_back(tokens::kMask);
    out.tokens.push_back(tokens::kPeriod);
    out.tokens.push_back(tokens::kEos);
    out.prompt_insert_index = layout == TemplateLayout::TemplateOrder ? mask_token_index : 0;
    // Every prompt slot precedes MASK in both layouts.
    out.mask_position = mask_token_index + prompt_length;
    return out;
}

std::pair<TokenSeq, TokenSeq> parse_template(const TemplatedInput& input) {
    const TokenSeq& t = input.tokens;
    if (t.size() < 6 || t.front() != tokens::kBos) {
        throw FormatError("parse_template: malformed templated input");
    }
    std::size_t i = 1;
    TokenSeq premise;
    while (i < t.size() && t[i] != tokens::kPeriod) {
        premise.push_back(t[i++]);
    }
    if (i == t.size()) {
        throw FormatError("parse_template: missing premise terminator");
    }
    ++i;
    TokenSeq hypothesis;
    while (i < t.size() && t[i] != tokens::kQmark) {
        hypothesis.push_back(t[i++]);
    }
    if (i + 4 != t.size() || t[i + 1] != tokens::kMask) {
        throw FormatError("parse_template: malformed templated input");
    }
    return {std::move(premise), std::move(hypothesis)};
}

void Verbalizer::validate(std::size_t vocab_size) const {
    std::set<TokenId> seen;
    for (TokenId t : answers) {
        if (t < tokens::kFirstRegular || t >= vocab_size) {
            throw ConfigError("verbalizer: answer token " + std::to_string(t) + " must be a regular token below " +
                              std::to_string(vocab_size));
        }
        seen.insert(t);
    }
    if (seen.size() != answers.size()) {
        throw ConfigError("verbalizer: answer tokens must be distinct");
    }
}

Label predict_label(std::span<const double> logits, const Verbalizer& verbalizer) {
    Label best = Label::Entailment;
    double best_score = 0.0;
    bool first = true;
    for (Label l : kAllLabels) {
        const TokenId tok = verbalizer.token(l);
        if (tok >= logits.size()) {
            throw DataError("predict_label: answer token " + std::to_string(tok) + " outside logits of length " +
                            std::to_string(logits.size()));
        }
        if (first || logits[tok] > best_score) {
            best = l;
            best_score = logits[tok];
            first = false;
        }
    }
    return best;
}

}  // namespace ltp
