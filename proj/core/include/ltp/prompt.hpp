#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>

#include "ltp/autodiff.hpp"
#include "ltp/model.hpp"
#include "ltp/nli.hpp"

namespace ltp {

inline constexpr std::string_view kPromptPrefix = "prompt/";

inline bool is_prompt_param(std::string_view name) { return name.starts_with(kPromptPrefix); }

// n trainable vectors re-parameterised by a bidirectional LSTM (hidden d/2 per
// direction) and a two-layer tanh MLP. All tensors live under the "prompt/" prefix.
struct SoftPrompt {
    std::size_t length = 0;
    std::size_t hidden_dim = 0;
    std::map<std::string, Tensor> params;

    static SoftPrompt create(std::size_t length, std::size_t hidden_dim, std::uint64_t seed);
    // Rebuilds from serialized tensors; length and width come from raw_vectors.
    static SoftPrompt from_params(std::map<std::string, Tensor> params);

    std::string content_fingerprint() const;
    bool bit_equal(const SoftPrompt& other) const;
};

struct BoundPrompt {
    std::size_t length = 0;
    std::size_t hidden_dim = 0;
    std::map<std::string, Var, std::less<>> vars;
};

BoundPrompt bind_prompt(Tape& tape, const SoftPrompt& prompt, bool trainable);

// n x d prompt embeddings: raw vectors -> BiLSTM -> MLP.
Var prompt_embeddings(const BoundPrompt& prompt);
Tensor prompt_embeddings(const SoftPrompt& prompt);

enum class TemplateLayout { TemplateOrder, PrependFront };

std::string_view layout_name(TemplateLayout layout);
TemplateLayout parse_layout(std::string_view name);

// Tokens exclude the prompt slots; the n prompt rows are spliced into the token
// sequence before `prompt_insert_index`. `mask_position` indexes the spliced sequence.
struct TemplatedInput {
    TokenSeq tokens;
    std::size_t prompt_length = 0;
    std::size_t prompt_insert_index = 0;
    std::size_t mask_position = 0;

    std::size_t spliced_length() const { return tokens.size() + prompt_length; }
};

// template_order: BOS P . H ? <p1..pn> MASK . EOS
// prepend_front:  <p1..pn> BOS P . H ? MASK . EOS
TemplatedInput build_template(std::span<const TokenId> premise, std::span<const TokenId> hypothesis,
                              std::size_t prompt_length, TemplateLayout layout, std::size_t max_seq_len);

// Recovers (premise, hypothesis) from a templated input.
std::pair<TokenSeq, TokenSeq> parse_template(const TemplatedInput& input);

struct Verbalizer {
    // Answer token per label, indexed by static_cast<int>(Label).
    std::array<TokenId, 3> answers{};

    TokenId token(Label label) const { return answers[static_cast<std::size_t>(label)]; }
    void validate(std::size_t vocab_size) const;  // throws ConfigError
};

// Argmax restricted to the three answer tokens; ties resolve to the earlier label.
Label predict_label(std::span<const double> logits, const Verbalizer& verbalizer);

}  // namespace ltp
