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

#include "ltp/autodiff.hpp"
#include "ltp/tensor.hpp"

namespace ltp {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

// Reserved ids; every other id in [kFirstRegular, vocab) is an ordinary token.
namespace tokens {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kMask = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kPeriod = 4;
inline constexpr TokenId kQmark = 5;
inline constexpr TokenId kFirstRegular = 6;
}  // namespace tokens

struct ModelConfig {
    std::size_t vocab_size = 512;
    std::size_t hidden_dim = 64;
    std::size_t num_layers = 6;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t max_seq_len = 64;
    bool head_tied = true;

    std::size_t head_dim() const { return hidden_dim / num_heads; }

    // Throws ConfigError on an invalid combination.
    void validate() const;
    std::string fingerprint() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ParamGroup { InputEmbedding, OutputEmbedding, Attention, Ffn, LayerNorm, Position, HeadBias, Prompt };

std::string_view group_name(ParamGroup group);
ParamGroup parse_group(std::string_view name);

// layer: 0 for the embedding block, 1..D for transformer layers, D+1 for the head.
struct ParamTag {
    int layer = 0;
    ParamGroup group = ParamGroup::Attention;

    friend bool operator==(const ParamTag&, const ParamTag&) = default;
};

namespace param_names {
inline constexpr std::string_view kInputEmbedding = "embeddings.input_embedding";
inline constexpr std::string_view kPosition = "embeddings.position";
inline constexpr std::string_view kEmbeddingLnGamma = "embeddings.ln.gamma";
inline constexpr std::string_view kEmbeddingLnBeta = "embeddings.ln.beta";
inline constexpr std::string_view kOutputEmbedding = "head.output_embedding";
inline constexpr std::string_view kHeadBias = "head.bias";

// "layer.03.attn.q.weight" etc.; the zero padding keeps lexicographic order numeric.
std::string layer(std::size_t index, std::string_view suffix);
}  // namespace param_names

// Named backbone parameters (theta) with their tags.
struct Checkpoint {
    ModelConfig config;
    std::map<std::string, Tensor> params;
    std::map<std::string, ParamTag> tags;

    const Tensor& at(std::string_view name) const;
    Tensor& at(std::string_view name);
    bool contains(std::string_view name) const { return params.find(std::string(name)) != params.end(); }

    std::string config_fingerprint() const { return config.fingerprint(); }
    // Hash of names, shapes and every stored double.
    std::string content_fingerprint() const;
    // Hash of names and shapes only.
    std::string structure_fingerprint() const;

    std::size_t total_entries() const;
    bool bit_equal(const Checkpoint& other) const;
};

// Deterministic initialisation: truncated normal (std 0.02) for matrices and
// embeddings, zeros for biases, ones/zeros for layer-norm scale/shift.
Checkpoint build_model(const ModelConfig& config, std::uint64_t seed);

// Returns a copy whose output embedding is an independent deep copy of the input
// embedding. Throws DomainError if already untied; there is no inverse.
Checkpoint untie_head(const Checkpoint& checkpoint);

// Checkpoint parameters bound onto a tape.
struct BoundModel {
    const ModelConfig* config = nullptr;
    std::map<std::string, Var, std::less<>> vars;

    Var at(std::string_view name) const;
    Var output_projection() const;
};

using TrainablePredicate = std::function<bool(const std::string& name)>;

// Parameters for which `trainable` holds become named gradient leaves; the rest are
// constants. The checkpoint must outlive the tape.
BoundModel bind_model(Tape& tape, const Checkpoint& checkpoint, const TrainablePredicate& trainable = {});

// Hidden states for one sequence. Prompt rows, when given, are spliced in before
// `prompt_insert_index` (0 <= index <= tokens.size()) ahead of the position
// embeddings. `key_padding` marks positions other positions must not attend to.
Var encode(const BoundModel& model, std::span<const TokenId> tokens, std::optional<Var> prompt_embeddings = {},
           std::size_t prompt_insert_index = 0, std::span<const bool> key_padding = {});

// Vocabulary logits at the given rows of `hidden`: hidden[pos] . E_out^T + bias.
Var mlm_logits(const BoundModel& model, Var hidden, std::span<const std::size_t> positions);

// Convenience forward passes without gradient tracking.
Tensor encode(const Checkpoint& checkpoint, std::span<const TokenId> tokens, const Tensor* prompt_embeddings = nullptr,
              std::size_t prompt_insert_index = 0);
Tensor mlm_logits(const Checkpoint& checkpoint, const Tensor& hidden, std::size_t position);

// Pads to the longest sequence and masks padded keys; returns the unpadded hidden
// states of each sequence.
std::vector<Tensor> encode_batch(const Checkpoint& checkpoint, const std::vector<TokenSeq>& batch);

}  // namespace ltp
