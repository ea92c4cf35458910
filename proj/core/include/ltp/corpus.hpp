#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ltp/model.hpp"
#include "ltp/nli.hpp"
#include "ltp/prompt.hpp"
#include "ltp/rng.hpp"

namespace ltp {

using Corpus = std::vector<TokenSeq>;

// Token classes of the base language. Ranges are half-open and tile [6, vocab).
struct TokenRange {
    TokenId begin = 0;
    TokenId end = 0;

    std::size_t size() const { return end - begin; }
    bool contains(TokenId t) const { return t >= begin && t < end; }
};

struct VocabLayout {
    std::size_t vocab_size = 0;
    TokenRange function_words;  // the first two double as separators in relation sentences
    TokenRange subjects;
    TokenRange verbs;
    TokenRange objects;  // even size; antonym pairs are (2k, 2k+1) relative to begin
    TokenRange modifiers;
    TokenRange connectives;  // so, but, maybe, and

    static VocabLayout for_vocab(std::size_t vocab_size);  // throws ConfigError if too small

    bool is_content(TokenId t) const { return subjects.contains(t) || verbs.contains(t) || objects.contains(t); }
    // Antonym partner of an object token; nullopt for every other token.
    std::optional<TokenId> antonym(TokenId t) const;

    TokenId conn_so() const { return connectives.begin; }
    TokenId conn_but() const { return connectives.begin + 1; }
    TokenId conn_maybe() const { return connectives.begin + 2; }
    TokenId conn_and() const { return connectives.begin + 3; }
    TokenId sep_premise() const { return function_words.begin; }
    TokenId sep_hypothesis() const { return function_words.begin + 1; }
};

// Answer tokens: entailment -> "so", contradiction -> "but", neutral -> "maybe".
Verbalizer default_verbalizer(const VocabLayout& layout);

inline constexpr std::size_t kMinSentenceLength = 8;
inline constexpr std::size_t kMaxSentenceLength = 24;

// Mostly subject-verb-object clauses joined by "and", with connective clauses that
// expose antonymy ("o but antonym(o)"). A share of sentences are relation sentences,
// "P sep H sep c", where c is the connective answering whether P supports H.
Corpus generate_base_corpus(const VocabLayout& layout, std::uint64_t seed, std::size_t num_sentences,
                            double relation_share = 0.25);

struct LanguageSpec {
    std::string id;
    std::uint64_t permutation_seed = 0;  // 0 is the identity (the base language)
    bool seen_in_pretraining = true;

    friend bool operator==(const LanguageSpec&, const LanguageSpec&) = default;
};

// A bijection on [6, vocab); special tokens map to themselves and so do the
// connectives, which every language shares.
class Language {
public:
    Language(LanguageSpec spec, const VocabLayout& layout);

    const LanguageSpec& spec() const { return spec_; }
    std::size_t vocab_size() const { return forward_.size(); }
    bool is_identity() const { return spec_.permutation_seed == 0; }

    TokenId map(TokenId t) const;
    TokenId unmap(TokenId t) const;

    TokenSeq apply(const TokenSeq& seq) const;
    TokenSeq invert(const TokenSeq& seq) const;
    Corpus apply(const Corpus& corpus) const;
    NliExample apply(const NliExample& example) const;  // also sets the language id
    NliExample invert(const NliExample& example, std::string base_id) const;

    // Antonym relation as seen from inside this language.
    std::optional<TokenId> antonym(const VocabLayout& layout, TokenId t) const;

    std::span<const TokenId> table() const { return forward_; }

private:
    LanguageSpec spec_;
    std::vector<TokenId> forward_;
    std::vector<TokenId> inverse_;
};

enum class Split { Train = 0, Dev = 1, Test = 2 };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

inline constexpr std::size_t kTestExamplesPerLanguage = 300;

// Class-balanced examples, generated in the base language and then translated, so
// every language gets the same (parallel) content for a given seed. Splits are
// disjoint: an example belongs to the split selected by a hash of its base tokens.
// shots_per_class is ignored for the test split.
std::vector<NliExample> make_nli_set(const Language& language, const VocabLayout& layout,
                                     std::size_t shots_per_class, Split split, std::uint64_t seed);

// The rule that generated a label, evaluated with `antonym_of` as the antonym relation.
template <class AntonymFn>
Label label_of(const TokenSeq& premise, const TokenSeq& hypothesis, AntonymFn antonym_of);

bool is_subsequence(std::span<const TokenId> needle, std::span<const TokenId> haystack);

Label label_of(const TokenSeq& premise, const TokenSeq& hypothesis, const Language& language,
               const VocabLayout& layout);

// One MLM example: `target` holds original tokens, `loss` marks the positions that
// contribute to the loss (the 15% selection, whatever their corruption).
struct MlmExample {
    TokenSeq input;
    TokenSeq target;
    std::vector<std::uint8_t> loss;
};

using MlmBatch = std::vector<MlmExample>;

struct MlmRecipe {
    double select_rate = 0.15;
    double mask_share = 0.8;
    double random_share = 0.1;  // the remainder keeps the original token
    // A sentence ending in one of these tokens is an answer sentence: only its last
    // token is a candidate, selected at answer_select_rate, and the rest stays clean.
    std::vector<TokenId> answer_tokens;
    double answer_select_rate = 1.0;
};

// Endless, epoch-shuffled stream of MLM batches. Each sentence is wrapped in BOS/EOS.
// Specials are never selected. A batch with no selected position gets one forced
// selection so every batch carries a loss. Copies continue independently.
class MlmStream {
public:
    MlmStream(std::shared_ptr<const Corpus> corpus, std::size_t batch_size, std::uint64_t seed,
              std::size_t vocab_size, MlmRecipe recipe = {});

    MlmBatch next();

    std::size_t batch_size() const { return batch_size_; }
    std::size_t corpus_size() const { return corpus_->size(); }

private:
    void corrupt(MlmExample& ex, std::size_t pos);

    std::shared_ptr<const Corpus> corpus_;
    std::size_t batch_size_;
    std::size_t vocab_size_;
    MlmRecipe recipe_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

// Treats so/but/maybe as answer tokens, selected at `rate`.
MlmRecipe answer_focused_recipe(const VocabLayout& layout, double rate = 1.0);

MlmStream mlm_batches(Corpus corpus, std::size_t batch_size, std::uint64_t seed, std::size_t vocab_size,
                      MlmRecipe recipe = {});

// Tab-separated: language id, label, space-separated premise ids, space-separated hypothesis ids.
std::string format_dataset(const std::vector<NliExample>& examples);
std::vector<NliExample> parse_dataset(std::string_view text);  // throws FormatError
void save_dataset(const std::filesystem::path& path, const std::vector<NliExample>& examples);
std::vector<NliExample> load_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

template <class AntonymFn>
Label label_of(const TokenSeq& premise, const TokenSeq& hypothesis, AntonymFn antonym_of) {
    if (is_subsequence(hypothesis, premise)) {
        return Label::Entailment;
    }
    TokenSeq probe = hypothesis;
    for (std::size_t j = 0; j < probe.size(); ++j) {
        const std::optional<TokenId> partner = antonym_of(hypothesis[j]);
        if (!partner) {
            continue;
        }
        probe[j] = *partner;
        if (is_subsequence(probe, premise)) {
            return Label::Contradiction;
        }
        probe[j] = hypothesis[j];
    }
    return Label::Neutral;
}

}  // namespace ltp
