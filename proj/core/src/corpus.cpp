#include "ltp/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <set>
#include <stdexcept>
#include <utility>

#include "ltp/error.hpp"
#include "ltp/hash.hpp"
#include "ltp/serialize.hpp"

namespace ltp {

namespace {

constexpr std::size_t kGroups = 3;
constexpr std::size_t kConnectives = 4;

TokenRange take(TokenId& cursor, std::size_t n) {
    TokenRange r{cursor, static_cast<TokenId>(cursor + n)};
    cursor = r.end;
    return r;
}

}  // namespace

VocabLayout VocabLayout::for_vocab(std::size_t vocab_size) {
    if (vocab_size < 64) {
        throw ConfigError("vocab layout: vocab_size " + std::to_string(vocab_size) + " is below the minimum of 64");
    }
    const std::size_t regular = vocab_size - tokens::kFirstRegular;
    const std::size_t n_func = std::max<std::size_t>(4, regular * 8 / 100);
    const std::size_t n_subj = std::max<std::size_t>(kGroups, regular * 16 / 100);
    const std::size_t n_verb = std::max<std::size_t>(kGroups, regular * 16 / 100);
    const std::size_t n_obj = std::max<std::size_t>(4 * kGroups, regular * 30 / 100) & ~std::size_t{1};
    const std::size_t used = n_func + n_subj + n_verb + n_obj + kConnectives;
    if (used + 2 > regular) {
        throw ConfigError("vocab layout: vocab_size " + std::to_string(vocab_size) + " leaves no room for modifiers");
    }
    VocabLayout l;
    l.vocab_size = vocab_size;
    TokenId cursor = tokens::kFirstRegular;
    l.function_words = take(cursor, n_func);
    l.subjects = take(cursor, n_subj);
    l.verbs = take(cursor, n_verb);
    l.objects = take(cursor, n_obj);
    l.modifiers = take(cursor, regular - used);
    l.connectives = take(cursor, kConnectives);
    return l;
}

std::optional<TokenId> VocabLayout::antonym(TokenId t) const {
    if (!objects.contains(t)) {
        return std::nullopt;
    }
    return objects.begin + ((t - objects.begin) ^ 1U);
}

Verbalizer default_verbalizer(const VocabLayout& layout) {
    Verbalizer v;
    v.answers = {layout.conn_so(), layout.conn_but(), layout.conn_maybe()};
    return v;
}

// ---------------------------------------------------------------------------

namespace {

// Subjects, verbs and object pairs fall into kGroups agreement groups by index.
class Grammar {
public:
    Grammar(const VocabLayout& layout, Rng& rng) : l_(layout), rng_(rng) {}

    TokenId pick(const TokenRange& r) { return r.begin + static_cast<TokenId>(rng_.below(r.size())); }

    TokenId in_group(const TokenRange& r, std::size_t group) {
        const std::size_t count = (r.size() - group + kGroups - 1) / kGroups;
        return r.begin + static_cast<TokenId>(group + kGroups * rng_.below(count));
    }

    TokenId object_in_group(std::size_t group) {
        const std::size_t pairs = l_.objects.size() / 2;
        const std::size_t count = (pairs - group + kGroups - 1) / kGroups;
        const std::size_t pair = group + kGroups * rng_.below(count);
        return l_.objects.begin + static_cast<TokenId>(2 * pair + rng_.below(2));
    }

    struct Core {
        TokenId subject;
        TokenId verb;
        TokenId object;
    };

    Core core() {
        const std::size_t s = rng_.below(l_.subjects.size());
        const std::size_t g = s % kGroups;
        return {l_.subjects.begin + static_cast<TokenId>(s), in_group(l_.verbs, g), object_in_group(g)};
    }

    // [det] [mod] subj verb [det] [mod] obj
    void plain_clause(TokenSeq& out) {
        const Core c = core();
        const TokenRange fillers{l_.function_words.begin + 2, l_.function_words.end};
        maybe_push(out, fillers, 0.5);
        maybe_push(out, l_.modifiers, 0.3);
        out.push_back(c.subject);
        out.push_back(c.verb);
        maybe_push(out, fillers, 0.5);
        maybe_push(out, l_.modifiers, 0.3);
        out.push_back(c.object);
    }

    void clause(TokenSeq& out) {
        const double r = rng_.uniform();
        if (r < 0.6) {
            plain_clause(out);
            return;
        }
        const Core c = core();
        out.push_back(c.subject);
        out.push_back(c.verb);
        out.push_back(c.object);
        if (r < 0.75) {
            out.push_back(l_.conn_but());
            out.push_back(*l_.antonym(c.object));
        } else if (r < 0.9) {
            out.push_back(l_.conn_so());
            out.push_back(c.subject);
            out.push_back(c.object);
        } else {
            TokenId other = pick(l_.objects);
            while (other == c.object || other == *l_.antonym(c.object)) {
                other = pick(l_.objects);
            }
            out.push_back(l_.conn_maybe());
            out.push_back(other);
        }
    }

    TokenSeq sentence() {
        const std::size_t target =
            kMinSentenceLength + rng_.below(kMaxSentenceLength - kMinSentenceLength + 1);
        TokenSeq out;
        clause(out);
        while (out.size() < target) {
            out.push_back(l_.conn_and());
            clause(out);
        }
        out.resize(target);
        return out;
    }

private:
    void maybe_push(TokenSeq& out, const TokenRange& r, double p) {
        if (rng_.uniform() < p) {
            out.push_back(pick(r));
        }
    }

    const VocabLayout& l_;
    Rng& rng_;
};

}  // namespace

// ---------------------------------------------------------------------------

Language::Language(LanguageSpec spec, const VocabLayout& layout) : spec_(std::move(spec)) {
    const std::size_t vocab_size = layout.vocab_size;
    if (spec_.id.empty() || spec_.id.find_first_of("\t\n\r ") != std::string::npos) {
        throw ConfigError("language: id must be non-empty and contain no whitespace");
    }
    forward_.resize(vocab_size);
    std::iota(forward_.begin(), forward_.end(), TokenId{0});
    if (spec_.permutation_seed != 0) {
        std::vector<TokenId> movable;
        for (TokenId t = tokens::kFirstRegular; t < vocab_size; ++t) {
            if (!layout.connectives.contains(t)) {
                movable.push_back(t);
            }
        }
        std::vector<TokenId> images = movable;
        Rng rng(Rng::mix(spec_.permutation_seed, 0x9E27));
        rng.shuffle(std::span<TokenId>(images));
        for (std::size_t i = 0; i < movable.size(); ++i) {
            forward_[movable[i]] = images[i];
        }
    }
    inverse_.resize(vocab_size);
    for (std::size_t i = 0; i < vocab_size; ++i) {
        inverse_[forward_[i]] = static_cast<TokenId>(i);
    }
}

TokenId Language::map(TokenId t) const {
    if (t >= forward_.size()) {
        throw DataError("language " + spec_.id + ": token " + std::to_string(t) + " outside vocabulary");
    }
    return forward_[t];
}

TokenId Language::unmap(TokenId t) const {
    if (t >= inverse_.size()) {
        throw DataError("language " + spec_.id + ": token " + std::to_string(t) + " outside vocabulary");
    }
    return inverse_[t];
}

TokenSeq Language::apply(const TokenSeq& seq) const {
    TokenSeq out(seq.size());
    std::transform(seq.begin(), seq.end(), out.begin(), [this](TokenId t) { return map(t); });
    return out;
}

TokenSeq Language::invert(const TokenSeq& seq) const {
    TokenSeq out(seq.size());
    std::transform(seq.begin(), seq.end(), out.begin(), [this](TokenId t) { return unmap(t); });
    return out;
}

Corpus Language::apply(const Corpus& corpus) const {
    Corpus out;
    out.reserve(corpus.size());
    for (const TokenSeq& s : corpus) {
        out.push_back(apply(s));
    }
    return out;
}

NliExample Language::apply(const NliExample& example) const {
    return NliExample{apply(example.premise), apply(example.hypothesis), example.label, spec_.id};
}

NliExample Language::invert(const NliExample& example, std::string base_id) const {
    return NliExample{invert(example.premise), invert(example.hypothesis), example.label, std::move(base_id)};
}

std::optional<TokenId> Language::antonym(const VocabLayout& layout, TokenId t) const {
    const std::optional<TokenId> base = layout.antonym(unmap(t));
    if (!base) {
        return std::nullopt;
    }
    return map(*base);
}

// ---------------------------------------------------------------------------

std::string_view split_name(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Dev: return "dev";
        case Split::Test: return "test";
    }
    return "unknown";
}

Split parse_split(std::string_view name) {
    for (Split s : {Split::Train, Split::Dev, Split::Test}) {
        if (split_name(s) == name) {
            return s;
        }
    }
    throw ConfigError("unknown split '" + std::string(name) + "'");
}

bool is_subsequence(std::span<const TokenId> needle, std::span<const TokenId> haystack) {
    std::size_t j = 0;
    for (std::size_t i = 0; i < haystack.size() && j < needle.size(); ++i) {
        if (haystack[i] == needle[j]) {
            ++j;
        }
    }
    return j == needle.size();
}

Label label_of(const TokenSeq& premise, const TokenSeq& hypothesis, const Language& language,
               const VocabLayout& layout) {
    return label_of(premise, hypothesis, [&](TokenId t) { return language.antonym(layout, t); });
}

namespace {

bool contains(const TokenSeq& seq, TokenId t) { return std::find(seq.begin(), seq.end(), t) != seq.end(); }

// Sorted distinct indices into [0, n), `count` of them, always including `forced` if given.
std::vector<std::size_t> pick_indices(Rng& rng, std::size_t n, std::size_t count,
                                      std::optional<std::size_t> forced = std::nullopt) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (forced) {
        std::swap(all[0], all[*forced]);
        rng.shuffle(std::span<std::size_t>(all).subspan(1));
    } else {
        rng.shuffle(std::span<std::size_t>(all));
    }
    all.resize(count);
    std::sort(all.begin(), all.end());
    return all;
}

TokenSeq gather(const TokenSeq& seq, const std::vector<std::size_t>& idx) {
    TokenSeq out;
    out.reserve(idx.size());
    for (std::size_t i : idx) {
        out.push_back(seq[i]);
    }
    return out;
}

class NliGenerator {
public:
    NliGenerator(const VocabLayout& layout, Rng& rng) : l_(layout), rng_(rng), grammar_(layout, rng_) {}

    NliExample make(Label label) {
        for (;;) {
            TokenSeq premise;
            grammar_.plain_clause(premise);
            if (rng_.uniform() < 0.5) {
                premise.push_back(l_.conn_and());
                grammar_.plain_clause(premise);
            }
            std::optional<TokenSeq> hyp = hypothesis(premise, label);
            if (!hyp) {
                continue;
            }
            if (label_of(premise, *hyp, [this](TokenId t) { return l_.antonym(t); }) != label) {
                throw std::logic_error("make_nli_set: generated example disagrees with its labelling rule");
            }
            return NliExample{std::move(premise), std::move(*hyp), label, {}};
        }
    }

private:
    std::optional<TokenSeq> hypothesis(const TokenSeq& p, Label label) {
        const std::size_t h = 2 + rng_.below(std::min<std::size_t>(4, p.size()) - 1);
        switch (label) {
            case Label::Entailment: {
                TokenSeq out = gather(p, pick_indices(rng_, p.size(), h));
                if (std::none_of(out.begin(), out.end(), [this](TokenId t) { return l_.is_content(t); })) {
                    return std::nullopt;
                }
                return out;
            }
            case Label::Contradiction: {
                std::vector<std::size_t> candidates;
                for (std::size_t i = 0; i < p.size(); ++i) {
                    if (l_.objects.contains(p[i]) && !contains(p, *l_.antonym(p[i]))) {
                        candidates.push_back(i);
                    }
                }
                if (candidates.empty()) {
                    return std::nullopt;
                }
                const std::size_t j = candidates[rng_.below(candidates.size())];
                const std::vector<std::size_t> idx = pick_indices(rng_, p.size(), h, j);
                TokenSeq out = gather(p, idx);
                const auto pos = static_cast<std::size_t>(std::find(idx.begin(), idx.end(), j) - idx.begin());
                out[pos] = *l_.antonym(p[j]);
                return out;
            }
            case Label::Neutral: {
                TokenSeq out = gather(p, pick_indices(rng_, p.size(), h));
                const TokenRange* classes[] = {&l_.subjects, &l_.verbs, &l_.objects};
                for (int attempt = 0; attempt < 64; ++attempt) {
                    const TokenId x = grammar_.pick(*classes[rng_.below(3)]);
                    const std::optional<TokenId> partner = l_.antonym(x);
                    if (contains(p, x) || (partner && contains(p, *partner))) {
                        continue;
                    }
                    out[rng_.below(out.size())] = x;
                    return out;
                }
                return std::nullopt;
            }
        }
        return std::nullopt;
    }

    const VocabLayout& l_;
    Rng& rng_;
    Grammar grammar_;
};

std::uint64_t split_hash(const NliExample& e) {
    Fnv1a h;
    h.update("nli-split");
    h.update(static_cast<std::uint64_t>(e.premise.size()));
    for (TokenId t : e.premise) {
        h.update(static_cast<std::uint64_t>(t));
    }
    h.update(static_cast<std::uint64_t>(e.hypothesis.size()));
    for (TokenId t : e.hypothesis) {
        h.update(static_cast<std::uint64_t>(t));
    }
    return h.digest();
}

}  // namespace

Corpus generate_base_corpus(const VocabLayout& layout, std::uint64_t seed, std::size_t num_sentences,
                            double relation_share) {
    if (num_sentences == 0) {
        throw ConfigError("generate_base_corpus: num_sentences must be positive");
    }
    if (!(relation_share >= 0.0 && relation_share <= 1.0)) {
        throw ConfigError("generate_base_corpus: relation_share must lie in [0, 1]");
    }
    Rng rng(Rng::mix(seed, 0xC0B5));
    Grammar grammar(layout, rng);
    NliGenerator relations(layout, rng);
    const TokenId answer[] = {layout.conn_so(), layout.conn_but(), layout.conn_maybe()};
    Corpus corpus;
    corpus.reserve(num_sentences);
    while (corpus.size() < num_sentences) {
        if (rng.uniform() >= relation_share) {
            corpus.push_back(grammar.sentence());
            continue;
        }
        const Label label = kAllLabels[rng.below(3)];
        NliExample e = relations.make(label);
        TokenSeq s = std::move(e.premise);
        s.push_back(layout.sep_premise());
        s.insert(s.end(), e.hypothesis.begin(), e.hypothesis.end());
        s.push_back(layout.sep_hypothesis());
        s.push_back(answer[static_cast<std::size_t>(label)]);
        if (s.size() >= kMinSentenceLength && s.size() <= kMaxSentenceLength) {
            corpus.push_back(std::move(s));
        }
    }
    return corpus;
}

std::vector<NliExample> make_nli_set(const Language& language, const VocabLayout& layout,
                                     std::size_t shots_per_class, Split split, std::uint64_t seed) {
    if (language.vocab_size() != layout.vocab_size) {
        throw ConfigError("make_nli_set: language and layout disagree on vocab_size");
    }
    const std::size_t per_class = split == Split::Test ? kTestExamplesPerLanguage / 3 : shots_per_class;
    if (per_class == 0) {
        throw ConfigError("make_nli_set: shots_per_class must be at least 1");
    }
    Rng rng(Rng::mix(seed, 0x4E11 + static_cast<std::uint64_t>(split)));
    NliGenerator gen(layout, rng);
    std::set<std::pair<TokenSeq, TokenSeq>> seen;
    std::vector<NliExample> out;
    out.reserve(3 * per_class);
    for (std::size_t i = 0; i < per_class; ++i) {
        for (Label label : kAllLabels) {
            for (;;) {
                NliExample e = gen.make(label);
                if (split_hash(e) % 3 != static_cast<std::uint64_t>(split)) {
                    continue;
                }
                if (!seen.emplace(e.premise, e.hypothesis).second) {
                    continue;
                }
                out.push_back(language.apply(e));
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

MlmStream::MlmStream(std::shared_ptr<const Corpus> corpus, std::size_t batch_size, std::uint64_t seed,
                     std::size_t vocab_size, MlmRecipe recipe)
    : corpus_(std::move(corpus)),
      batch_size_(batch_size),
      vocab_size_(vocab_size),
      recipe_(std::move(recipe)),
      rng_(Rng::mix(seed, 0x3A5C)) {
    if (!corpus_ || corpus_->empty()) {
        throw DataError("mlm stream: corpus is empty");
    }
    if (batch_size_ == 0) {
        throw ConfigError("mlm stream: batch_size must be positive");
    }
    if (vocab_size_ <= tokens::kFirstRegular) {
        throw ConfigError("mlm stream: vocab_size must exceed the special token range");
    }
    for (const TokenSeq& s : *corpus_) {
        if (s.empty()) {
            throw DataError("mlm stream: corpus contains an empty sentence");
        }
    }
    order_.resize(corpus_->size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = order_.size();
}

void MlmStream::corrupt(MlmExample& ex, std::size_t pos) {
    ex.loss[pos] = 1;
    const double r = rng_.uniform();
    if (r < recipe_.mask_share) {
        ex.input[pos] = tokens::kMask;
    } else if (r < recipe_.mask_share + recipe_.random_share) {
        ex.input[pos] = tokens::kFirstRegular + static_cast<TokenId>(rng_.below(vocab_size_ - tokens::kFirstRegular));
    }
}

MlmBatch MlmStream::next() {
    MlmBatch batch;
    batch.reserve(batch_size_);
    bool any = false;
    for (std::size_t b = 0; b < batch_size_; ++b) {
        if (cursor_ == order_.size()) {
            rng_.shuffle(std::span<std::size_t>(order_));
            cursor_ = 0;
        }
        const TokenSeq& s = (*corpus_)[order_[cursor_++]];
        MlmExample ex;
        ex.target.reserve(s.size() + 2);
        ex.target.push_back(tokens::kBos);
        ex.target.insert(ex.target.end(), s.begin(), s.end());
        ex.target.push_back(tokens::kEos);
        ex.input = ex.target;
        ex.loss.assign(ex.target.size(), 0);
        const std::size_t last = ex.target.size() - 2;
        const bool answer = !s.empty() && std::find(recipe_.answer_tokens.begin(), recipe_.answer_tokens.end(),
                                                    ex.target[last]) != recipe_.answer_tokens.end();
        if (answer) {
            if (rng_.uniform() < recipe_.answer_select_rate) {
                corrupt(ex, last);
                any = true;
            }
        } else {
            for (std::size_t i = 0; i < ex.target.size(); ++i) {
                if (ex.target[i] >= tokens::kFirstRegular && rng_.uniform() < recipe_.select_rate) {
                    corrupt(ex, i);
                    any = true;
                }
            }
        }
        batch.push_back(std::move(ex));
    }
    if (!any) {
        MlmExample& ex = batch.front();
        std::vector<std::size_t> regular;
        for (std::size_t i = 0; i < ex.target.size(); ++i) {
            if (ex.target[i] >= tokens::kFirstRegular) {
                regular.push_back(i);
            }
        }
        if (!regular.empty()) {
            corrupt(ex, regular[rng_.below(regular.size())]);
        }
    }
    return batch;
}

MlmRecipe answer_focused_recipe(const VocabLayout& layout, double rate) {
    MlmRecipe r;
    r.answer_tokens = {layout.conn_so(), layout.conn_but(), layout.conn_maybe()};
    r.answer_select_rate = rate;
    return r;
}

MlmStream mlm_batches(Corpus corpus, std::size_t batch_size, std::uint64_t seed, std::size_t vocab_size,
                      MlmRecipe recipe) {
    return MlmStream(std::make_shared<const Corpus>(std::move(corpus)), batch_size, seed, vocab_size,
                     std::move(recipe));
}

// ---------------------------------------------------------------------------

namespace {

void append_ids(std::string& out, const TokenSeq& seq) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i > 0) {
            out.push_back(' ');
        }
        out += std::to_string(seq[i]);
    }
}

TokenSeq parse_ids(std::string_view field, std::size_t line_no) {
    TokenSeq out;
    std::size_t i = 0;
    while (i < field.size()) {
        const std::size_t end = std::min(field.find(' ', i), field.size());
        TokenId v = 0;
        const auto [ptr, ec] = std::from_chars(field.data() + i, field.data() + end, v);
        if (ec != std::errc() || ptr != field.data() + end) {
            throw FormatError("dataset line " + std::to_string(line_no) + ": bad token id '" +
                              std::string(field.substr(i, end - i)) + "'");
        }
        out.push_back(v);
        i = end + 1;
    }
    return out;
}

}  // namespace

std::string format_dataset(const std::vector<NliExample>& examples) {
    std::string out;
    for (const NliExample& e : examples) {
        out += e.language;
        out.push_back('\t');
        out += label_name(e.label);
        out.push_back('\t');
        append_ids(out, e.premise);
        out.push_back('\t');
        append_ids(out, e.hypothesis);
        out.push_back('\n');
    }
    return out;
}

std::vector<NliExample> parse_dataset(std::string_view text) {
    std::vector<NliExample> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t nl = std::min(text.find('\n', pos), text.size());
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string_view> fields;
        std::size_t f = 0;
        while (true) {
            const std::size_t tab = line.find('\t', f);
            fields.push_back(line.substr(f, tab == std::string_view::npos ? std::string_view::npos : tab - f));
            if (tab == std::string_view::npos) {
                break;
            }
            f = tab + 1;
        }
        if (fields.size() != 4) {
            throw FormatError("dataset line " + std::to_string(line_no) + ": expected 4 tab-separated fields, got " +
                              std::to_string(fields.size()));
        }
        NliExample e;
        e.language = std::string(fields[0]);
        e.label = parse_label(fields[1]);
        e.premise = parse_ids(fields[2], line_no);
        e.hypothesis = parse_ids(fields[3], line_no);
        out.push_back(std::move(e));
    }
    return out;
}

void save_dataset(const std::filesystem::path& path, const std::vector<NliExample>& examples) {
    write_text_file(path, format_dataset(examples));
}

std::vector<NliExample> load_dataset(const std::filesystem::path& path) { return parse_dataset(read_text_file(path)); }

}  // namespace ltp
