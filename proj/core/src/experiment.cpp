#include "ltp/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <tuple>

#include "ltp/error.hpp"
#include "ltp/hash.hpp"
#include "ltp/serialize.hpp"

namespace ltp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string short_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
    if (!j.is_object()) {
        throw ConfigError(std::string(where) + ": expected an object");
    }
    for (const auto& [key, value] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
        }
    }
}

template <class T>
void read(const json& j, std::string_view key, T& out) {
    const auto it = j.find(std::string(key));
    if (it != j.end()) {
        out = it->get<T>();
    }
}

json config_json(const ExperimentConfig& c, bool with_paths) {
    const PretrainConfig& p = c.pretrain;
    const SelectionConfig& s = c.selection;
    const TrainRegime& r = c.regime;
    json langs = json::array();
    for (const LanguageSpec& l : c.languages) {
        langs.push_back(json{{"id", l.id}, {"permutation_seed", l.permutation_seed}, {"seen", l.seen_in_pretraining}});
    }
    json j{
        {"model", to_json(c.model)},
        {"pretrain",
         {{"steps", p.steps},
          {"batch_size", p.batch_size},
          {"learning_rate", p.learning_rate},
          {"weight_decay", p.weight_decay},
          {"clip_norm", p.clip_norm},
          {"seed", p.seed}}},
        {"corpus",
         {{"sentences_per_language", c.corpus.sentences_per_language},
          {"selection_sentences", c.corpus.selection_sentences},
          {"relation_share", c.corpus.relation_share},
          {"answer_focus_rate", c.corpus.answer_focus_rate},
          {"seed", c.corpus.seed}}},
        {"selection",
         {{"strategy", std::string(strategy_name(s.strategy))},
          {"scope", scope_name(s.scope)},
          {"active_ratio", s.active_ratio},
          {"l1_coefficient", s.l1_coefficient},
          {"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"learning_rate", s.learning_rate},
          {"eval_every", s.eval_every},
          {"validation_fraction", s.validation_fraction},
          {"max_steps", s.max_steps},
          {"clip_norm", s.clip_norm},
          {"seed", s.seed}}},
        {"tuning",
         {{"epochs", r.epochs},
          {"batch_size", r.batch_size},
          {"learning_rate", r.learning_rate},
          {"weight_decay", r.weight_decay},
          {"clip_norm", r.clip_norm},
          {"layout", std::string(layout_name(r.layout))},
          {"prompt_length", c.prompt_length}}},
        {"languages", langs},
        {"source_language", c.source_language},
        {"target_languages", c.target_languages},
        {"setting", std::string(setting_name(c.setting))},
        {"shots", c.shots},
        {"dev_shots", c.dev_shots},
        {"seeds", c.seeds},
        {"mu_grid", c.mu_grid},
        {"shot_grid", c.shot_grid},
        {"data_seed", c.data_seed},
        {"deviations", config_deviations()},
    };
    if (with_paths) {
        j["checkpoint"] = c.checkpoint.generic_string();
        j["mask"] = c.mask.generic_string();
        j["output_dir"] = c.output_dir.generic_string();
    }
    return j;
}

// Fingerprint of the settings a single cell depends on; grids and seed lists are left
// out so a widened sweep reuses finished cells.
std::string cell_fingerprint(const ExperimentConfig& c, const std::string& theta_fp, const CellKey& key) {
    json j = config_json(c, false);
    for (const char* k : {"seeds", "mu_grid", "shot_grid", "shots", "setting", "target_languages", "deviations"}) {
        j.erase(k);
    }
    j["selection"].erase("active_ratio");
    Fnv1a h;
    h.update(j.dump());
    h.update(theta_fp);
    h.update(std::string(method_name(key.method)));
    h.update(std::string(setting_name(key.setting)));
    h.update(key.mu);
    h.update(static_cast<std::uint64_t>(key.shots));
    h.update(key.seed);
    h.update(key.train_language);
    return h.hex();
}

json key_json(const CellKey& k) {
    return json{{"method", std::string(method_name(k.method))},
                {"setting", std::string(setting_name(k.setting))},
                {"mu", k.mu},
                {"shots", k.shots},
                {"seed", k.seed},
                {"train_language", k.train_language}};
}

auto key_order(const CellKey& k) {
    return std::make_tuple(static_cast<int>(k.setting), static_cast<int>(k.method), k.mu, k.shots,
                           k.train_language, k.seed);
}

void sort_cells(std::vector<CellResult>& cells) {
    std::sort(cells.begin(), cells.end(),
              [](const CellResult& a, const CellResult& b) { return key_order(a.key) < key_order(b.key); });
}

bool same_mu(double a, double b) { return std::abs(a - b) < 1e-12; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_meta(const ExperimentConfig& config, std::string_view command, double seconds, json extra = json::object()) {
    extra["command"] = std::string(command);
    extra["seconds"] = seconds;
    extra["config_fingerprint"] = config.fingerprint();
    extra["config"] = to_json(config);
    write_text_file(config.output_dir / "run_meta.json", extra.dump(2) + "\n");
}

Checkpoint load_theta(const ExperimentConfig& config) {
    if (config.checkpoint.empty()) {
        throw ConfigError("a checkpoint is required (--theta or \"checkpoint\" in the config)");
    }
    return load_checkpoint(config.checkpoint).backbone;
}

std::vector<std::string> train_languages(const ExperimentConfig& config) {
    if (config.setting == Setting::ZeroShot) {
        return {config.source_language};
    }
    return config.resolved_targets();
}

MaskDistribution distribution_of(const SparsityMask& mask, const Checkpoint& gated) {
    return MaskDistribution{std::string(strategy_name(mask.strategy)), scope_name(mask.scope), mask.active_ratio,
                            mask_report(mask, gated)};
}

// The checkpoint a mask gates: theta itself, or its untied copy.
Checkpoint gated_layout(const Checkpoint& theta, const SparsityMask& mask) {
    if (theta.config.head_tied && mask.entries.count(std::string(param_names::kOutputEmbedding)) != 0) {
        return untie_head(theta);
    }
    return theta;
}

json distribution_json(const MaskDistribution& d) {
    json layers = json::array();
    std::size_t eligible = 0;
    for (const LayerStat& s : d.report.layers) {
        layers.push_back(json{{"layer", s.layer}, {"selected", s.selected}, {"eligible", s.eligible}, {"share", s.share}});
        eligible += s.eligible;
    }
    return json{{"strategy", d.strategy},
                {"scope", d.scope},
                {"mu", d.mu},
                {"selected", d.report.selected},
                {"eligible", eligible},
                {"embedding_share", d.report.share_of(0)},
                {"layers", layers}};
}

MaskDistribution distribution_from_json(const json& j) {
    MaskDistribution d;
    d.strategy = j.at("strategy").get<std::string>();
    d.scope = j.at("scope").get<std::string>();
    d.mu = j.at("mu").get<double>();
    d.report.selected = j.at("selected").get<std::size_t>();
    for (const json& l : j.at("layers")) {
        d.report.layers.push_back(LayerStat{l.at("layer").get<int>(), l.at("selected").get<std::size_t>(),
                                            l.at("eligible").get<std::size_t>(), l.at("share").get<double>()});
    }
    return d;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view method_name(Method m) {
    switch (m) {
        case Method::Ft: return "ft";
        case Method::Sp: return "sp";
        case Method::Ltp: return "ltp";
    }
    return "?";
}

Method parse_method(std::string_view name) {
    for (Method m : {Method::Ft, Method::Sp, Method::Ltp}) {
        if (method_name(m) == name) {
            return m;
        }
    }
    throw ConfigError("unknown method '" + std::string(name) + "' (expected ft, sp or ltp)");
}

std::string_view setting_name(Setting s) { return s == Setting::ZeroShot ? "zeroshot" : "inlanguage"; }

Setting parse_setting(std::string_view name) {
    if (name == "zeroshot") {
        return Setting::ZeroShot;
    }
    if (name == "inlanguage") {
        return Setting::InLanguage;
    }
    throw ConfigError("unknown setting '" + std::string(name) + "' (expected zeroshot or inlanguage)");
}

void ExperimentConfig::validate() const {
    model.validate();
    selection.validate();
    if (regime.epochs == 0 || regime.batch_size == 0 || !(regime.learning_rate > 0.0)) {
        throw ConfigError("tuning: epochs, batch_size and learning_rate must be positive");
    }
    if (pretrain.batch_size == 0 || !(pretrain.learning_rate > 0.0)) {
        throw ConfigError("pretrain: batch_size and learning_rate must be positive");
    }
    if (prompt_length == 0) {
        throw ConfigError("tuning: prompt_length must be at least 1");
    }
    if (corpus.sentences_per_language == 0 || corpus.selection_sentences == 0) {
        throw ConfigError("corpus: sentence counts must be positive");
    }
    if (!(corpus.relation_share >= 0.0 && corpus.relation_share <= 1.0) ||
        !(corpus.answer_focus_rate >= 0.0 && corpus.answer_focus_rate <= 1.0)) {
        throw ConfigError("corpus: relation_share and answer_focus_rate must lie in [0, 1]");
    }
    if (languages.empty()) {
        throw ConfigError("languages: roster is empty");
    }
    std::set<std::string> ids;
    for (const LanguageSpec& l : languages) {
        if (!ids.insert(l.id).second) {
            throw ConfigError("languages: duplicate id '" + l.id + "'");
        }
    }
    if (ids.count(source_language) == 0) {
        throw ConfigError("source language '" + source_language + "' is not in the roster");
    }
    for (const std::string& t : target_languages) {
        if (ids.count(t) == 0) {
            throw ConfigError("target language '" + t + "' is not in the roster");
        }
    }
    if (resolved_targets().empty()) {
        throw ConfigError("no target languages");
    }
    if (seeds.empty()) {
        throw ConfigError("seeds: list is empty");
    }
    if (shots == 0 || dev_shots == 0) {
        throw ConfigError("shots and dev_shots must be at least 1");
    }
    for (double mu : mu_grid) {
        if (!(mu >= 0.0 && mu <= 1.0)) {
            throw ConfigError("mu_grid: " + short_num(mu) + " outside [0, 1]");
        }
    }
    for (std::size_t k : shot_grid) {
        if (k == 0) {
            throw ConfigError("shot_grid: entries must be at least 1");
        }
    }
    for (const fs::path& p : {checkpoint, mask}) {
        if (!p.empty() && !fs::exists(p)) {
            throw ConfigError("referenced file '" + p.string() + "' does not exist");
        }
    }
    VocabLayout::for_vocab(model.vocab_size);
}

std::string ExperimentConfig::fingerprint() const {
    Fnv1a h;
    h.update(config_json(*this, false).dump());
    return h.hex();
}

std::vector<std::string> ExperimentConfig::resolved_targets() const {
    if (!target_languages.empty()) {
        return target_languages;
    }
    std::vector<std::string> out;
    for (const LanguageSpec& l : languages) {
        if (l.id != source_language) {
            out.push_back(l.id);
        }
    }
    return out;
}

ExperimentConfig toy_experiment_config() {
    ExperimentConfig c;
    c.model.vocab_size = 128;
    c.model.hidden_dim = 32;
    c.model.num_layers = 6;
    c.model.num_heads = 4;
    c.model.ffn_dim = 64;
    c.model.max_seq_len = 48;
    c.pretrain.steps = 8000;
    c.pretrain.learning_rate = 2e-3;
    c.pretrain.seed = 1;
    c.corpus.relation_share = 0.8;
    c.selection.strategy = Strategy::DecoupleUntie;
    c.selection.epochs = 1;
    c.selection.eval_every = 50;
    c.regime.learning_rate = 1e-3;
    c.regime.epochs = 70;
    c.languages = {{"en", 0, true},     {"xa", 1001, true}, {"xb", 1002, true},
                   {"xc", 1003, true},  {"ua", 1004, false}, {"ub", 1005, false}};
    c.source_language = "en";
    c.seeds = {0, 1, 2, 3, 4};
    c.mu_grid = {0.05, 0.2, 0.5, 0.75, 0.95};
    c.shot_grid = {16};
    return c;
}

std::vector<std::string> config_deviations() {
    return {
        "gradient norm clipped at 1.0 in every training loop",
        "pretraining MLM corrupts only the final connective of answer sentences (so/but/maybe), at answer_focus_rate",
        "pretraining corpora mix relation sentences at relation_share",
        "toy-scale learning rates: pretrain 2e-3, tuning 1e-3",
        "ft baseline is verbalized tuning with mu=1 and no prompt, not a classification head",
        "selection keeps the adapted checkpoint with the lowest held-out MLM loss",
    };
}

json to_json(const ExperimentConfig& config) { return config_json(config, true); }

ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c = toy_experiment_config();
    try {
        check_keys(j,
                   {"model", "pretrain", "corpus", "selection", "tuning", "languages", "source_language",
                    "target_languages", "setting", "shots", "dev_shots", "seeds", "mu_grid", "shot_grid", "data_seed",
                    "checkpoint", "mask", "output_dir", "deviations"},
                   "config");
        if (j.contains("model")) {
            c.model = model_config_from_json(j.at("model"));
        }
        if (const auto it = j.find("pretrain"); it != j.end()) {
            check_keys(*it, {"steps", "batch_size", "learning_rate", "weight_decay", "clip_norm", "seed"}, "pretrain");
            read(*it, "steps", c.pretrain.steps);
            read(*it, "batch_size", c.pretrain.batch_size);
            read(*it, "learning_rate", c.pretrain.learning_rate);
            read(*it, "weight_decay", c.pretrain.weight_decay);
            read(*it, "clip_norm", c.pretrain.clip_norm);
            read(*it, "seed", c.pretrain.seed);
        }
        if (const auto it = j.find("corpus"); it != j.end()) {
            check_keys(*it,
                       {"sentences_per_language", "selection_sentences", "relation_share", "answer_focus_rate", "seed"},
                       "corpus");
            read(*it, "sentences_per_language", c.corpus.sentences_per_language);
            read(*it, "selection_sentences", c.corpus.selection_sentences);
            read(*it, "relation_share", c.corpus.relation_share);
            read(*it, "answer_focus_rate", c.corpus.answer_focus_rate);
            read(*it, "seed", c.corpus.seed);
        }
        if (const auto it = j.find("selection"); it != j.end()) {
            check_keys(*it,
                       {"strategy", "scope", "active_ratio", "l1_coefficient", "epochs", "batch_size", "learning_rate",
                        "eval_every", "validation_fraction", "max_steps", "clip_norm", "seed"},
                       "selection");
            SelectionConfig& s = c.selection;
            if (it->contains("strategy")) {
                s.strategy = parse_strategy(it->at("strategy").get<std::string>());
            }
            if (it->contains("scope")) {
                s.scope = parse_scope(it->at("scope").get<std::string>());
            }
            read(*it, "active_ratio", s.active_ratio);
            read(*it, "l1_coefficient", s.l1_coefficient);
            read(*it, "epochs", s.epochs);
            read(*it, "batch_size", s.batch_size);
            read(*it, "learning_rate", s.learning_rate);
            read(*it, "eval_every", s.eval_every);
            read(*it, "validation_fraction", s.validation_fraction);
            read(*it, "max_steps", s.max_steps);
            read(*it, "clip_norm", s.clip_norm);
            read(*it, "seed", s.seed);
        }
        if (const auto it = j.find("tuning"); it != j.end()) {
            check_keys(*it,
                       {"epochs", "batch_size", "learning_rate", "weight_decay", "clip_norm", "layout",
                        "prompt_length"},
                       "tuning");
            read(*it, "epochs", c.regime.epochs);
            read(*it, "batch_size", c.regime.batch_size);
            read(*it, "learning_rate", c.regime.learning_rate);
            read(*it, "weight_decay", c.regime.weight_decay);
            read(*it, "clip_norm", c.regime.clip_norm);
            if (it->contains("layout")) {
                c.regime.layout = parse_layout(it->at("layout").get<std::string>());
            }
            read(*it, "prompt_length", c.prompt_length);
        }
        if (const auto it = j.find("languages"); it != j.end()) {
            c.languages.clear();
            for (const json& l : *it) {
                check_keys(l, {"id", "permutation_seed", "seen"}, "languages");
                LanguageSpec spec;
                spec.id = l.at("id").get<std::string>();
                read(l, "permutation_seed", spec.permutation_seed);
                read(l, "seen", spec.seen_in_pretraining);
                c.languages.push_back(spec);
            }
        }
        read(j, "source_language", c.source_language);
        read(j, "target_languages", c.target_languages);
        if (j.contains("setting")) {
            c.setting = parse_setting(j.at("setting").get<std::string>());
        }
        read(j, "shots", c.shots);
        read(j, "dev_shots", c.dev_shots);
        read(j, "seeds", c.seeds);
        read(j, "mu_grid", c.mu_grid);
        read(j, "shot_grid", c.shot_grid);
        read(j, "data_seed", c.data_seed);
        if (j.contains("checkpoint")) {
            c.checkpoint = j.at("checkpoint").get<std::string>();
        }
        if (j.contains("mask")) {
            c.mask = j.at("mask").get<std::string>();
        }
        if (j.contains("output_dir")) {
            c.output_dir = j.at("output_dir").get<std::string>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ConfigError("config file '" + path.string() + "' does not exist");
    }
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
    return experiment_config_from_json(j);
}

// ---------------------------------------------------------------------------

Testbed::Testbed(const ExperimentConfig& config)
    : layout(VocabLayout::for_vocab(config.model.vocab_size)), verbalizer(default_verbalizer(layout)) {
    for (const LanguageSpec& spec : config.languages) {
        languages.emplace_back(spec, layout);
    }
}

const Language& Testbed::language(std::string_view id) const {
    for (const Language& l : languages) {
        if (l.spec().id == id) {
            return l;
        }
    }
    throw ConfigError("unknown language '" + std::string(id) + "'");
}

Checkpoint run_pretrain(const ExperimentConfig& config) {
    const Testbed bed(config);
    std::vector<Corpus> corpora;
    for (std::size_t i = 0; i < bed.languages.size(); ++i) {
        const Language& lang = bed.languages[i];
        if (!lang.spec().seen_in_pretraining) {
            continue;
        }
        corpora.push_back(lang.apply(generate_base_corpus(bed.layout, Rng::mix(config.corpus.seed, i),
                                                          config.corpus.sentences_per_language,
                                                          config.corpus.relation_share)));
    }
    PretrainConfig p = config.pretrain;
    if (config.corpus.answer_focus_rate > 0.0) {
        p.recipe = answer_focused_recipe(bed.layout, config.corpus.answer_focus_rate);
    }
    return pretrain_multilingual(config.model, corpora, p).theta;
}

Selection run_selection(const ExperimentConfig& config, const Checkpoint& theta) {
    const Testbed bed(config);
    const Corpus corpus = bed.language(config.source_language)
                              .apply(generate_base_corpus(bed.layout, Rng::mix(config.corpus.seed, 0x5E1EC7),
                                                          config.corpus.selection_sentences,
                                                          config.corpus.relation_share));
    Selection s;
    s.adaptation = mlm_adapt(theta, corpus, config.selection);
    s.deltas = compute_deltas(theta, s.adaptation.theta_l, config.selection.strategy, config.selection.scope);
    return s;
}

std::vector<LanguageScore> score_languages(const ExperimentConfig& config, const Testbed& testbed,
                                           const Checkpoint& backbone, const SoftPrompt* prompt,
                                           const std::vector<std::string>& languages) {
    std::vector<NliExample> test;
    for (const std::string& id : languages) {
        const std::vector<NliExample> t =
            make_nli_set(testbed.language(id), testbed.layout, 0, Split::Test, config.data_seed);
        test.insert(test.end(), t.begin(), t.end());
    }
    const EvalResult ev = evaluate(backbone, prompt, testbed.verbalizer, test, config.regime.layout);
    std::vector<LanguageScore> out;
    for (const std::string& id : languages) {
        out.push_back(LanguageScore{id, ev.per_language.at(id)});
    }
    return out;
}

CellOutput run_cell(const ExperimentConfig& config, const Testbed& testbed, const Checkpoint& theta,
                    const SparsityMask* mask, const CellKey& key) {
    const Language& lang = testbed.language(key.train_language);
    const std::uint64_t sample_seed = Rng::mix(config.data_seed, key.seed);
    const std::vector<NliExample> train = make_nli_set(lang, testbed.layout, key.shots, Split::Train, sample_seed);
    const std::vector<NliExample> dev = make_nli_set(lang, testbed.layout, config.dev_shots, Split::Dev, sample_seed);

    TrainRegime regime = config.regime;
    regime.seed = key.seed;
    std::optional<SoftPrompt> prompt;
    const SparsityMask* gate = nullptr;
    switch (key.method) {
        case Method::Ft: regime.kind = RegimeKind::FullFt; break;
        case Method::Sp: regime.kind = RegimeKind::SoftPromptOnly; break;
        case Method::Ltp:
            if (mask == nullptr) {
                throw ConfigError("run_cell: ltp needs a mask");
            }
            regime.kind = RegimeKind::Ltp;
            gate = mask;
            break;
    }
    if (key.method != Method::Ft) {
        prompt = SoftPrompt::create(config.prompt_length, config.model.hidden_dim, Rng::mix(key.seed, 0x9807));
    }

    CellOutput out;
    out.tuned = prompt_tune(theta, gate, prompt ? &*prompt : nullptr, train, dev, testbed.verbalizer, regime);
    out.result.key = key;
    out.result.best_epoch = out.tuned.best_epoch;
    out.result.best_dev_accuracy = out.tuned.best_dev_accuracy;
    out.result.selected = gate != nullptr ? gate->selected : 0;
    std::vector<std::string> langs;
    if (key.setting == Setting::ZeroShot) {
        for (const LanguageSpec& l : config.languages) {
            langs.push_back(l.id);
        }
    } else {
        langs.push_back(key.train_language);
    }
    out.result.scores = score_languages(config, testbed, out.tuned.backbone,
                                        out.tuned.prompt ? &*out.tuned.prompt : nullptr, langs);
    return out;
}

json to_json(const CellResult& cell) {
    json scores = json::array();
    for (const LanguageScore& s : cell.scores) {
        scores.push_back(json{{"language", s.language},
                              {"correct", s.accuracy.correct},
                              {"count", s.accuracy.count},
                              {"accuracy", s.accuracy.value()}});
    }
    json j = key_json(cell.key);
    j["scores"] = scores;
    j["best_epoch"] = cell.best_epoch;
    j["best_dev_accuracy"] = cell.best_dev_accuracy;
    j["selected"] = cell.selected;
    return j;
}

CellResult cell_from_json(const json& j) {
    try {
        CellResult c;
        c.key.method = parse_method(j.at("method").get<std::string>());
        c.key.setting = parse_setting(j.at("setting").get<std::string>());
        c.key.mu = j.at("mu").get<double>();
        c.key.shots = j.at("shots").get<std::size_t>();
        c.key.seed = j.at("seed").get<std::uint64_t>();
        c.key.train_language = j.at("train_language").get<std::string>();
        for (const json& s : j.at("scores")) {
            c.scores.push_back(LanguageScore{s.at("language").get<std::string>(),
                                             Accuracy{s.at("correct").get<std::size_t>(), s.at("count").get<std::size_t>()}});
        }
        c.best_epoch = j.at("best_epoch").get<std::size_t>();
        c.best_dev_accuracy = j.at("best_dev_accuracy").get<double>();
        c.selected = j.at("selected").get<std::size_t>();
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("cell record: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("cell record: ") + e.what());
    }
}

// ---------------------------------------------------------------------------

json aggregate(const ExperimentReport& report) {
    std::vector<CellResult> cells = report.cells;
    sort_cells(cells);
    const std::set<std::string> targets(report.targets.begin(), report.targets.end());
    json out = json::array();
    for (std::size_t i = 0; i < cells.size();) {
        const CellKey& k = cells[i].key;
        std::size_t end = i;
        std::map<std::string, std::pair<double, std::size_t>> per_language;
        double sum = 0.0;
        std::size_t n = 0;
        std::set<std::uint64_t> seeds;
        while (end < cells.size() && cells[end].key.setting == k.setting && cells[end].key.method == k.method &&
               same_mu(cells[end].key.mu, k.mu) && cells[end].key.shots == k.shots) {
            seeds.insert(cells[end].key.seed);
            for (const LanguageScore& s : cells[end].scores) {
                auto& [lsum, ln] = per_language[s.language];
                lsum += s.accuracy.value();
                ++ln;
                if (targets.count(s.language) != 0) {
                    sum += s.accuracy.value();
                    ++n;
                }
            }
            ++end;
        }
        json langs = json::object();
        for (const auto& [id, acc] : per_language) {
            langs[id] = acc.first / static_cast<double>(acc.second);
        }
        json g = key_json(k);
        g.erase("seed");
        g.erase("train_language");
        g["seeds"] = seeds.size();
        g["per_language"] = langs;
        g["avg"] = n == 0 ? 0.0 : sum / static_cast<double>(n);
        g["cells"] = n;
        out.push_back(g);
        i = end;
    }
    return out;
}

double mean_target_accuracy(const ExperimentReport& report, Method method, double mu) {
    const std::set<std::string> targets(report.targets.begin(), report.targets.end());
    double sum = 0.0;
    std::size_t n = 0;
    for (const CellResult& c : report.cells) {
        if (c.key.method != method || !same_mu(c.key.mu, mu)) {
            continue;
        }
        for (const LanguageScore& s : c.scores) {
            if (targets.count(s.language) != 0) {
                sum += s.accuracy.value();
                ++n;
            }
        }
    }
    if (n == 0) {
        throw DataError("mean_target_accuracy: no cells for " + std::string(method_name(method)) + " at mu " +
                        short_num(mu));
    }
    return sum / static_cast<double>(n);
}

json to_json(const ExperimentReport& report, const ExperimentConfig& config) {
    std::vector<CellResult> cells = report.cells;
    sort_cells(cells);
    json jc = json::array();
    for (const CellResult& c : cells) {
        jc.push_back(to_json(c));
    }
    json dists = json::array();
    for (const MaskDistribution& d : report.distributions) {
        dists.push_back(distribution_json(d));
    }
    return json{{"config", config_json(config, false)},
                {"config_fingerprint", report.config_fingerprint},
                {"theta_fingerprint", report.theta_fingerprint},
                {"targets", report.targets},
                {"cells", jc},
                {"aggregates", aggregate(report)},
                {"mask_distributions", dists}};
}

std::string report_table_csv(const ExperimentReport& report) {
    std::vector<CellResult> cells = report.cells;
    sort_cells(cells);
    std::string out = "setting,method,mu,shots,train_language,seed,language,correct,count,accuracy\n";
    for (const CellResult& c : cells) {
        for (const LanguageScore& s : c.scores) {
            out += std::string(setting_name(c.key.setting)) + "," + std::string(method_name(c.key.method)) + "," +
                   short_num(c.key.mu) + "," + std::to_string(c.key.shots) + "," + c.key.train_language + "," +
                   std::to_string(c.key.seed) + "," + s.language + "," + std::to_string(s.accuracy.correct) + "," +
                   std::to_string(s.accuracy.count) + "," + fixed(s.accuracy.value(), 6) + "\n";
        }
    }
    return out;
}

std::string mask_distribution_csv(const std::vector<MaskDistribution>& distributions) {
    std::string out = "strategy,scope,mu,layer,selected,eligible,share\n";
    for (const MaskDistribution& d : distributions) {
        for (const LayerStat& s : d.report.layers) {
            out += d.strategy + "," + d.scope + "," + short_num(d.mu) + "," + std::to_string(s.layer) + "," +
                   std::to_string(s.selected) + "," + std::to_string(s.eligible) + "," + fixed(s.share, 6) + "\n";
        }
    }
    return out;
}

void write_report(const fs::path& dir, const ExperimentReport& report, const ExperimentConfig& config) {
    write_text_file(dir / "report.json", to_json(report, config).dump(2) + "\n");
    write_text_file(dir / "table.csv", report_table_csv(report));
    write_text_file(dir / "mask_dist.csv", mask_distribution_csv(report.distributions));
}

// ---------------------------------------------------------------------------

ExperimentConfig apply_options(ExperimentConfig config, const CommandOptions& o) {
    if (o.seed) {
        config.seeds = {*o.seed};
    }
    if (o.shots) {
        config.shots = *o.shots;
        config.shot_grid = {*o.shots};
    }
    if (o.mu) {
        config.selection.active_ratio = *o.mu;
        config.mu_grid = {*o.mu};
    }
    if (o.setting) {
        config.setting = *o.setting;
    }
    if (o.strategy) {
        config.selection.strategy = *o.strategy;
    }
    config.validate();
    return config;
}

SparsityMask load_mask_for(const fs::path& path, const Checkpoint& theta) {
    SparsityMask mask = load_mask(path);
    if (mask.theta_fingerprint != theta.content_fingerprint()) {
        throw FingerprintMismatch("mask '" + path.string() + "' was selected from theta " + mask.theta_fingerprint +
                                  ", not from the supplied checkpoint " + theta.content_fingerprint());
    }
    return mask;
}

fs::path cmd_pretrain(const ExperimentConfig& config) {
    const auto t0 = std::chrono::steady_clock::now();
    const Checkpoint theta = run_pretrain(config);
    const fs::path path = config.output_dir / "theta.ckpt";
    save_checkpoint(path, theta);
    write_meta(config, "pretrain", seconds_since(t0),
               json{{"theta_fingerprint", theta.content_fingerprint()}, {"checkpoint", path.generic_string()}});
    return path;
}

void cmd_select(const ExperimentConfig& config, const CommandOptions& options) {
    const auto t0 = std::chrono::steady_clock::now();
    const Checkpoint theta = load_theta(config);
    const Selection sel = run_selection(config, theta);
    const SparsityMask mask = select_mask(sel.deltas, config.selection.active_ratio, config.selection.scope);
    save_checkpoint(config.output_dir / "theta_l.ckpt", sel.adaptation.theta_l);
    save_mask(config.output_dir / "mask.ltpmask", mask);

    ExperimentReport report;
    report.config_fingerprint = config.fingerprint();
    report.theta_fingerprint = theta.content_fingerprint();
    report.targets = config.resolved_targets();
    report.distributions.push_back(distribution_of(mask, sel.adaptation.theta_l));
    if (options.compare_strategies) {
        for (Strategy s : {Strategy::Vanilla, Strategy::DecoupleUntie, Strategy::FreezeEmbeddings}) {
            if (s == config.selection.strategy) {
                continue;
            }
            ExperimentConfig other = config;
            other.selection.strategy = s;
            const Selection alt = run_selection(other, theta);
            report.distributions.push_back(
                distribution_of(select_mask(alt.deltas, config.selection.active_ratio, config.selection.scope),
                                alt.adaptation.theta_l));
        }
    }
    write_report(config.output_dir, report, config);
    write_meta(config, "select", seconds_since(t0),
               json{{"adaptation_steps", sel.adaptation.steps},
                    {"best_step", sel.adaptation.best_step},
                    {"selected", mask.selected},
                    {"eligible", mask.eligible},
                    {"mask", (config.output_dir / "mask.ltpmask").generic_string()}});
}

void cmd_tune(const ExperimentConfig& config, const CommandOptions& options) {
    const auto t0 = std::chrono::steady_clock::now();
    const Method method = options.method.value_or(Method::Ltp);
    const Checkpoint theta = load_theta(config);
    const Testbed bed(config);

    std::optional<SparsityMask> mask;
    if (method == Method::Ltp) {
        if (!config.mask.empty()) {
            mask = load_mask_for(config.mask, theta);
        } else {
            const Selection sel = run_selection(config, theta);
            mask = select_mask(sel.deltas, config.selection.active_ratio, config.selection.scope);
        }
    }
    const double mu = method == Method::Ft ? 1.0 : method == Method::Sp ? 0.0 : mask->active_ratio;

    ExperimentReport report;
    report.config_fingerprint = config.fingerprint();
    report.theta_fingerprint = theta.content_fingerprint();
    report.targets = config.resolved_targets();
    if (mask) {
        report.distributions.push_back(distribution_of(*mask, gated_layout(theta, *mask)));
    }
    for (std::uint64_t seed : config.seeds) {
        for (const std::string& lang : train_languages(config)) {
            const CellKey key{method, config.setting, mu, config.shots, seed, lang};
            CellOutput out = run_cell(config, bed, theta, mask ? &*mask : nullptr, key);
            const std::string stem = std::string(method_name(method)) + "_" + lang + "_seed" + std::to_string(seed);
            save_checkpoint(config.output_dir / "tuned" / (stem + ".ckpt"), out.tuned.backbone,
                            out.tuned.prompt ? &*out.tuned.prompt : nullptr);
            report.cells.push_back(std::move(out.result));
        }
    }
    write_report(config.output_dir, report, config);
    write_meta(config, "tune", seconds_since(t0), json{{"cells", report.cells.size()}});
}

void cmd_eval(const ExperimentConfig& config) {
    const auto t0 = std::chrono::steady_clock::now();
    if (config.checkpoint.empty()) {
        throw ConfigError("eval needs a checkpoint (--theta or \"checkpoint\" in the config)");
    }
    const LoadedCheckpoint loaded = load_checkpoint(config.checkpoint);
    const Testbed bed(config);
    std::vector<std::string> langs;
    for (const LanguageSpec& l : config.languages) {
        langs.push_back(l.id);
    }
    ExperimentReport report;
    report.config_fingerprint = config.fingerprint();
    report.theta_fingerprint = loaded.backbone.content_fingerprint();
    report.targets = config.resolved_targets();
    CellResult cell;
    cell.key = CellKey{loaded.prompt ? Method::Sp : Method::Ft, Setting::ZeroShot, loaded.prompt ? 0.0 : 1.0, 0, 0,
                       config.source_language};
    cell.scores = score_languages(config, bed, loaded.backbone, loaded.prompt ? &*loaded.prompt : nullptr, langs);
    report.cells.push_back(cell);
    write_report(config.output_dir, report, config);
    write_meta(config, "eval", seconds_since(t0));
}

ExperimentReport cmd_sweep(const ExperimentConfig& config) {
    const auto t0 = std::chrono::steady_clock::now();
    if (config.mu_grid.empty() || config.shot_grid.empty()) {
        throw ConfigError("sweep: mu_grid and shot_grid must be non-empty");
    }
    const Checkpoint theta = load_theta(config);
    const std::string theta_fp = theta.content_fingerprint();
    const Testbed bed(config);
    const fs::path cache = config.output_dir / "cells";

    ExperimentReport report;
    report.config_fingerprint = config.fingerprint();
    report.theta_fingerprint = theta_fp;
    report.targets = config.resolved_targets();

    std::optional<Selection> selection;
    std::map<double, SparsityMask> masks;
    auto mask_for = [&](double mu) -> const SparsityMask& {
        if (!selection) {
            selection = run_selection(config, theta);
        }
        auto it = masks.find(mu);
        if (it == masks.end()) {
            it = masks.emplace(mu, select_mask(selection->deltas, mu, config.selection.scope)).first;
        }
        return it->second;
    };

    std::size_t reused = 0;
    std::size_t computed = 0;
    for (std::size_t shots : config.shot_grid) {
        for (double mu : config.mu_grid) {
            for (std::uint64_t seed : config.seeds) {
                for (const std::string& lang : train_languages(config)) {
                    const CellKey key{Method::Ltp, config.setting, mu, shots, seed, lang};
                    const std::string fp = cell_fingerprint(config, theta_fp, key);
                    const fs::path file = cache / (fp + ".json");
                    if (fs::exists(file)) {
                        const json stored = json::parse(read_text_file(file), nullptr, false);
                        if (!stored.is_discarded() && stored.value("fingerprint", "") == fp) {
                            CellResult cell = cell_from_json(stored.at("cell"));
                            if (cell.key == key) {
                                report.cells.push_back(std::move(cell));
                                ++reused;
                                continue;
                            }
                        }
                    }
                    CellResult cell = run_cell(config, bed, theta, &mask_for(mu), key).result;
                    write_text_file(file,
                                    json{{"fingerprint", fp}, {"theta_fingerprint", theta_fp}, {"cell", to_json(cell)}}
                                            .dump(2) +
                                        "\n");
                    report.cells.push_back(std::move(cell));
                    ++computed;
                }
            }
        }
    }
    for (double mu : config.mu_grid) {
        const SparsityMask& m = mask_for(mu);
        report.distributions.push_back(distribution_of(m, selection->adaptation.theta_l));
    }
    json dists = json::array();
    for (const MaskDistribution& d : report.distributions) {
        dists.push_back(distribution_json(d));
    }
    write_text_file(config.output_dir / "sweep_masks.json",
                    json{{"theta_fingerprint", theta_fp}, {"distributions", dists}}.dump(2) + "\n");
    write_report(config.output_dir, report, config);
    write_meta(config, "sweep", seconds_since(t0), json{{"cells_computed", computed}, {"cells_reused", reused}});
    return report;
}

void cmd_report(const ExperimentConfig& config) {
    const fs::path cache = config.output_dir / "cells";
    if (!fs::is_directory(cache)) {
        throw DataError("report: no cell cache under '" + config.output_dir.string() + "'");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(cache)) {
        if (entry.path().extension() == ".json") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    ExperimentReport report;
    report.config_fingerprint = config.fingerprint();
    report.targets = config.resolved_targets();
    for (const fs::path& f : files) {
        json stored;
        try {
            stored = json::parse(read_text_file(f));
        } catch (const json::exception& e) {
            throw FormatError("report: '" + f.string() + "': " + e.what());
        }
        const std::string fp = stored.value("theta_fingerprint", "");
        if (report.theta_fingerprint.empty()) {
            report.theta_fingerprint = fp;
        } else if (fp != report.theta_fingerprint) {
            throw FingerprintMismatch("report: cells come from different checkpoints (" + report.theta_fingerprint +
                                      ", " + fp + ")");
        }
        if (!stored.contains("cell")) {
            throw FormatError("report: '" + f.string() + "' holds no cell");
        }
        report.cells.push_back(cell_from_json(stored.at("cell")));
    }
    if (fs::exists(config.output_dir / "sweep_masks.json")) {
        try {
            const json stored = json::parse(read_text_file(config.output_dir / "sweep_masks.json"));
            if (stored.at("theta_fingerprint").get<std::string>() == report.theta_fingerprint) {
                for (const json& d : stored.at("distributions")) {
                    report.distributions.push_back(distribution_from_json(d));
                }
            }
        } catch (const json::exception& e) {
            throw FormatError("report: mask distributions: " + std::string(e.what()));
        }
    }
    write_report(config.output_dir, report, config);
}

}  // namespace ltp
