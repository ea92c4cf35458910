#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ltp/corpus.hpp"
#include "ltp/mask.hpp"
#include "ltp/model.hpp"
#include "ltp/selection.hpp"
#include "ltp/trainer.hpp"

namespace ltp {

enum class Method { Ft, Sp, Ltp };
enum class Setting { ZeroShot, InLanguage };

std::string_view method_name(Method m);  // "ft", "sp", "ltp"
Method parse_method(std::string_view name);  // throws ConfigError
std::string_view setting_name(Setting s);  // "zeroshot", "inlanguage"
Setting parse_setting(std::string_view name);  // throws ConfigError

struct CorpusConfig {
    std::size_t sentences_per_language = 3000;
    std::size_t selection_sentences = 3000;
    double relation_share = 0.5;
    double answer_focus_rate = 1.0;  // 0 turns the answer-focused recipe off
    std::uint64_t seed = 10;
};

struct ExperimentConfig {
    ModelConfig model;
    PretrainConfig pretrain;
    CorpusConfig corpus;
    SelectionConfig selection;
    TrainRegime regime;  // kind is chosen per method
    std::size_t prompt_length = 4;
    std::vector<LanguageSpec> languages;
    std::string source_language;
    std::vector<std::string> target_languages;  // averaged in reports; empty means every non-source language
    Setting setting = Setting::ZeroShot;
    std::size_t shots = 16;
    std::size_t dev_shots = 16;
    std::vector<std::uint64_t> seeds;
    std::vector<double> mu_grid;
    std::vector<std::size_t> shot_grid;
    std::uint64_t data_seed = 7;
    std::filesystem::path checkpoint;  // optional inputs; must exist when set
    std::filesystem::path mask;
    std::filesystem::path output_dir = "out";

    void validate() const;  // throws ConfigError
    // Everything that can change a result; output_dir and the input paths excluded.
    std::string fingerprint() const;
    std::vector<std::string> resolved_targets() const;
};

// 6-layer model over four seen and two unseen languages.
ExperimentConfig toy_experiment_config();

// Departures from the reference hyperparameters, emitted with every config and report.
std::vector<std::string> config_deviations();

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);  // throws ConfigError
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// The synthetic testbed the config describes.
struct Testbed {
    VocabLayout layout;
    std::vector<Language> languages;
    Verbalizer verbalizer;

    explicit Testbed(const ExperimentConfig& config);
    const Language& language(std::string_view id) const;  // throws ConfigError
};

Checkpoint run_pretrain(const ExperimentConfig& config);

struct Selection {
    AdaptResult adaptation;
    DeltaMap deltas;
};

// MLM adaptation on the source language followed by delta computation.
Selection run_selection(const ExperimentConfig& config, const Checkpoint& theta);

struct CellKey {
    Method method = Method::Ltp;
    Setting setting = Setting::ZeroShot;
    double mu = 0.0;  // 0 for sp, 1 for ft
    std::size_t shots = 0;
    std::uint64_t seed = 0;
    std::string train_language;

    friend bool operator==(const CellKey&, const CellKey&) = default;
};

struct LanguageScore {
    std::string language;
    Accuracy accuracy;
};

struct CellResult {
    CellKey key;
    std::vector<LanguageScore> scores;
    std::size_t best_epoch = 0;
    double best_dev_accuracy = 0.0;
    std::size_t selected = 0;  // K of the mask used, 0 without one
};

struct CellOutput {
    CellResult result;
    TuneResult tuned;
};

// Tunes theta for one cell and scores it on the test sets: every language in the
// zero-shot setting, the training language otherwise. ltp requires `mask`; the other
// methods ignore it.
CellOutput run_cell(const ExperimentConfig& config, const Testbed& testbed, const Checkpoint& theta,
                    const SparsityMask* mask, const CellKey& key);

// Test accuracy of an already tuned model on the given languages.
std::vector<LanguageScore> score_languages(const ExperimentConfig& config, const Testbed& testbed,
                                           const Checkpoint& backbone, const SoftPrompt* prompt,
                                           const std::vector<std::string>& languages);

nlohmann::json to_json(const CellResult& cell);
CellResult cell_from_json(const nlohmann::json& j);  // throws FormatError

struct MaskDistribution {
    std::string strategy;
    std::string scope;
    double mu = 0.0;
    MaskReport report;
};

struct ExperimentReport {
    std::string config_fingerprint;
    std::string theta_fingerprint;
    std::vector<std::string> targets;
    std::vector<CellResult> cells;
    std::vector<MaskDistribution> distributions;
};

// Mean over the target languages and seeds of each (setting, method, mu, shots) group,
// plus one mean per language.
nlohmann::json aggregate(const ExperimentReport& report);
double mean_target_accuracy(const ExperimentReport& report, Method method, double mu);

nlohmann::json to_json(const ExperimentReport& report, const ExperimentConfig& config);
std::string report_table_csv(const ExperimentReport& report);
std::string mask_distribution_csv(const std::vector<MaskDistribution>& distributions);

// Writes report.json, table.csv and mask_dist.csv under `dir`.
void write_report(const std::filesystem::path& dir, const ExperimentReport& report, const ExperimentConfig& config);

// Pipeline commands behind the command-line tool. Each writes its artefacts under
// config.output_dir plus a run_meta.json with timings, which reports leave out so they
// stay byte-stable.
struct CommandOptions {
    std::optional<std::uint64_t> seed;  // replaces config.seeds with this one seed
    std::optional<double> mu;
    std::optional<std::size_t> shots;
    std::optional<Method> method;
    std::optional<Setting> setting;
    std::optional<Strategy> strategy;
    bool compare_strategies = false;
};

ExperimentConfig apply_options(ExperimentConfig config, const CommandOptions& options);

std::filesystem::path cmd_pretrain(const ExperimentConfig& config);
void cmd_select(const ExperimentConfig& config, const CommandOptions& options);
void cmd_tune(const ExperimentConfig& config, const CommandOptions& options);
void cmd_eval(const ExperimentConfig& config);
ExperimentReport cmd_sweep(const ExperimentConfig& config);
void cmd_report(const ExperimentConfig& config);

// Loads a mask and refuses it unless it was selected from `theta`.
SparsityMask load_mask_for(const std::filesystem::path& path, const Checkpoint& theta);

}  // namespace ltp
