#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include "ltp/error.hpp"
#include "ltp/experiment.hpp"

namespace {

struct Flags {
    std::string config;
    std::string theta;
    std::string mask;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<double> mu;
    std::optional<std::size_t> shots;
    std::string method;
    std::string setting;
    std::string strategy;
    bool compare = false;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "experiment config (JSON); toy defaults when omitted");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--seed", f.seed, "run a single seed instead of the configured list");
    cmd->add_option("--theta", f.theta, "checkpoint file");
}

// For pretrain, --seed picks the initialisation and data order instead of the tuning seeds.
ltp::ExperimentConfig resolve(const Flags& f, ltp::CommandOptions& opts, bool pretraining) {
    ltp::ExperimentConfig c = f.config.empty() ? ltp::toy_experiment_config() : ltp::load_experiment_config(f.config);
    if (!f.out.empty()) {
        c.output_dir = f.out;
    }
    if (!f.theta.empty()) {
        c.checkpoint = f.theta;
    }
    if (!f.mask.empty()) {
        c.mask = f.mask;
    }
    if (pretraining && f.seed) {
        c.pretrain.seed = *f.seed;
    } else {
        opts.seed = f.seed;
    }
    opts.mu = f.mu;
    opts.shots = f.shots;
    if (!f.method.empty()) {
        opts.method = ltp::parse_method(f.method);
    }
    if (!f.setting.empty()) {
        opts.setting = ltp::parse_setting(f.setting);
    }
    if (!f.strategy.empty()) {
        opts.strategy = ltp::parse_strategy(f.strategy);
    }
    opts.compare_strategies = f.compare;
    return ltp::apply_options(std::move(c), opts);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse cross-lingual prompt tuning on a synthetic testbed"};
    app.require_subcommand(1);
    Flags f;

    auto* pretrain = app.add_subcommand("pretrain", "MLM-pretrain the toy encoder; writes theta.ckpt");
    add_common(pretrain, f);

    auto* select = app.add_subcommand("select", "adapt on the source language and select a mask");
    add_common(select, f);
    select->add_option("--mu", f.mu, "active ratio");
    select->add_option("--strategy", f.strategy, "vanilla, decouple_untie or freeze_embeddings");
    select->add_flag("--compare-strategies", f.compare, "also report the other strategies' distributions");

    auto* tune = app.add_subcommand("tune", "tune and evaluate one method");
    add_common(tune, f);
    tune->add_option("--mask", f.mask, "mask file (ltp); selected on the fly when omitted");
    tune->add_option("--mu", f.mu, "active ratio for on-the-fly selection");
    tune->add_option("--shots", f.shots, "training examples per class");
    tune->add_option("--method", f.method, "ft, sp or ltp")->check(CLI::IsMember({"ft", "sp", "ltp"}));
    tune->add_option("--setting", f.setting, "zeroshot or inlanguage")->check(CLI::IsMember({"zeroshot", "inlanguage"}));

    auto* eval = app.add_subcommand("eval", "score a tuned checkpoint on every language");
    add_common(eval, f);

    auto* sweep = app.add_subcommand("sweep", "ltp over the mu and shot grids, resuming cached cells");
    add_common(sweep, f);
    sweep->add_option("--mu", f.mu, "restrict the grid to one active ratio");
    sweep->add_option("--shots", f.shots, "restrict the grid to one shot count");
    sweep->add_option("--setting", f.setting, "zeroshot or inlanguage")->check(CLI::IsMember({"zeroshot", "inlanguage"}));

    auto* report = app.add_subcommand("report", "rebuild report files from the cell cache");
    add_common(report, f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ltp::CommandOptions opts;
        const ltp::ExperimentConfig config = resolve(f, opts, pretrain->parsed());
        if (pretrain->parsed()) {
            std::printf("%s\n", ltp::cmd_pretrain(config).string().c_str());
        } else if (select->parsed()) {
            ltp::cmd_select(config, opts);
        } else if (tune->parsed()) {
            ltp::cmd_tune(config, opts);
        } else if (eval->parsed()) {
            ltp::cmd_eval(config);
        } else if (sweep->parsed()) {
            ltp::cmd_sweep(config);
        } else if (report->parsed()) {
            ltp::cmd_report(config);
        }
    } catch (const ltp::FingerprintMismatch& e) {
        std::fprintf(stderr, "fingerprint mismatch: %s\n", e.what());
        return 4;
    } catch (const ltp::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ltp::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
