// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance [--cache DIR] [--only 1,4,8]
//
// The pretrained toy backbone is cached in DIR keyed by its config fingerprint.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradient_cases.hpp"
#include "ltp/corpus.hpp"
#include "ltp/error.hpp"
#include "ltp/experiment.hpp"
#include "ltp/gradcheck.hpp"
#include "ltp/selection.hpp"
#include "ltp/serialize.hpp"
#include "ltp/trainer.hpp"
#include "oracles.hpp"
#include "testing.hpp"

using namespace ltp;
using namespace ltp::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path g_cache = fs::temp_directory_path() / "ltp_acceptance";

// ---------------------------------------------------------------------------
// Shared toy fixtures

const ExperimentConfig& toy() {
    static const ExperimentConfig c = toy_experiment_config();
    return c;
}

const Testbed& toy_bed() {
    static const Testbed bed(toy());
    return bed;
}

double g_pretrain_seconds = 0.0;

const Checkpoint& toy_theta() {
    static const Checkpoint theta = [] {
        const fs::path file = g_cache / ("toy_theta_" + toy().fingerprint() + ".ckpt");
        if (fs::exists(file)) {
            try {
                return load_checkpoint(file).backbone;
            } catch (const Error&) {
                // stale or damaged cache entry: rebuild it
            }
        }
        const auto t0 = std::chrono::steady_clock::now();
        Checkpoint th = run_pretrain(toy());
        g_pretrain_seconds = seconds_since(t0);
        save_checkpoint(file, th);
        return th;
    }();
    return theta;
}

const Selection& toy_selection() {
    static const Selection s = run_selection(toy(), toy_theta());
    return s;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
    double worst = 0.0;
    std::string worst_name;
    auto note = [&](double err, const std::string& name) {
        if (!(err <= worst)) {  // NaN counts as worst
            worst = err;
            worst_name = name;
        }
    };
    std::size_t primitives = 0;
    for (const PrimitiveCase& pc : primitive_cases()) {
        for (std::size_t i = 0; i < pc.inputs.size(); ++i) {
            note(check_primitive(pc, i), pc.name);
        }
        ++primitives;
    }

    GradCheckOptions opt;
    opt.max_coords_per_tensor = 16;
    for (bool tied : {true, false}) {
        const ModelConfig c = tiny_config(tied);
        const Checkpoint ck = scrambled_model(c, 11);
        const VocabLayout layout = VocabLayout::for_vocab(c.vocab_size);
        MlmStream stream = mlm_batches(generate_base_corpus(layout, 3, 20), 2, 5, c.vocab_size);
        const MlmBatch batch = stream.next();
        note(finite_difference_check(
                 [&](Tape&, const std::map<std::string, Var>& vars) { return mlm_batch_loss(rebind(c, vars), batch); },
                 ck.params, opt),
             tied ? "mlm loss (tied)" : "mlm loss (untied)");
    }

    const ModelConfig c = tiny_config();
    const Checkpoint ck = scrambled_model(c, 12);
    const SoftPrompt sp = SoftPrompt::create(3, c.hidden_dim, 4);
    const Verbalizer verb = default_verbalizer(VocabLayout::for_vocab(c.vocab_size));
    const std::vector<TemplatedInput> inputs = {
        build_template(TokenSeq{10, 11, 12}, TokenSeq{10, 12}, 3, TemplateLayout::TemplateOrder, c.max_seq_len),
        build_template(TokenSeq{13, 14}, TokenSeq{15}, 3, TemplateLayout::TemplateOrder, c.max_seq_len),
    };
    const std::vector<Label> labels = {Label::Entailment, Label::Neutral};
    std::map<std::string, Tensor> point = ck.params;
    point.insert(sp.params.begin(), sp.params.end());
    note(finite_difference_check(
             [&](Tape&, const std::map<std::string, Var>& vars) {
                 return prompt_batch_loss(rebind(c, vars), prompt_embeddings(rebind_prompt(sp, vars)), inputs, labels,
                                          verb);
             },
             point, opt),
         "prompt loss");

    SoftPrompt enc = SoftPrompt::create(4, 8, 21);
    for (auto& [name, t] : enc.params) {
        t = random_tensor(t.shape(), name.size() * 7 + 1, -0.6, 0.6);
    }
    note(finite_difference_check(
             [&](Tape&, const std::map<std::string, Var>& vars) {
                 Var e = prompt_embeddings(rebind_prompt(enc, vars));
                 return sum(mul(e, e));
             },
             enc.params),
         "prompt encoder norm");

    return {worst < 1e-4, std::to_string(primitives) + " primitive cases + 4 composed losses, max rel err " +
                              fmt("%.2e", worst) + " (" + worst_name + ")"};
}

std::vector<Scope> all_scopes() {
    return {Scope::global(), Scope::per_layer(), Scope::of_segment(Segment::Lower),
            Scope::of_segment(Segment::Middle), Scope::of_segment(Segment::Higher)};
}

Outcome selection_oracle() {
    const double mus[] = {0.0, 0.2, 0.5, 0.75, 1.0};
    // 7 continuous maps, 2 with three delta levels, 2 where every delta ties.
    const std::vector<int> levels = {0, 0, 0, 0, 0, 0, 0, 3, 3, 1, 1};
    std::size_t comparisons = 0;
    std::size_t mismatches = 0;
    for (std::size_t m = 0; m < levels.size(); ++m) {
        const DeltaMap dm = random_delta_map(1000 + m, 10000, 6, levels[m]);
        for (const Scope& scope : all_scopes()) {
            for (double mu : mus) {
                const SparsityMask got = select_mask(dm, mu, scope);
                const EntrySet want = brute_force_select(dm, mu, scope);
                ++comparisons;
                if (mask_entries(got) != want || got.selected != want.size()) {
                    ++mismatches;
                }
            }
        }
    }
    return {mismatches == 0, std::to_string(levels.size()) + " maps x 10^4 entries, " + std::to_string(comparisons) +
                                 " (map, scope, mu) comparisons, " + std::to_string(mismatches) + " mismatches"};
}

// floor(pct / 100 * n) in integers.
std::size_t exact_floor(std::size_t pct, std::size_t n) { return pct * n / 100; }

Outcome cardinality_and_nesting() {
    const std::size_t grid[] = {0, 5, 20, 50, 75, 95, 100};
    std::vector<DeltaMap> maps;
    for (std::uint64_t s = 0; s < 3; ++s) {
        maps.push_back(random_delta_map(77 + s, 9973, 6, s == 2 ? 4 : 0));
    }
    const Checkpoint theta = build_model(toy().model, 3);
    Checkpoint moved = theta;
    Rng rng(5);
    for (auto& [name, t] : moved.params) {
        for (double& x : t.values()) {
            x += rng.normal(0.0, 1e-3);
        }
    }
    std::size_t checks = 0;
    std::size_t failures = 0;
    for (const Scope& scope : all_scopes()) {
        std::vector<DeltaMap> scoped = maps;
        scoped.push_back(compute_deltas(theta, moved, Strategy::Vanilla, scope));
        for (const DeltaMap& dm : scoped) {
            // eligible entries per transformer layer, for the per-layer rule
            std::map<int, std::size_t> per_layer;
            std::size_t eligible = 0;
            const auto [lo, hi] = oracle_layers(scope, dm.num_layers);
            for (const auto& [name, t] : dm.deltas) {
                const int layer = dm.params.at(name).tag.layer;
                if (layer >= lo && layer <= hi) {
                    per_layer[layer] += t.size();
                    eligible += t.size();
                }
            }
            std::vector<EntrySet> sets;
            for (std::size_t pct : grid) {
                const SparsityMask mask = select_mask(dm, static_cast<double>(pct) / 100.0, scope);
                std::size_t want = 0;
                if (scope.kind == Scope::Kind::PerLayer) {
                    for (const auto& [layer, n] : per_layer) {
                        want += exact_floor(pct, n);
                    }
                } else {
                    want = exact_floor(pct, eligible);
                }
                const EntrySet entries = mask_entries(mask);
                ++checks;
                failures += (mask.selected != want || entries.size() != want || mask.eligible != eligible);
                sets.push_back(entries);
            }
            for (std::size_t i = 0; i < sets.size(); ++i) {
                for (std::size_t j = i + 1; j < sets.size(); ++j) {
                    ++checks;
                    failures += !std::includes(sets[j].begin(), sets[j].end(), sets[i].begin(), sets[i].end());
                }
            }
        }
    }
    return {failures == 0, std::to_string(checks) + " cardinality/subset checks over 5 scopes, " +
                               std::to_string(failures) + " failures"};
}

std::size_t count_moved(const Checkpoint& before, const Checkpoint& after, const SparsityMask* mask,
                        std::size_t* frozen_moved) {
    std::size_t moved = 0;
    for (const auto& [name, t] : before.params) {
        const Tensor& u = after.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const bool same = std::memcmp(&t.values()[i], &u.values()[i], sizeof(double)) == 0;
            if (!same) {
                ++moved;
            }
            const bool gated_in = mask != nullptr && mask->entries.at(name).bits[i] != 0;
            if (!same && !gated_in) {
                ++*frozen_moved;
            }
        }
    }
    return moved;
}

Outcome frozen_bit_equality() {
    const Checkpoint& theta = toy_theta();
    const SparsityMask mask = select_mask(toy_selection().deltas, 0.2, Scope::global());
    const CellKey key{Method::Ltp, Setting::ZeroShot, 0.2, 4, 0, toy().source_language};
    const CellOutput ltp = run_cell(toy(), toy_bed(), theta, &mask, key);

    std::size_t frozen_moved = 0;
    const std::size_t moved = count_moved(theta, ltp.tuned.backbone, &mask, &frozen_moved);

    std::size_t sp_moved = 0;
    const CellOutput sp =
        run_cell(toy(), toy_bed(), theta, nullptr, CellKey{Method::Sp, Setting::ZeroShot, 0.0, 4, 0, "en"});
    count_moved(theta, sp.tuned.backbone, nullptr, &sp_moved);

    const SparsityMask empty = select_mask(toy_selection().deltas, 0.0, Scope::global());
    std::size_t empty_moved = 0;
    const CellOutput ltp0 =
        run_cell(toy(), toy_bed(), theta, &empty, CellKey{Method::Ltp, Setting::ZeroShot, 0.0, 4, 0, "en"});
    count_moved(theta, ltp0.tuned.backbone, nullptr, &empty_moved);

    const bool pass = frozen_moved == 0 && moved > 0 && sp_moved == 0 && empty_moved == 0;
    return {pass, "mu=0.2, 4 shots, " + std::to_string(toy().regime.epochs) + " epochs: " + std::to_string(moved) +
                      " of K=" + std::to_string(mask.selected) + " selected entries moved, " +
                      std::to_string(frozen_moved) + " masked-out entries changed; mu=0 changed " +
                      std::to_string(sp_moved) + " (sp) and " + std::to_string(empty_moved) + " (ltp, empty mask)"};
}

Outcome degenerate_equivalence() {
    const Checkpoint& theta = toy_theta();
    const Testbed& bed = toy_bed();
    const Language& en = bed.language("en");
    const std::uint64_t sample = Rng::mix(toy().data_seed, 11);
    const auto train = make_nli_set(en, bed.layout, 4, Split::Train, sample);
    const auto dev = make_nli_set(en, bed.layout, 4, Split::Dev, sample);
    const SoftPrompt prompt = SoftPrompt::create(toy().prompt_length, toy().model.hidden_dim, 31);
    const SparsityMask everything = full_mask(theta, true);

    auto trajectory = [&](RegimeKind kind, const SparsityMask* mask) {
        std::vector<std::string> steps;
        TuneHooks hooks;
        hooks.after_step = [&](std::size_t, const GradientMap&, const Checkpoint& backbone, const SoftPrompt* p) {
            steps.push_back(backbone.content_fingerprint() + "/" + p->content_fingerprint());
        };
        TrainRegime r = toy().regime;
        r.kind = kind;
        r.seed = 11;
        TuneResult res = prompt_tune(theta, mask, &prompt, train, dev, bed.verbalizer, r, hooks);
        return std::make_pair(std::move(steps), std::move(res));
    };
    const auto [ltp_steps, ltp] = trajectory(RegimeKind::Ltp, &everything);
    const auto [ft_steps, ft] = trajectory(RegimeKind::FullFt, nullptr);
    bool logs_equal = ltp.epochs.size() == ft.epochs.size();
    for (std::size_t i = 0; logs_equal && i < ltp.epochs.size(); ++i) {
        logs_equal = std::memcmp(&ltp.epochs[i].train_loss, &ft.epochs[i].train_loss, sizeof(double)) == 0 &&
                     ltp.epochs[i].dev_accuracy == ft.epochs[i].dev_accuracy;
    }
    const bool pass = ltp_steps == ft_steps && !ltp_steps.empty() && ltp.backbone.bit_equal(ft.backbone) &&
                      ltp.prompt->bit_equal(*ft.prompt) && logs_equal;
    return {pass, std::to_string(ltp_steps.size()) + " optimizer steps compared by parameter fingerprint; final state " +
                      (ltp.backbone.bit_equal(ft.backbone) ? "bit-identical" : "differs")};
}

std::size_t frozen_entries(const Checkpoint& ck, Strategy s) {
    std::size_t n = 0;
    for (const auto& [name, t] : ck.params) {
        n += frozen_by_strategy(s, ck.tags.at(name)) ? t.size() : 0;
    }
    return n;
}

Outcome l1_delta_behaviour() {
    const Checkpoint& theta = toy_theta();
    const Corpus corpus =
        toy_bed().language(toy().source_language).apply(generate_base_corpus(toy_bed().layout, 4242, 1500, 0.5));
    SelectionConfig sc = toy().selection;

    sc.l1_coefficient = 1e6;
    const AdaptResult strong = mlm_adapt(theta, corpus, sc);
    double max_delta = 0.0;
    for (const auto& [name, t] : theta.params) {
        const Tensor& u = strong.theta_l.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            max_delta = std::max(max_delta, std::abs(u[i] - t[i]));
        }
    }

    sc.l1_coefficient = 0.1;
    const AdaptResult mild = mlm_adapt(theta, corpus, sc);
    std::size_t nonzero = 0;
    std::size_t unfrozen = 0;
    for (const auto& [name, t] : theta.params) {
        if (frozen_by_strategy(sc.strategy, theta.tags.at(name))) {
            continue;
        }
        const Tensor& u = mild.theta_l.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            ++unfrozen;
            nonzero += u[i] != t[i];
        }
    }
    const double frac = static_cast<double>(nonzero) / static_cast<double>(unfrozen);
    return {max_delta < 1e-3 && frac > 0.5 && strong.steps > 0 && mild.best_step > 0,
            "lambda=1e6: max |delta| " + fmt("%.2e", max_delta) + " after " + std::to_string(strong.steps) +
                " steps; lambda=0.1: " + fmt("%.1f", 100.0 * frac) + "% of unfrozen entries moved (best step " +
                std::to_string(mild.best_step) + ")"};
}

Outcome strategy_distribution() {
    const Checkpoint& theta = toy_theta();
    int holds = 0;
    std::ostringstream detail;
    detail << "embedding share vanilla/decouple_untie per seed:";
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        double share[2];
        int k = 0;
        for (Strategy s : {Strategy::Vanilla, Strategy::DecoupleUntie}) {
            ExperimentConfig c = toy();
            c.selection.strategy = s;
            c.selection.seed = seed;
            const Selection sel = run_selection(c, theta);
            const SparsityMask mask = select_mask(sel.deltas, 0.2, Scope::global());
            share[k++] = mask_report(mask, sel.adaptation.theta_l).share_of(0);
        }
        holds += share[1] < share[0];
        detail << " " << fmt("%.3f", share[0]) << "/" << fmt("%.3f", share[1]);
    }
    detail << " (" << holds << "/5 lower)";
    return {holds >= 4, detail.str()};
}

// Zero-shot tuning on the source language, scored on every target language.
struct TransferStudy {
    std::vector<double> sp, ltp20, ltp75, mid20;
    double seconds = 0.0;
};

double target_mean(const CellResult& r) {
    const std::vector<std::string> targets = toy().resolved_targets();
    double s = 0.0;
    std::size_t n = 0;
    for (const LanguageScore& l : r.scores) {
        if (std::find(targets.begin(), targets.end(), l.language) != targets.end()) {
            s += l.accuracy.value();
            ++n;
        }
    }
    return s / static_cast<double>(n);
}

const TransferStudy& transfer_study() {
    static const TransferStudy study = [] {
        TransferStudy st;
        const Checkpoint& theta = toy_theta();
        const auto t0 = std::chrono::steady_clock::now();
        const Selection& sel = toy_selection();
        const DeltaMap middle = compute_deltas(theta, sel.adaptation.theta_l, toy().selection.strategy,
                                               Scope::of_segment(Segment::Middle));
        const SparsityMask m20 = select_mask(sel.deltas, 0.2, Scope::global());
        const SparsityMask m75 = select_mask(sel.deltas, 0.75, Scope::global());
        const SparsityMask mid = select_mask(middle, 0.2, Scope::of_segment(Segment::Middle));
        const std::string src = toy().source_language;
        for (std::uint64_t seed : toy().seeds) {
            auto run = [&](Method m, double mu, const SparsityMask* mask) {
                return target_mean(
                    run_cell(toy(), toy_bed(), theta, mask, CellKey{m, Setting::ZeroShot, mu, toy().shots, seed, src})
                        .result);
            };
            st.sp.push_back(run(Method::Sp, 0.0, nullptr));
            st.ltp20.push_back(run(Method::Ltp, 0.2, &m20));
            st.ltp75.push_back(run(Method::Ltp, 0.75, &m75));
            st.mid20.push_back(run(Method::Ltp, 0.2, &mid));
            std::printf("    seed %llu: sp %.3f  ltp20 %.3f  ltp75 %.3f  ltp20-middle %.3f\n",
                        static_cast<unsigned long long>(seed), st.sp.back(), st.ltp20.back(), st.ltp75.back(),
                        st.mid20.back());
            std::fflush(stdout);
        }
        st.seconds = seconds_since(t0);
        return st;
    }();
    return study;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s / static_cast<double>(v.size());
}

Outcome transfer_direction() {
    const TransferStudy& st = transfer_study();
    const double sp = mean(st.sp);
    const double l20 = mean(st.ltp20);
    const double l75 = mean(st.ltp75);
    const bool pass = l75 >= l20 && l20 >= sp && (l20 - sp) >= 0.02;
    return {pass, "mean target accuracy over " + std::to_string(st.sp.size()) + " seeds: ltp75 " +
                      fmt("%.4f", l75) + ", ltp20 " + fmt("%.4f", l20) + ", sp " + fmt("%.4f", sp) +
                      "; ltp20 - sp = " + fmt("%+.2f", 100.0 * (l20 - sp)) + " points; tuning " +
                      fmt("%.0f", st.seconds) + " s, pretraining " +
                      (g_pretrain_seconds > 0 ? fmt("%.0f s", g_pretrain_seconds) : std::string("cached"))};
}

Outcome segment_sanity() {
    const Checkpoint& theta = toy_theta();
    const Selection& sel = toy_selection();
    std::size_t outside = 0;
    std::size_t selected = 0;
    for (Segment seg : {Segment::Lower, Segment::Middle, Segment::Higher}) {
        const Scope scope = Scope::of_segment(seg);
        const DeltaMap dm = compute_deltas(theta, sel.adaptation.theta_l, toy().selection.strategy, scope);
        const auto [lo, hi] = segment_layers(toy().model.num_layers, seg);
        for (double mu : {0.2, 0.75, 1.0}) {
            const SparsityMask m = select_mask(dm, mu, scope);
            for (const auto& [name, e] : m.entries) {
                const std::size_t n = e.count();
                selected += n;
                if (n > 0 && (e.tag.layer < lo || e.tag.layer > hi)) {
                    outside += n;
                }
            }
        }
    }
    const TransferStudy& st = transfer_study();
    const double mid = mean(st.mid20);
    const double glob = mean(st.ltp20);
    const bool pass = outside == 0 && selected > 0 && mid >= glob - 0.02;
    return {pass, std::to_string(outside) + " of " + std::to_string(selected) +
                      " segment-selected entries outside their layers; middle-segment ltp20 " + fmt("%.4f", mid) +
                      " vs global ltp20 " + fmt("%.4f", glob) + " (" + fmt("%+.2f", 100.0 * (mid - glob)) +
                      " points)"};
}

ExperimentConfig pipeline_config(const fs::path& out) {
    ExperimentConfig c = toy();
    c.model.num_layers = 3;
    c.model.hidden_dim = 16;
    c.model.num_heads = 2;
    c.model.ffn_dim = 32;
    c.pretrain.steps = 40;
    c.corpus.sentences_per_language = 200;
    c.corpus.selection_sentences = 200;
    c.selection.max_steps = 10;
    c.selection.eval_every = 5;
    c.regime.epochs = 5;
    c.shots = 2;
    c.dev_shots = 2;
    c.seeds = {0, 1};
    c.output_dir = out;
    return c;
}

Outcome determinism_and_formats() {
    const fs::path root = g_cache / "pipeline";
    fs::remove_all(root);
    std::vector<std::string> reports;
    std::vector<std::string> masks;
    for (const char* run : {"a", "b"}) {
        ExperimentConfig c = pipeline_config(root / run);
        c.checkpoint = cmd_pretrain(c);
        c = apply_options(c, CommandOptions{});
        cmd_select(c, CommandOptions{});
        c.mask = c.output_dir / "mask.ltpmask";
        CommandOptions o;
        o.method = Method::Ltp;
        cmd_tune(c, o);
        reports.push_back(read_text_file(c.output_dir / "report.json"));
        masks.push_back(read_text_file(c.mask));
    }
    const bool same_report = reports[0] == reports[1];

    // Round trips: load, compare bit for bit, save again, compare bytes.
    const fs::path ckpt = root / "a" / "tuned" / "ltp_en_seed0.ckpt";
    const LoadedCheckpoint loaded = load_checkpoint(ckpt);
    save_checkpoint(root / "again.ckpt", loaded.backbone, loaded.prompt ? &*loaded.prompt : nullptr);
    const LoadedCheckpoint reloaded = load_checkpoint(root / "again.ckpt");
    const bool ckpt_ok = read_text_file(ckpt) == read_text_file(root / "again.ckpt") &&
                         reloaded.backbone.bit_equal(loaded.backbone) && reloaded.prompt &&
                         reloaded.prompt->bit_equal(*loaded.prompt);

    const SparsityMask mask = load_mask(root / "a" / "mask.ltpmask");
    save_mask(root / "again.ltpmask", mask);
    const bool mask_ok = load_mask(root / "again.ltpmask") == mask &&
                         read_text_file(root / "again.ltpmask") == masks[0] && masks[0] == masks[1];

    return {same_report && ckpt_ok && mask_ok,
            std::string("report.json ") + (same_report ? "byte-identical" : "DIFFERS") + " across two pipeline runs (" +
                std::to_string(reports[0].size()) + " bytes); checkpoint round trip " + (ckpt_ok ? "exact" : "BROKEN") +
                "; mask round trip " + (mask_ok ? "exact" : "BROKEN")};
}

struct Criterion {
    int id;
    const char* title;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--cache" && i + 1 < argc) {
            g_cache = argv[++i];
        } else if (arg == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            for (std::string tok; std::getline(ss, tok, ',');) {
                only.insert(std::stoi(tok));
            }
        } else {
            std::fprintf(stderr, "usage: %s [--cache DIR] [--only 1,2,...]\n", argv[0]);
            return 2;
        }
    }
    fs::create_directories(g_cache);

    const std::vector<Criterion> criteria = {
        {1, "gradient correctness", gradient_correctness},
        {2, "selection oracle", selection_oracle},
        {3, "mask cardinality and nesting", cardinality_and_nesting},
        {4, "frozen-parameter bit-equality", frozen_bit_equality},
        {5, "degenerate equivalence", degenerate_equivalence},
        {6, "L1 delta behaviour", l1_delta_behaviour},
        {7, "strategy distribution direction", strategy_distribution},
        {8, "directional transfer", transfer_direction},
        {9, "layer-segment sanity", segment_sanity},
        {10, "determinism and formats", determinism_and_formats},
    };

    int failed = 0;
    for (const Criterion& c : criteria) {
        if (!only.empty() && only.count(c.id) == 0) {
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %2d %-32s %s  %s [%.1f s]\n", c.id, c.title, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                    seconds_since(t0));
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
