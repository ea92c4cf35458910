#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "ltp/corpus.hpp"
#include "ltp/error.hpp"
#include "ltp/mask.hpp"
#include "ltp/selection.hpp"
#include "ltp/serialize.hpp"
#include "oracles.hpp"
#include "testing.hpp"

using namespace ltp;
using ltp::testing::brute_force_select;
using ltp::testing::EntrySet;
using ltp::testing::mask_entries;
using ltp::testing::random_delta_map;
using ltp::testing::tiny_config;

namespace {

const std::vector<Scope>& all_scopes() {
    static const std::vector<Scope> s = {Scope::global(), Scope::per_layer(), Scope::of_segment(Segment::Lower),
                                         Scope::of_segment(Segment::Middle), Scope::of_segment(Segment::Higher)};
    return s;
}

DeltaMap flat_map(std::vector<std::pair<std::string, double>> values) {
    std::map<std::string, Tensor> deltas;
    std::map<std::string, ParamTag> tags;
    for (const auto& [name, v] : values) {
        deltas.emplace(name, Tensor::row({v}));
        tags.emplace(name, ParamTag{1, ParamGroup::Ffn});
    }
    return DeltaMap::from_tensors(std::move(deltas), tags, 3);
}

}  // namespace

TEST(ActiveCountTest, FloorWithDecimalRatios) {
    EXPECT_EQ(active_count(0.0, 100), 0u);
    EXPECT_EQ(active_count(1.0, 100), 100u);
    EXPECT_EQ(active_count(0.2, 10), 2u);
    EXPECT_EQ(active_count(0.29, 100), 29u);
    EXPECT_EQ(active_count(0.75, 7), 5u);
    EXPECT_THROW(active_count(1.5, 3), DomainError);
}

TEST(SelectMaskTest, TopByMagnitude) {
    const DeltaMap dm = flat_map({{"a", 0.5}, {"b", 0.1}, {"c", 0.3}, {"d", 0.2}});
    const SparsityMask m = select_mask(dm, 0.5, Scope::global());
    EXPECT_EQ(mask_entries(m), (EntrySet{{"a", 0}, {"c", 0}}));
    EXPECT_EQ(m.selected, 2u);
    EXPECT_EQ(m.eligible, 4u);
}

TEST(SelectMaskTest, Boundaries) {
    const DeltaMap dm = flat_map({{"a", 0.5}, {"b", 0.1}, {"c", 0.3}, {"d", 0.2}});
    EXPECT_EQ(select_mask(dm, 1.0, Scope::global()).selected, 4u);
    EXPECT_TRUE(mask_entries(select_mask(dm, 0.0, Scope::global())).empty());
    EXPECT_THROW(select_mask(dm, -0.1, Scope::global()), DomainError);
}

TEST(SelectMaskTest, TiesBreakByNameThenIndex) {
    const DeltaMap dm = flat_map({{"d", 1.0}, {"b", 1.0}, {"a", 1.0}, {"c", 1.0}});
    EXPECT_EQ(mask_entries(select_mask(dm, 0.5, Scope::global())), (EntrySet{{"a", 0}, {"b", 0}}));

    std::map<std::string, Tensor> deltas;
    deltas.emplace("w", Tensor::row({0.0, 0.0, 0.0, 0.0}));
    const DeltaMap z = DeltaMap::from_tensors(deltas, {{"w", ParamTag{2, ParamGroup::Ffn}}}, 3);
    EXPECT_EQ(mask_entries(select_mask(z, 0.5, Scope::global())), (EntrySet{{"w", 0}, {"w", 1}}));
}

TEST(SelectMaskTest, RejectsNegativeOrNanDeltas) {
    EXPECT_THROW(select_mask(flat_map({{"a", -1.0}}), 0.5, Scope::global()), DomainError);
    EXPECT_THROW(select_mask(flat_map({{"a", NAN}}), 0.5, Scope::global()), DomainError);
}

TEST(SelectMaskTest, MatchesFullSortOracle) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        for (int levels : {0, 3, 1}) {
            const DeltaMap dm = random_delta_map(seed, 3000, 6, levels);
            for (const Scope& scope : all_scopes()) {
                for (double mu : {0.0, 0.05, 0.2, 0.5, 0.75, 0.95, 1.0}) {
                    EXPECT_EQ(mask_entries(select_mask(dm, mu, scope)), brute_force_select(dm, mu, scope))
                        << "seed " << seed << " levels " << levels << " " << scope_name(scope) << " mu " << mu;
                }
            }
        }
    }
}

TEST(SelectMaskTest, CardinalityIsFloorOfRatio) {
    const DeltaMap dm = random_delta_map(9, 2001, 6);
    for (double mu : {0.05, 0.2, 0.5, 0.75, 0.95}) {
        for (const Scope& scope : {Scope::global(), Scope::of_segment(Segment::Middle)}) {
            const SparsityMask m = select_mask(dm, mu, scope);
            EXPECT_EQ(m.selected, static_cast<std::size_t>(std::floor(mu * static_cast<double>(m.eligible) + 1e-9)));
            EXPECT_EQ(mask_entries(m).size(), m.selected);
        }
    }
}

TEST(SelectMaskTest, NestedAcrossRatios) {
    const DeltaMap dm = random_delta_map(10, 2000, 6, 4);
    const std::vector<double> grid = {0.0, 0.05, 0.2, 0.5, 0.75, 0.95, 1.0};
    for (const Scope& scope : all_scopes()) {
        for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
            EXPECT_TRUE(select_mask(dm, grid[i], scope).is_subset_of(select_mask(dm, grid[i + 1], scope)))
                << scope_name(scope) << " " << grid[i];
        }
    }
}

TEST(SelectMaskTest, InvariantToPositiveScaling) {
    DeltaMap dm = random_delta_map(11, 1500, 6);
    const EntrySet before = mask_entries(select_mask(dm, 0.3, Scope::global()));
    for (auto& [name, t] : dm.deltas) {
        for (double& v : t.values()) {
            v *= 8.0;
        }
    }
    EXPECT_EQ(mask_entries(select_mask(dm, 0.3, Scope::global())), before);
}

TEST(ScopeTest, SegmentsPartitionLayers) {
    EXPECT_EQ(segment_layers(6, Segment::Lower), (std::pair<int, int>{1, 2}));
    EXPECT_EQ(segment_layers(6, Segment::Middle), (std::pair<int, int>{3, 4}));
    EXPECT_EQ(segment_layers(6, Segment::Higher), (std::pair<int, int>{5, 6}));
    EXPECT_EQ(segment_layers(7, Segment::Higher), (std::pair<int, int>{7, 7}));
    EXPECT_THROW(segment_layers(4, Segment::Higher), ConfigError);
    for (std::size_t d = 3; d <= 12; ++d) {
        if (d == 4) {
            continue;  // ceil(4/3) = 2 leaves the top segment empty
        }
        int next = 1;
        for (Segment s : {Segment::Lower, Segment::Middle, Segment::Higher}) {
            const auto [a, b] = segment_layers(d, s);
            EXPECT_EQ(a, next);
            next = b + 1;
        }
        EXPECT_EQ(next, static_cast<int>(d) + 1);
    }
}

TEST(ScopeTest, Names) {
    for (const Scope& s : all_scopes()) {
        EXPECT_EQ(parse_scope(scope_name(s)), s);
    }
    EXPECT_EQ(parse_scope("middle"), Scope::of_segment(Segment::Middle));
    EXPECT_THROW(parse_scope("segment(top)"), ConfigError);
    for (Strategy s : {Strategy::Vanilla, Strategy::DecoupleUntie, Strategy::FreezeEmbeddings}) {
        EXPECT_EQ(parse_strategy(strategy_name(s)), s);
    }
    EXPECT_THROW(parse_strategy("freeze_all"), ConfigError);
}

TEST(ComputeDeltasTest, Arithmetic) {
    Checkpoint a = build_model(tiny_config(), 1);
    Checkpoint b = a;
    Tensor& w = a.at(param_names::kHeadBias);
    Tensor& wl = b.at(param_names::kHeadBias);
    w[0] = 1.0;
    w[1] = 2.0;
    wl[0] = 1.5;
    wl[1] = 1.0;
    const DeltaMap dm = compute_deltas(a, b, Strategy::Vanilla, Scope::global());
    const Tensor& d = dm.deltas.at(std::string(param_names::kHeadBias));
    EXPECT_EQ(d[0], 0.5);
    EXPECT_EQ(d[1], 1.0);
    for (const auto& [name, t] : dm.deltas) {
        if (name != param_names::kHeadBias) {
            for (double v : t.values()) {
                EXPECT_EQ(v, 0.0) << name;
            }
        }
    }
}

TEST(ComputeDeltasTest, SegmentKeysComeFromItsLayers) {
    ModelConfig c = tiny_config();
    c.num_layers = 6;
    const Checkpoint ck = build_model(c, 2);
    const DeltaMap dm = compute_deltas(ck, ck, Strategy::Vanilla, Scope::of_segment(Segment::Middle));
    EXPECT_FALSE(dm.deltas.empty());
    for (const auto& [name, t] : dm.deltas) {
        const int layer = ck.tags.at(name).layer;
        EXPECT_TRUE(layer == 3 || layer == 4) << name;
    }
    EXPECT_EQ(dm.params.size(), ck.params.size());
}

TEST(ComputeDeltasTest, StrategiesFreezeTheirGroups) {
    const Checkpoint ck = build_model(tiny_config(), 3);
    const DeltaMap fe = compute_deltas(ck, ck, Strategy::FreezeEmbeddings, Scope::global());
    for (const auto& [name, t] : fe.deltas) {
        EXPECT_NE(ck.tags.at(name).layer, 0) << name;
    }
    const DeltaMap du = compute_deltas(ck, untie_head(ck), Strategy::DecoupleUntie, Scope::global());
    EXPECT_EQ(du.deltas.count(std::string(param_names::kOutputEmbedding)), 0u);
    EXPECT_EQ(du.params.count(std::string(param_names::kOutputEmbedding)), 1u);
    for (const auto& [name, t] : du.deltas) {
        EXPECT_NE(du.params.at(name).tag.group, ParamGroup::LayerNorm) << name;
    }
    EXPECT_THROW(compute_deltas(ck, untie_head(ck), Strategy::Vanilla, Scope::global()), FingerprintMismatch);
}

TEST(MaskReportTest, SharesPerLayer) {
    const Checkpoint ck = build_model(tiny_config(), 4);
    SparsityMask m = full_mask(ck, false);
    auto& emb = m.entries.at(std::string(param_names::kInputEmbedding)).bits;
    auto& l1 = m.entries.at(param_names::layer(1, "attn.q.weight")).bits;
    std::fill(emb.begin(), emb.begin() + 10, 1);
    std::fill(l1.begin(), l1.begin() + 10, 1);
    const MaskReport r = mask_report(m, ck);
    EXPECT_EQ(r.selected, 20u);
    EXPECT_DOUBLE_EQ(r.share_of(0), 0.5);
    EXPECT_DOUBLE_EQ(r.share_of(1), 0.5);
    EXPECT_DOUBLE_EQ(r.share_of(2), 0.0);

    const MaskReport empty = mask_report(full_mask(ck, false), ck);
    EXPECT_EQ(empty.selected, 0u);
    for (const LayerStat& s : empty.layers) {
        EXPECT_EQ(s.selected, 0u);
        EXPECT_EQ(s.share, 0.0);
    }
}

TEST(MaskIoTest, RoundTripIsExact) {
    const DeltaMap dm = random_delta_map(12, 777, 3, 5);
    for (const Scope& scope : {Scope::global(), Scope::per_layer(), Scope::of_segment(Segment::Lower)}) {
        SparsityMask m = select_mask(dm, 0.37, scope);
        m.theta_fingerprint = "00ff";
        const auto dir = ltp::testing::scratch_dir("mask_io");
        save_mask(dir / "m.bin", m);
        const SparsityMask back = load_mask(dir / "m.bin");
        EXPECT_EQ(back, m);
        save_mask(dir / "m2.bin", back);
        EXPECT_EQ(read_text_file(dir / "m.bin"), read_text_file(dir / "m2.bin"));
    }
}

TEST(MaskIoTest, CorruptFilesRejected) {
    const auto dir = ltp::testing::scratch_dir("mask_bad");
    const SparsityMask m = select_mask(random_delta_map(13, 100, 3), 0.5, Scope::global());
    save_mask(dir / "m.bin", m);
    std::string bytes = read_text_file(dir / "m.bin");
    write_text_file(dir / "trunc.bin", bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(load_mask(dir / "trunc.bin"), FormatError);
    bytes[0] = 'X';
    write_text_file(dir / "magic.bin", bytes);
    EXPECT_THROW(load_mask(dir / "magic.bin"), FormatError);
    EXPECT_THROW(load_mask(dir / "missing.bin"), DataError);
}

TEST(MaskTest, MatchesCheckpointLayout) {
    const Checkpoint ck = build_model(tiny_config(), 5);
    const SparsityMask m = full_mask(ck, true);
    EXPECT_NO_THROW(check_mask_matches(m, ck));
    EXPECT_THROW(check_mask_matches(m, untie_head(ck)), FingerprintMismatch);
    EXPECT_EQ(m.selected, ck.total_entries());
}

TEST(MlmAdaptTest, ZeroStepsIsIdentity) {
    const Checkpoint ck = build_model(tiny_config(), 6);
    SelectionConfig sc;
    sc.epochs = 0;
    const AdaptResult r = mlm_adapt(ck, generate_base_corpus(VocabLayout::for_vocab(64), 1, 40), sc);
    EXPECT_EQ(r.steps, 0u);
    EXPECT_TRUE(r.theta_l.bit_equal(ck));
}

TEST(MlmAdaptTest, FreezeEmbeddingsLeavesEmbeddingDeltaZero) {
    const Checkpoint ck = build_model(tiny_config(), 7);
    SelectionConfig sc;
    sc.strategy = Strategy::FreezeEmbeddings;
    sc.epochs = 1;
    sc.batch_size = 8;
    sc.learning_rate = 1e-2;
    sc.eval_every = 2;
    const AdaptResult r = mlm_adapt(ck, generate_base_corpus(VocabLayout::for_vocab(64), 1, 60), sc);
    ASSERT_GT(r.steps, 0u);
    EXPECT_TRUE(r.theta_l.at(param_names::kInputEmbedding).bit_equal(ck.at(param_names::kInputEmbedding)));
    EXPECT_TRUE(r.theta_l.at(param_names::kPosition).bit_equal(ck.at(param_names::kPosition)));
    EXPECT_FALSE(r.theta_l.bit_equal(ck));
}

TEST(MlmAdaptTest, DecoupleUntieUntiesAndFreezesLayerNorms) {
    const Checkpoint ck = build_model(tiny_config(), 8);
    SelectionConfig sc;
    sc.strategy = Strategy::DecoupleUntie;
    sc.epochs = 1;
    sc.batch_size = 8;
    sc.learning_rate = 1e-2;
    sc.eval_every = 2;
    const AdaptResult r = mlm_adapt(ck, generate_base_corpus(VocabLayout::for_vocab(64), 2, 60), sc);
    EXPECT_FALSE(r.theta_l.config.head_tied);
    const Checkpoint start = untie_head(ck);
    for (const auto& [name, t] : r.theta_l.params) {
        const ParamTag& tag = r.theta_l.tags.at(name);
        if (tag.group == ParamGroup::LayerNorm || tag.group == ParamGroup::OutputEmbedding) {
            EXPECT_TRUE(t.bit_equal(start.at(name))) << name;
        }
    }
}

TEST(SelectionConfigTest, Validation) {
    SelectionConfig sc;
    EXPECT_NO_THROW(sc.validate());
    sc.active_ratio = 1.1;
    EXPECT_THROW(sc.validate(), ConfigError);
    sc = {};
    sc.l1_coefficient = -1.0;
    EXPECT_THROW(sc.validate(), ConfigError);
}
