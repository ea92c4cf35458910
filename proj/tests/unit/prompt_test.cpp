#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ltp/error.hpp"
#include "ltp/prompt.hpp"
#include "testing.hpp"

using namespace ltp;
namespace tk = ltp::tokens;

TEST(SoftPromptTest, ShapesAndNames) {
    const SoftPrompt sp = SoftPrompt::create(4, 8, 1);
    EXPECT_EQ(sp.params.size(), 11u);
    for (const auto& [name, t] : sp.params) {
        EXPECT_TRUE(is_prompt_param(name)) << name;
    }
    EXPECT_EQ(prompt_embeddings(sp).shape(), (Shape{4, 8}));
    EXPECT_THROW(SoftPrompt::create(0, 8, 1), ConfigError);
    EXPECT_THROW(SoftPrompt::create(4, 7, 1), ConfigError);
}

TEST(SoftPromptTest, SingleSlot) {
    EXPECT_EQ(prompt_embeddings(SoftPrompt::create(1, 8, 1)).shape(), (Shape{1, 8}));
}

TEST(SoftPromptTest, ZeroInputsGiveTheMlpImageOfZero) {
    SoftPrompt sp = SoftPrompt::create(3, 4, 2);
    for (auto& [name, t] : sp.params) {
        if (name.find("lstm") != std::string::npos || name.find("raw") != std::string::npos) {
            t.fill(0.0);
        }
    }
    // All LSTM states are zero, so each row is W2 tanh(b1) + b2.
    const Tensor& w2 = sp.params.at("prompt/mlp.w2");
    const Tensor& b1 = sp.params.at("prompt/mlp.b1");
    const Tensor& b2 = sp.params.at("prompt/mlp.b2");
    const Tensor out = prompt_embeddings(sp);
    for (std::size_t c = 0; c < 4; ++c) {
        double expect = b2[c];
        for (std::size_t k = 0; k < 4; ++k) {
            expect += std::tanh(b1[k]) * w2.at(k, c);
        }
        for (std::size_t r = 0; r < 3; ++r) {
            EXPECT_NEAR(out.at(r, c), expect, 1e-14);
        }
    }
}

TEST(SoftPromptTest, FromParamsRoundTrip) {
    const SoftPrompt sp = SoftPrompt::create(4, 8, 3);
    EXPECT_TRUE(SoftPrompt::from_params(sp.params).bit_equal(sp));
    auto broken = sp.params;
    broken.erase("prompt/mlp.b2");
    EXPECT_THROW(SoftPrompt::from_params(broken), FormatError);
}

TEST(TemplateTest, TemplateOrderLayout) {
    const TemplatedInput t = build_template(TokenSeq{10, 11}, TokenSeq{12}, 4, TemplateLayout::TemplateOrder, 64);
    EXPECT_EQ(t.tokens, (TokenSeq{tk::kBos, 10, 11, tk::kPeriod, 12, tk::kQmark, tk::kMask, tk::kPeriod, tk::kEos}));
    EXPECT_EQ(t.spliced_length(), 13u);
    EXPECT_EQ(t.mask_position, 10u);
    EXPECT_EQ(t.prompt_insert_index, 6u);
}

TEST(TemplateTest, NoPromptShiftsMaskLeft) {
    const TemplatedInput t = build_template(TokenSeq{10, 11}, TokenSeq{12}, 0, TemplateLayout::TemplateOrder, 64);
    EXPECT_EQ(t.mask_position, 6u);
}

TEST(TemplateTest, PrependFrontLayout) {
    // <p1..p4> BOS 10 11 . 12 ? MASK . EOS puts MASK at spliced index 10.
    const TemplatedInput t = build_template(TokenSeq{10, 11}, TokenSeq{12}, 4, TemplateLayout::PrependFront, 64);
    EXPECT_EQ(t.prompt_insert_index, 0u);
    EXPECT_EQ(t.mask_position, 10u);
}

TEST(TemplateTest, MaskPositionPointsAtMaskInSplicedSequence) {
    for (auto layout : {TemplateLayout::TemplateOrder, TemplateLayout::PrependFront}) {
        for (std::size_t n : {0u, 1u, 4u}) {
            const TemplatedInput t = build_template(TokenSeq{7, 8, 9}, TokenSeq{7, 9}, n, layout, 64);
            std::vector<long> spliced(t.tokens.begin(), t.tokens.end());
            spliced.insert(spliced.begin() + static_cast<long>(t.prompt_insert_index), n, -1);
            ASSERT_EQ(spliced.size(), t.spliced_length());
            EXPECT_EQ(spliced[t.mask_position], tk::kMask);
        }
    }
}

TEST(TemplateTest, ParseRoundTrip) {
    const TokenSeq p = {10, 20, 30};
    const TokenSeq h = {40};
    const auto [pp, hh] = parse_template(build_template(p, h, 4, TemplateLayout::TemplateOrder, 64));
    EXPECT_EQ(pp, p);
    EXPECT_EQ(hh, h);
}

TEST(TemplateTest, OverflowIsRejected) {
    EXPECT_THROW(build_template(TokenSeq(20, 7), TokenSeq(10, 8), 4, TemplateLayout::TemplateOrder, 39),
                 SequenceOverflow);
    EXPECT_NO_THROW(build_template(TokenSeq(20, 7), TokenSeq(10, 8), 4, TemplateLayout::TemplateOrder, 40));
}

TEST(TemplateTest, LayoutNames) {
    EXPECT_EQ(parse_layout(layout_name(TemplateLayout::PrependFront)), TemplateLayout::PrependFront);
    EXPECT_THROW(parse_layout("sideways"), ConfigError);
}

TEST(VerbalizerTest, PredictLabel) {
    const Verbalizer v{{6, 7, 8}};
    std::vector<double> logits(10, 0.0);
    logits[6] = 2.0;
    logits[7] = 1.0;
    EXPECT_EQ(predict_label(logits, v), Label::Entailment);
    std::fill(logits.begin(), logits.end(), 0.5);
    EXPECT_EQ(predict_label(logits, v), Label::Entailment);
    logits[9] = 1e9;
    logits[8] = 0.6;
    EXPECT_EQ(predict_label(logits, v), Label::Neutral);
}

TEST(VerbalizerTest, Validation) {
    EXPECT_NO_THROW((Verbalizer{{6, 7, 8}}.validate(10)));
    EXPECT_THROW((Verbalizer{{6, 6, 8}}.validate(10)), ConfigError);
    EXPECT_THROW((Verbalizer{{1, 7, 8}}.validate(10)), ConfigError);
    EXPECT_THROW((Verbalizer{{6, 7, 10}}.validate(10)), ConfigError);
}

TEST(LabelTest, Names) {
    for (Label l : kAllLabels) {
        EXPECT_EQ(parse_label(label_name(l)), l);
    }
    EXPECT_THROW(parse_label("maybe"), FormatError);
}
