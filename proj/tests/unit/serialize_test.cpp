#include <gtest/gtest.h>

#include <cstring>
#include <limits>

#include "ltp/error.hpp"
#include "ltp/mask.hpp"
#include "ltp/serialize.hpp"
#include "testing.hpp"

using namespace ltp;
using ltp::testing::random_tensor;
using ltp::testing::scratch_dir;
using ltp::testing::tiny_config;

TEST(SerializeTest, LittleEndianDoublesRoundTrip) {
    const double values[] = {0.0, -0.0, 1.5, -3.25e-300, std::numeric_limits<double>::denorm_min(),
                             std::numeric_limits<double>::infinity(), 0.1};
    std::vector<std::byte> buf;
    for (double v : values) {
        append_f64_le(buf, v);
    }
    ASSERT_EQ(buf.size(), 8 * std::size(values));
    EXPECT_EQ(static_cast<unsigned>(buf[8 * 2 + 7]), 0x3Fu);  // 1.5 = 0x3FF8000000000000
    for (std::size_t i = 0; i < std::size(values); ++i) {
        const double back = read_f64_le(buf.data() + 8 * i);
        EXPECT_EQ(std::memcmp(&back, &values[i], 8), 0) << i;
    }
}

TEST(SerializeTest, ModelConfigJson) {
    ModelConfig c = tiny_config(false);
    c.max_seq_len = 40;
    EXPECT_EQ(model_config_from_json(to_json(c)), c);
    EXPECT_THROW(model_config_from_json(nlohmann::json{{"hidden_dim", "wide"}}), ConfigError);
}

TEST(CheckpointIoTest, RoundTripIsBitExact) {
    for (bool tied : {true, false}) {
        Checkpoint ck = build_model(tiny_config(tied), 3);
        for (auto& [name, t] : ck.params) {
            t = random_tensor(t.shape(), name.size(), -5.0, 5.0);
        }
        ck.at(param_names::kHeadBias)[0] = -0.0;
        const auto dir = scratch_dir("ckpt");
        save_checkpoint(dir / "a.ckpt", ck);
        const LoadedCheckpoint back = load_checkpoint(dir / "a.ckpt");
        EXPECT_TRUE(back.backbone.bit_equal(ck));
        EXPECT_EQ(back.backbone.tags, ck.tags);
        EXPECT_EQ(back.backbone.config, ck.config);
        EXPECT_FALSE(back.prompt.has_value());
        save_checkpoint(dir / "b.ckpt", back.backbone);
        EXPECT_EQ(read_text_file(dir / "a.ckpt"), read_text_file(dir / "b.ckpt"));
    }
}

TEST(CheckpointIoTest, PromptTravelsInTheSameFile) {
    const Checkpoint ck = build_model(tiny_config(), 4);
    const SoftPrompt sp = SoftPrompt::create(4, 8, 9);
    const auto dir = scratch_dir("ckpt_prompt");
    save_checkpoint(dir / "p.ckpt", ck, &sp);
    const LoadedCheckpoint back = load_checkpoint(dir / "p.ckpt");
    ASSERT_TRUE(back.prompt.has_value());
    EXPECT_TRUE(back.prompt->bit_equal(sp));
    EXPECT_TRUE(back.backbone.bit_equal(ck));
}

TEST(CheckpointIoTest, CreatesMissingDirectories) {
    const auto dir = scratch_dir("ckpt_dirs");
    save_checkpoint(dir / "x" / "y" / "c.ckpt", build_model(tiny_config(), 1));
    EXPECT_TRUE(std::filesystem::exists(dir / "x" / "y" / "c.ckpt"));
}

TEST(CheckpointIoTest, TamperedOrBrokenFilesRejected) {
    const auto dir = scratch_dir("ckpt_bad");
    save_checkpoint(dir / "c.ckpt", build_model(tiny_config(), 5));
    Container c = read_container(dir / "c.ckpt", kCheckpointMagic);
    c.header["config"]["num_layers"] = 3;
    write_container(dir / "tampered.ckpt", kCheckpointMagic, c.header, c.payload);
    EXPECT_THROW(load_checkpoint(dir / "tampered.ckpt"), FingerprintMismatch);

    const std::string bytes = read_text_file(dir / "c.ckpt");
    write_text_file(dir / "short.ckpt", bytes.substr(0, bytes.size() - 8));
    EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), FormatError);
    write_text_file(dir / "tiny.ckpt", bytes.substr(0, 12));
    EXPECT_THROW(load_checkpoint(dir / "tiny.ckpt"), FormatError);
    EXPECT_THROW(load_checkpoint(dir / "nope.ckpt"), DataError);
    EXPECT_THROW(read_container(dir / "c.ckpt", kMaskMagic), FormatError);
}
