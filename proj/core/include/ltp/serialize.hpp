#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ltp/model.hpp"
#include "ltp/prompt.hpp"

namespace ltp {

// Binary container shared by checkpoint and mask files:
//   8-byte magic | uint64 LE header length | UTF-8 JSON header | payload
struct Container {
    nlohmann::json header;
    std::vector<std::byte> payload;
};

void write_container(const std::filesystem::path& path, std::string_view magic, const nlohmann::json& header,
                     const std::vector<std::byte>& payload);
Container read_container(const std::filesystem::path& path, std::string_view magic);

void append_f64_le(std::vector<std::byte>& out, double v);
double read_f64_le(const std::byte* p);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

inline constexpr std::string_view kCheckpointMagic = "LTPCKPT1";

struct LoadedCheckpoint {
    Checkpoint backbone;
    std::optional<SoftPrompt> prompt;
};

// Prompt tensors, when given, are stored after the backbone under their "prompt/" names.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint,
                     const SoftPrompt* prompt = nullptr);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Writes `content` only through a temporary file and rename.
void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace ltp
