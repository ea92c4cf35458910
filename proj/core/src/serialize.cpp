#include "ltp/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ltp/error.hpp"

namespace ltp {

namespace fs = std::filesystem;
using nlohmann::json;

void append_f64_le(std::vector<std::byte>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::byte>((bits >> (8 * i)) & 0xFF));
    }
}

double read_f64_le(const std::byte* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    }
    return std::bit_cast<double>(bits);
}

namespace {

void write_all(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("cannot open '" + tmp.string() + "' for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw DataError("write failed for '" + tmp.string() + "'");
        }
    }
    fs::rename(tmp, path);
}

std::string read_all(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open '" + path.string() + "'");
    }
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

void write_text_file(const fs::path& path, const std::string& content) { write_all(path, content); }

std::string read_text_file(const fs::path& path) { return read_all(path); }

void write_container(const fs::path& path, std::string_view magic, const json& header,
                     const std::vector<std::byte>& payload) {
    const std::string head = header.dump();
    std::string bytes;
    bytes.reserve(magic.size() + 8 + head.size() + payload.size());
    bytes.append(magic);
    const auto len = static_cast<std::uint64_t>(head.size());
    for (int i = 0; i < 8; ++i) {
        bytes.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
    }
    bytes.append(head);
    bytes.append(reinterpret_cast<const char*>(payload.data()), payload.size());
    write_all(path, bytes);
}

Container read_container(const fs::path& path, std::string_view magic) {
    const std::string bytes = read_all(path);
    if (bytes.size() < magic.size() + 8 || std::string_view(bytes).substr(0, magic.size()) != magic) {
        throw FormatError("'" + path.string() + "': missing " + std::string(magic) + " magic");
    }
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) {
        len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[magic.size() + i])) << (8 * i);
    }
    const std::size_t head_begin = magic.size() + 8;
    if (len > bytes.size() - head_begin) {
        throw FormatError("'" + path.string() + "': truncated header");
    }
    Container c;
    try {
        c.header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(head_begin),
                               bytes.begin() + static_cast<std::ptrdiff_t>(head_begin + len));
    } catch (const json::exception& e) {
        throw FormatError("'" + path.string() + "': bad header: " + e.what());
    }
    const std::size_t payload_begin = head_begin + len;
    c.payload.resize(bytes.size() - payload_begin);
    std::memcpy(c.payload.data(), bytes.data() + payload_begin, c.payload.size());
    return c;
}

json to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"hidden_dim", c.hidden_dim}, {"num_layers", c.num_layers},
                {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},       {"max_seq_len", c.max_seq_len},
                {"head_tied", c.head_tied}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    try {
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
        c.num_layers = j.value("num_layers", c.num_layers);
        c.num_heads = j.value("num_heads", c.num_heads);
        c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
        c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
        c.head_tied = j.value("head_tied", c.head_tied);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint, const SoftPrompt* prompt) {
    json tensors = json::array();
    std::vector<std::byte> payload;
    auto add_tensor = [&](const std::string& name, const Tensor& t, ParamTag tag) {
        const std::size_t offset = payload.size();
        for (double v : t.values()) {
            append_f64_le(payload, v);
        }
        tensors.push_back(json{{"name", name},
                               {"shape", t.shape()},
                               {"layer", tag.layer},
                               {"group", std::string(group_name(tag.group))},
                               {"offset", offset},
                               {"nbytes", payload.size() - offset}});
    };
    for (const auto& [name, t] : checkpoint.params) {
        add_tensor(name, t, checkpoint.tags.at(name));
    }
    if (prompt != nullptr) {
        for (const auto& [name, t] : prompt->params) {
            add_tensor(name, t, ParamTag{-1, ParamGroup::Prompt});
        }
    }
    json header{{"format", std::string(kCheckpointMagic)},
                {"config", to_json(checkpoint.config)},
                {"config_fingerprint", checkpoint.config_fingerprint()},
                {"tensors", std::move(tensors)}};
    write_container(path, kCheckpointMagic, header, payload);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
    Container c = read_container(path, kCheckpointMagic);
    LoadedCheckpoint out;
    std::map<std::string, Tensor> prompt_params;
    try {
        out.backbone.config = model_config_from_json(c.header.at("config"));
        if (c.header.at("config_fingerprint").get<std::string>() != out.backbone.config_fingerprint()) {
            throw FingerprintMismatch("'" + path.string() + "': config fingerprint does not match stored config");
        }
        for (const json& entry : c.header.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<Shape>();
            const auto offset = entry.at("offset").get<std::size_t>();
            const auto nbytes = entry.at("nbytes").get<std::size_t>();
            const ParamGroup group = parse_group(entry.at("group").get<std::string>());
            if (nbytes != shape_numel(shape) * 8 || offset + nbytes > c.payload.size()) {
                throw FormatError("'" + path.string() + "': tensor " + name + " has inconsistent extent");
            }
            std::vector<double> data(shape_numel(shape));
            for (std::size_t i = 0; i < data.size(); ++i) {
                data[i] = read_f64_le(c.payload.data() + offset + 8 * i);
            }
            Tensor t(shape, std::move(data));
            if (group == ParamGroup::Prompt) {
                if (!is_prompt_param(name)) {
                    throw FormatError("'" + path.string() + "': prompt tensor " + name + " lacks the prompt/ prefix");
                }
                prompt_params.emplace(name, std::move(t));
            } else {
                out.backbone.tags.emplace(name, ParamTag{entry.at("layer").get<int>(), group});
                if (!out.backbone.params.emplace(name, std::move(t)).second) {
                    throw FormatError("'" + path.string() + "': duplicate tensor " + name);
                }
            }
        }
    } catch (const json::exception& e) {
        throw FormatError("'" + path.string() + "': bad checkpoint header: " + e.what());
    }
    if (!prompt_params.empty()) {
        out.prompt = SoftPrompt::from_params(std::move(prompt_params));
    }
    return out;
}

}  // namespace ltp
