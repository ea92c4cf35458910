#include "ltp/mask.hpp"

#include <algorithm>
#include <numeric>

#include "ltp/error.hpp"
#include "ltp/hash.hpp"
#include "ltp/serialize.hpp"

namespace ltp {

using nlohmann::json;

std::string_view strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Vanilla: return "vanilla";
        case Strategy::DecoupleUntie: return "decouple_untie";
        case Strategy::FreezeEmbeddings: return "freeze_embeddings";
    }
    return "unknown";
}

Strategy parse_strategy(std::string_view name) {
    for (Strategy s : {Strategy::Vanilla, Strategy::DecoupleUntie, Strategy::FreezeEmbeddings}) {
        if (strategy_name(s) == name) {
            return s;
        }
    }
    throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

bool frozen_by_strategy(Strategy strategy, const ParamTag& tag) {
    switch (strategy) {
        case Strategy::Vanilla: return false;
        case Strategy::DecoupleUntie:
            return tag.group == ParamGroup::OutputEmbedding || tag.group == ParamGroup::LayerNorm;
        case Strategy::FreezeEmbeddings: return tag.layer == 0;
    }
    return false;
}

namespace {

std::string_view segment_name(Segment s) {
    switch (s) {
        case Segment::Lower: return "lower";
        case Segment::Middle: return "middle";
        case Segment::Higher: return "higher";
    }
    return "unknown";
}

}  // namespace

std::string scope_name(const Scope& scope) {
    switch (scope.kind) {
        case Scope::Kind::Global: return "global";
        case Scope::Kind::PerLayer: return "per_layer";
        case Scope::Kind::Segment: return "segment(" + std::string(segment_name(scope.segment)) + ")";
    }
    return "unknown";
}

Scope parse_scope(std::string_view name) {
    if (name == "global") {
        return Scope::global();
    }
    if (name == "per_layer") {
        return Scope::per_layer();
    }
    for (Segment s : {Segment::Lower, Segment::Middle, Segment::Higher}) {
        if (name == "segment(" + std::string(segment_name(s)) + ")" || name == segment_name(s)) {
            return Scope::of_segment(s);
        }
    }
    throw ConfigError("unknown scope '" + std::string(name) + "'");
}

std::pair<int, int> segment_layers(std::size_t num_layers, Segment segment) {
    const int d = static_cast<int>(num_layers);
    const int third = (d + 2) / 3;
    const int index = static_cast<int>(segment);
    const int first = index * third + 1;
    const int last = std::min(d, (index + 1) * third);
    if (first > last) {
        throw ConfigError("segment " + std::string(segment_name(segment)) + " is empty for " +
                          std::to_string(num_layers) + " layers");
    }
    return {first, last};
}

bool in_scope(const Scope& scope, const ParamTag& tag, std::size_t num_layers) {
    switch (scope.kind) {
        case Scope::Kind::Global: return true;
        case Scope::Kind::PerLayer: return tag.layer >= 1 && tag.layer <= static_cast<int>(num_layers);
        case Scope::Kind::Segment: {
            const auto [first, last] = segment_layers(num_layers, scope.segment);
            return tag.layer >= first && tag.layer <= last;
        }
    }
    return false;
}

std::size_t MaskEntry::count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

bool SparsityMask::any(std::string_view name) const {
    auto it = entries.find(std::string(name));
    return it != entries.end() && std::find(it->second.bits.begin(), it->second.bits.end(), 1) != it->second.bits.end();
}

bool SparsityMask::is_subset_of(const SparsityMask& other) const {
    for (const auto& [name, e] : entries) {
        auto it = other.entries.find(name);
        if (it == other.entries.end() || it->second.bits.size() != e.bits.size()) {
            return false;
        }
        for (std::size_t i = 0; i < e.bits.size(); ++i) {
            if (e.bits[i] != 0 && it->second.bits[i] == 0) {
                return false;
            }
        }
    }
    return true;
}

std::string SparsityMask::content_fingerprint() const {
    Fnv1a h;
    h.update("ltp-mask");
    for (const auto& [name, e] : entries) {
        h.update(name);
        h.update(std::as_bytes(std::span(e.bits)));
    }
    return h.hex();
}

SparsityMask full_mask(const Checkpoint& checkpoint, bool value) {
    SparsityMask m;
    for (const auto& [name, t] : checkpoint.params) {
        MaskEntry e{t.shape(), checkpoint.tags.at(name), true, std::vector<std::uint8_t>(t.size(), value ? 1 : 0)};
        m.eligible += t.size();
        m.entries.emplace(name, std::move(e));
    }
    m.selected = value ? m.eligible : 0;
    m.active_ratio = value ? 1.0 : 0.0;
    m.num_layers = checkpoint.config.num_layers;
    m.theta_fingerprint = checkpoint.content_fingerprint();
    m.theta_l_fingerprint = m.theta_fingerprint;
    m.structure_fingerprint = checkpoint.structure_fingerprint();
    return m;
}

void check_mask_matches(const SparsityMask& mask, const Checkpoint& checkpoint) {
    if (mask.structure_fingerprint != checkpoint.structure_fingerprint()) {
        throw FingerprintMismatch("mask was built for structure " + mask.structure_fingerprint +
                                  " but the checkpoint has structure " + checkpoint.structure_fingerprint());
    }
}

// ---------------------------------------------------------------------------

void save_mask(const std::filesystem::path& path, const SparsityMask& mask) {
    json tensors = json::array();
    std::vector<std::byte> payload;
    for (const auto& [name, e] : mask.entries) {
        const std::size_t offset = payload.size();
        const std::size_t nbytes = (e.bits.size() + 7) / 8;
        payload.resize(offset + nbytes, std::byte{0});
        for (std::size_t i = 0; i < e.bits.size(); ++i) {
            if (e.bits[i] != 0) {
                payload[offset + i / 8] |= static_cast<std::byte>(1U << (i % 8));
            }
        }
        tensors.push_back(json{{"name", name},
                               {"shape", e.shape},
                               {"layer", e.tag.layer},
                               {"group", std::string(group_name(e.tag.group))},
                               {"eligible", e.eligible},
                               {"offset", offset},
                               {"nbytes", nbytes}});
    }
    // %.17g keeps the ratio exact through the text header.
    char ratio[32];
    std::snprintf(ratio, sizeof ratio, "%.17g", mask.active_ratio);
    json header{{"format", std::string(kMaskMagic)},
                {"active_ratio", ratio},
                {"K", mask.selected},
                {"N_eligible", mask.eligible},
                {"strategy", std::string(strategy_name(mask.strategy))},
                {"scope", scope_name(mask.scope)},
                {"num_layers", mask.num_layers},
                {"theta_fingerprint", mask.theta_fingerprint},
                {"theta_l_fingerprint", mask.theta_l_fingerprint},
                {"structure_fingerprint", mask.structure_fingerprint},
                {"tensors", std::move(tensors)}};
    write_container(path, kMaskMagic, header, payload);
}

SparsityMask load_mask(const std::filesystem::path& path) {
    Container c = read_container(path, kMaskMagic);
    SparsityMask m;
    try {
        const json& h = c.header;
        m.active_ratio = std::stod(h.at("active_ratio").get<std::string>());
        m.selected = h.at("K").get<std::size_t>();
        m.eligible = h.at("N_eligible").get<std::size_t>();
        m.strategy = parse_strategy(h.at("strategy").get<std::string>());
        m.scope = parse_scope(h.at("scope").get<std::string>());
        m.num_layers = h.at("num_layers").get<std::size_t>();
        m.theta_fingerprint = h.at("theta_fingerprint").get<std::string>();
        m.theta_l_fingerprint = h.at("theta_l_fingerprint").get<std::string>();
        m.structure_fingerprint = h.at("structure_fingerprint").get<std::string>();
        std::size_t total = 0;
        for (const json& t : h.at("tensors")) {
            MaskEntry e;
            const auto name = t.at("name").get<std::string>();
            e.shape = t.at("shape").get<Shape>();
            e.tag = ParamTag{t.at("layer").get<int>(), parse_group(t.at("group").get<std::string>())};
            e.eligible = t.at("eligible").get<bool>();
            const auto offset = t.at("offset").get<std::size_t>();
            const auto nbytes = t.at("nbytes").get<std::size_t>();
            const std::size_t n = shape_numel(e.shape);
            if (nbytes != (n + 7) / 8 || offset + nbytes > c.payload.size()) {
                throw FormatError("'" + path.string() + "': mask tensor " + name + " has inconsistent extent");
            }
            e.bits.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                e.bits[i] = (static_cast<unsigned>(c.payload[offset + i / 8]) >> (i % 8)) & 1U;
            }
            if (!e.eligible && e.count() != 0) {
                throw FormatError("'" + path.string() + "': ineligible tensor " + name + " has selected entries");
            }
            total += e.count();
            m.entries.emplace(name, std::move(e));
        }
        if (total != m.selected) {
            throw FormatError("'" + path.string() + "': header K=" + std::to_string(m.selected) + " but " +
                              std::to_string(total) + " bits are set");
        }
    } catch (const json::exception& e) {
        throw FormatError("'" + path.string() + "': bad mask header: " + e.what());
    } catch (const std::invalid_argument&) {
        throw FormatError("'" + path.string() + "': bad active_ratio");
    }
    return m;
}

}  // namespace ltp
