#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ltp/model.hpp"

namespace ltp {

// Which parameters stay frozen while adapting theta with the MLM objective.
enum class Strategy {
    Vanilla,           // everything trains, head stays tied
    DecoupleUntie,     // untie the head, freeze output embedding and every layer norm
    FreezeEmbeddings,  // freeze the whole embedding block (token, position, its layer norm)
};

std::string_view strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);  // throws ConfigError

bool frozen_by_strategy(Strategy strategy, const ParamTag& tag);

enum class Segment { Lower, Middle, Higher };

struct Scope {
    enum class Kind { Global, PerLayer, Segment } kind = Kind::Global;
    Segment segment = Segment::Lower;

    static Scope global() { return {}; }
    static Scope per_layer() { return {Kind::PerLayer, Segment::Lower}; }
    static Scope of_segment(Segment s) { return {Kind::Segment, s}; }

    friend bool operator==(const Scope&, const Scope&) = default;
};

// "global", "per_layer", "segment(lower)", "segment(middle)", "segment(higher)"
std::string scope_name(const Scope& scope);
Scope parse_scope(std::string_view name);  // throws ConfigError

// Inclusive transformer-layer range of a segment: thirds of size ceil(D/3).
std::pair<int, int> segment_layers(std::size_t num_layers, Segment segment);

// Whether a parameter with this tag belongs to the scope. The embedding block and
// the head only belong to the global scope.
bool in_scope(const Scope& scope, const ParamTag& tag, std::size_t num_layers);

struct MaskEntry {
    Shape shape;
    ParamTag tag;
    bool eligible = false;
    std::vector<std::uint8_t> bits;  // one byte per scalar entry, 0 or 1

    std::size_t count() const;
    friend bool operator==(const MaskEntry&, const MaskEntry&) = default;
};

// Covers every backbone parameter; ineligible entries are all false.
struct SparsityMask {
    std::map<std::string, MaskEntry> entries;
    double active_ratio = 0.0;
    std::size_t selected = 0;  // K
    std::size_t eligible = 0;  // N_eligible
    Strategy strategy = Strategy::Vanilla;
    Scope scope;
    std::size_t num_layers = 0;
    std::string theta_fingerprint;
    std::string theta_l_fingerprint;
    std::string structure_fingerprint;  // of the checkpoint the mask gates

    bool any(std::string_view name) const;
    bool is_subset_of(const SparsityMask& other) const;
    std::string content_fingerprint() const;

    friend bool operator==(const SparsityMask&, const SparsityMask&) = default;
};

// Mask with every entry set (or none), gating `checkpoint` directly.
SparsityMask full_mask(const Checkpoint& checkpoint, bool value);

// Throws FingerprintMismatch if the mask was not built for this checkpoint's layout.
void check_mask_matches(const SparsityMask& mask, const Checkpoint& checkpoint);

inline constexpr std::string_view kMaskMagic = "LTPMASK1";

void save_mask(const std::filesystem::path& path, const SparsityMask& mask);
SparsityMask load_mask(const std::filesystem::path& path);

}  // namespace ltp
