#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace ltp {

// FNV-1a, 64 bit. Used for checkpoint, mask and config fingerprints.
class Fnv1a {
public:
    void update(std::span<const std::byte> bytes) {
        for (std::byte b : bytes) {
            state_ ^= static_cast<std::uint64_t>(b);
            state_ *= 0x100000001B3ULL;
        }
    }
    void update(std::string_view s) { update(std::as_bytes(std::span(s.data(), s.size()))); }
    void update(std::uint64_t v);
    void update(double v);

    std::uint64_t digest() const { return state_; }
    std::string hex() const;

private:
    std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

std::string to_hex(std::uint64_t v);

}  // namespace ltp
