#include "ltp/hash.hpp"

#include <array>
#include <bit>

namespace ltp {

void Fnv1a::update(std::uint64_t v) {
    std::array<std::byte, 8> bytes{};
    for (std::size_t i = 0; i < 8; ++i) {
        bytes[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFF);
    }
    update(bytes);
}

void Fnv1a::update(double v) { update(std::bit_cast<std::uint64_t>(v)); }

std::string Fnv1a::hex() const { return to_hex(state_); }

std::string to_hex(std::uint64_t v) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
        v >>= 4;
    }
    return out;
}

}  // namespace ltp
