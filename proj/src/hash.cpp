#include "npad/hash.hpp"

#include <bit>
#include <cstdio>

namespace npad {

void Fnv1a::update(std::string_view bytes) {
    for (unsigned char c : bytes) {
        state_ ^= c;
        state_ *= 0x100000001b3ULL;
    }
}

void Fnv1a::update(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        state_ ^= (v >> (8 * i)) & 0xFF;
        state_ *= 0x100000001b3ULL;
    }
}

void Fnv1a::update(double v) { update(std::bit_cast<std::uint64_t>(v)); }

void Fnv1a::update(std::span<const double> values) {
    for (double v : values) update(v);
}

std::string Fnv1a::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
}

std::string fnv1a_hex(std::string_view bytes) {
    Fnv1a h;
    h.update(bytes);
    return h.hex();
}

}  // namespace npad
