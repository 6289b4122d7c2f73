#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace npad {

/// 64-bit FNV-1a, used for provenance hashes and cluster-state digests.
class Fnv1a {
public:
    void update(std::string_view bytes);
    void update(double v);
    void update(std::uint64_t v);
    void update(std::span<const double> values);
    std::uint64_t value() const noexcept { return state_; }
    std::string hex() const;

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string fnv1a_hex(std::string_view bytes);

}  // namespace npad
