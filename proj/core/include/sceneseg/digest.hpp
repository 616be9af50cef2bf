#pragma once

#include <cstdint>
#include <string_view>

namespace sceneseg {

/// FNV-1a 64-bit hash, used for config digests embedded in model files.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace sceneseg
