#include "npad/runtime.hpp"

#include <cstdlib>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "npad/errors.hpp"

namespace npad {

void retain_freed_memory() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

std::size_t threads_from_env() {
    const char* raw = std::getenv("NPAD_LAB_THREADS");
    if (!raw || !*raw) return 1;
    const std::string s(raw);
    if (s.find_first_not_of("0123456789") != std::string::npos || s.size() > 4 || std::stoul(s) == 0) {
        throw ConfigError("NPAD_LAB_THREADS must be a positive integer, got '" + s + "'");
    }
    return std::stoul(s);
}

}  // namespace npad
