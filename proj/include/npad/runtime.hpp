#pragma once

#include <cstddef>

namespace npad {

/// Keeps freed buffers in the process instead of handing them back to the OS on
/// every batch, which otherwise dominates system time during training. glibc only;
/// a no-op elsewhere.
void retain_freed_memory();

/// Worker threads from NPAD_LAB_THREADS; 1 when unset. ConfigError when malformed.
std::size_t threads_from_env();

}  // namespace npad
