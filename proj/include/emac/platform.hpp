#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace emac {

/// Keeps glibc from returning large matrix buffers to the OS after every
/// free. Per-update temporaries are a few hundred KB; with the default
/// thresholds each one is an mmap/munmap pair and training time roughly
/// doubles on page faults. No-op elsewhere.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace emac
