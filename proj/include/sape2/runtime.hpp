#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sape2 {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// OS, so the many same-sized temporaries of a training step reuse warm
/// pages. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace sape2
