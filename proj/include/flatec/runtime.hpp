#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace flatec {

/// Keeps large tensor buffers on the heap between steps instead of returning
/// them to the OS, which otherwise costs a page fault per touched page.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace flatec
