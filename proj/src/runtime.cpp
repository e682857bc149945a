#include "dicp/runtime.hpp"

#include <mutex>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace dicp {

void retain_heap_memory() {
  static std::once_flag once;
  std::call_once(once, [] {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
#endif
  });
}

}  // namespace dicp
