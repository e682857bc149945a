#pragma once

// Scoped flush-to-zero / denormals-are-zero for the calling thread. Adam
// moments of rarely-visited inputs decay into the denormal range, where x86
// arithmetic is many times slower.

#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#define DICP_HAS_MXCSR 1
#endif

namespace dicp {

class FlushDenormals {
 public:
  FlushDenormals() {
#ifdef DICP_HAS_MXCSR
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040u);  // FTZ | DAZ
#endif
  }
  ~FlushDenormals() {
#ifdef DICP_HAS_MXCSR
    _mm_setcsr(saved_);
#endif
  }
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned saved_ = 0;
};

}  // namespace dicp
