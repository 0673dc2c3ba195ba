#pragma once

// The library is compiled twice: once with 32-bit reals for training and once
// with DSEQ_DOUBLE for finite-difference gradient checks. Each build lives in
// its own inline namespace so both can be linked into one binary.

#if defined(DSEQ_DOUBLE)
#define DSEQ_PRECISION_NS f64
#else
#define DSEQ_PRECISION_NS f32
#endif

#define DSEQ_BEGIN_NAMESPACE \
  namespace dseq {           \
  inline namespace DSEQ_PRECISION_NS {
#define DSEQ_END_NAMESPACE \
  }                        \
  }

DSEQ_BEGIN_NAMESPACE

#if defined(DSEQ_DOUBLE)
using Real = double;
inline constexpr bool kCheckFinite = true;
#else
using Real = float;
inline constexpr bool kCheckFinite = false;
#endif

DSEQ_END_NAMESPACE
