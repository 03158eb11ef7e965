#pragma once

// The engine compiles once per scalar type. Production code uses float;
// the double build exists for gradient verification. Each build lives in
// its own inline namespace so both can be linked into one program.
#ifdef LBBA_DOUBLE
#define LBBA_PRECISION_NS f64
#else
#define LBBA_PRECISION_NS f32
#endif

namespace lbba {
inline namespace LBBA_PRECISION_NS {

#ifdef LBBA_DOUBLE
using real = double;
#else
using real = float;
#endif

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
