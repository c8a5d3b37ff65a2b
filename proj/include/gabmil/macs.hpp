#pragma once

#include <cstdint>

namespace gabmil::macs {

// Thread-local multiply-accumulate counter. When enabled, every matmul adds
// M*K*R. Activations, bias adds and data movement count zero, matching the
// analytic cost model. Counts are per thread; a forward pass and its counter
// run on the same thread.

namespace detail {
inline thread_local std::uint64_t count = 0;
inline thread_local bool enabled = false;
}  // namespace detail

inline void enable(bool on) { detail::enabled = on; }
inline bool enabled() { return detail::enabled; }
inline void reset() { detail::count = 0; }
inline std::uint64_t count() { return detail::count; }
inline void add(std::uint64_t n) {
  if (detail::enabled) detail::count += n;
}

}  // namespace gabmil::macs
