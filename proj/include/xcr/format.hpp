#pragma once

#include <charconv>
#include <cmath>
#include <string>

namespace xcr {

/// Shortest decimal text that round-trips to the same double; empty for NaN.
inline std::string format_double(double v) {
  if (std::isnan(v)) return {};
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace xcr
