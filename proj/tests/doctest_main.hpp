#pragma once

// torch's logging header defines glog-style CHECK macros; doctest owns them here.
#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LT
#undef CHECK_LE
#undef CHECK_GT
#undef CHECK_GE
#undef CHECK_NOTNULL
#include <doctest.h>

// Vectors of planes go through torch's vector printer, which cannot format them.
template <typename T>
bool same(const T& a, const T& b) {
  return a == b;
}
