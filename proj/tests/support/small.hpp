#pragma once

#include "questv/memory/layout.hpp"

namespace testing_support {

/// A scaled-down host so tests do not pay for 4 GiB bookkeeping.
inline questv::mem::LayoutSizes small_sizes() {
  questv::mem::LayoutSizes s;
  s.host_bytes = 64 * questv::mem::MiB;
  s.kernel_bytes = 8 * questv::mem::MiB;
  s.shared_bytes = 1 * questv::mem::MiB;
  s.ept_data_bytes = 256 * questv::mem::KiB;
  return s;
}

}  // namespace testing_support
