#include "gmem/device.hpp"

#include <algorithm>

namespace gmem {

MmuOps MmuOps::noop() {
  MmuOps ops;
  ops.pte_install = [](VirtAddr, PhysAddr, std::uint64_t, Prot) {};
  ops.pte_destroy = [](VirtAddr, std::uint64_t) {};
  ops.tlb_invalidate_range = [](std::span<const VaRange>) {};
  ops.page_zero = [](PhysAddr, std::uint64_t) {};
  return ops;
}

Status validate_capabilities(const DeviceCapabilities& caps) {
  const auto& sizes = caps.page_sizes;
  if (sizes.empty()) return Status::kInvalidArg;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (!is_pow2(sizes[i]) || sizes[i] < kBasePageSize) return Status::kInvalidArg;
    // Ascending powers of two are automatically multiples of each other.
    if (i > 0 && sizes[i] <= sizes[i - 1]) return Status::kInvalidArg;
  }
  return Status::kSuccess;
}

bool supports_page_size(const DeviceCapabilities& caps, std::uint64_t size) {
  return std::find(caps.page_sizes.begin(), caps.page_sizes.end(), size) != caps.page_sizes.end();
}

}  // namespace gmem
