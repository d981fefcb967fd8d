#pragma once

#include <any>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "gmem/status.hpp"
#include "gmem/types.hpp"

namespace gmem {

struct DeviceCapabilities {
  bool fault_recoverable = true;
  bool has_local_memory = false;
  // Devices may share a page table only when their formats are equal.
  std::uint32_t page_table_format = 0;
  // Ascending, powers of two, each >= 4096.
  std::vector<std::uint64_t> page_sizes{kBasePageSize};
};

// Driver-supplied MMU functions. GMEM calls into a device only through
// these; every hook must be present.
struct MmuOps {
  std::function<void(VirtAddr, PhysAddr, std::uint64_t size, Prot)> pte_install;
  std::function<void(VirtAddr, std::uint64_t size)> pte_destroy;
  std::function<void(std::span<const VaRange>)> tlb_invalidate_range;
  std::function<void(PhysAddr, std::uint64_t bytes)> page_zero;

  bool complete() const {
    return pte_install && pte_destroy && tlb_invalidate_range && page_zero;
  }

  static MmuOps noop();
};

struct MmuDescriptor {
  MmuOps ops = MmuOps::noop();
  // Opaque driver data handed back untouched.
  std::any private_data;
};

Status validate_capabilities(const DeviceCapabilities& caps);

bool supports_page_size(const DeviceCapabilities& caps, std::uint64_t size);

}  // namespace gmem
