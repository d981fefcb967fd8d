#pragma once

#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include "gmem/page_table.hpp"
#include "gmem/status.hpp"
#include "gmem/types.hpp"

namespace gmem {

struct TlbEntry {
  std::uint64_t va_base = 0;
  std::uint64_t size = kBasePageSize;
  PhysAddr frame;
  Prot prot;

  bool covers(std::uint64_t va) const { return va >= va_base && va < va_base + size; }
};

struct TlbStats {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t fills = 0;
  std::uint64_t evictions = 0;
  std::uint64_t invalidations = 0;
};

// Per-device FIFO translation cache.
//
// Fills are tagged with the invalidation generation observed before the
// page-table walk; a fill racing with an invalidation is dropped, so the
// cache never resurrects a translation that was shot down.
class Tlb {
 public:
  explicit Tlb(std::size_t capacity = 64) : capacity_(capacity == 0 ? 1 : capacity) {}

  std::optional<TlbEntry> lookup(VirtAddr va);
  std::uint64_t generation() const;
  void fill(const TlbEntry& entry, std::uint64_t observed_generation);
  // Removes every entry overlapping any range; returns the count removed.
  std::size_t invalidate(std::span<const VaRange> ranges);
  std::size_t flush();

  std::vector<TlbEntry> snapshot() const;
  TlbStats stats() const;
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::size_t capacity_;
  std::vector<TlbEntry> entries_;  // oldest first
  std::size_t mru_ = 0;
  std::uint64_t generation_ = 0;
  TlbStats stats_;
};

// MMU translation: TLB first, then a page-table walk that refills the TLB.
// kNotFound when no leaf covers `va`; kProtection when the leaf forbids
// `access` (nothing is cached in that case).
Expected<PhysAddr> translate(const PageTable& pt, Tlb& tlb, VirtAddr va, Prot access);

}  // namespace gmem
