#pragma once

// Internal state behind Context handles. Shared by the library's sources
// only.

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <vector>

#include "gmem/context.hpp"

namespace gmem {

struct Context::DeviceState {
  DeviceId id;
  MmuDescriptor mmu;
  DeviceCapabilities caps;
  std::unique_ptr<PhysMemPool> own_pool;
  // The device's local pool; the host pool for the CPU device.
  std::atomic<PhysMemPool*> pool{nullptr};
  Tlb tlb;

  // Held shared by every simulated access for the duration of one
  // translation and byte transfer; held exclusively by TLB invalidation,
  // space switches and table teardown.
  std::shared_mutex inflight;
  std::atomic<int> busy{0};
  std::atomic<PageTable*> active_table{nullptr};
  std::atomic<std::uint64_t> prep_granularity{kBasePageSize};
  std::atomic<std::uint64_t> broadcasts{0};

  // Guards the fields below.
  mutable std::mutex mu;
  std::optional<SpaceId> active;
  std::map<SpaceId, PageTable*> attachments;

  DeviceState(DeviceId i, MmuDescriptor m, DeviceCapabilities c, std::size_t tlb_capacity)
      : id(i), mmu(std::move(m)), caps(std::move(c)), tlb(tlb_capacity) {}
};

struct Context::Attachment {
  DeviceId dev;
  PageTable* table = nullptr;
  AttachMode mode = AttachMode::kCoherent;
};

struct Context::Region {
  RegionId id;
  std::uint64_t start = 0;
  std::uint64_t size = 0;
  Prot prot;
  std::optional<DeviceId> pinned;
  PlacementMode mode = PlacementMode::kUnique;
  bool mapped = false;
  std::uint64_t page_size = 0;
  std::set<MappingSetId> sets;

  std::uint64_t end() const { return start + size; }
  VaRange span() const { return {start, start + size}; }
};

struct Context::MappingSetState {
  MappingSetId id;
  std::vector<RegionId> members;
};

struct Context::SpaceState {
  SpaceId id;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  AllocPolicy policy;

  mutable std::recursive_mutex mu;
  VaAllocator va;
  std::map<RegionId, Region> regions;
  std::vector<Attachment> attached;
  std::vector<std::unique_ptr<PageTable>> tables;
  LogicalPageTable logical;
  std::unique_ptr<AsyncQueue> queue;
  std::map<MappingSetId, MappingSetState> sets;
  std::atomic<int> faults{0};
  std::uint64_t cache_hits = 0;

  SpaceState(SpaceId i, std::uint64_t b, std::uint64_t e, AllocPolicy p)
      : id(i), begin(b), end(e), policy(p), va(b, e, p) {}

  Region* region_at(std::uint64_t addr) {
    const auto* span = va.lookup(addr);
    if (!span) return nullptr;
    auto it = regions.find(span->region);
    return it == regions.end() ? nullptr : &it->second;
  }
  const Region* region_at(std::uint64_t addr) const {
    return const_cast<SpaceState*>(this)->region_at(addr);
  }
  const Attachment* attachment(DeviceId d) const {
    for (const auto& a : attached)
      if (a.dev == d) return &a;
    return nullptr;
  }
  std::vector<PageTable*> all_tables() const {
    std::vector<PageTable*> out;
    for (const auto& t : tables) out.push_back(t.get());
    return out;
  }
};

// Counts an operation in flight on a device or space for its lifetime.
class BusyGuard {
 public:
  explicit BusyGuard(std::atomic<int>& c) : c_(c) { c_.fetch_add(1, std::memory_order_acq_rel); }
  ~BusyGuard() { c_.fetch_sub(1, std::memory_order_acq_rel); }
  BusyGuard(const BusyGuard&) = delete;
  BusyGuard& operator=(const BusyGuard&) = delete;

 private:
  std::atomic<int>& c_;
};

}  // namespace gmem
