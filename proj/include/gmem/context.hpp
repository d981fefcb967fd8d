#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include "gmem/async_queue.hpp"
#include "gmem/device.hpp"
#include "gmem/logical_table.hpp"
#include "gmem/metrics.hpp"
#include "gmem/page_table.hpp"
#include "gmem/phys_pool.hpp"
#include "gmem/status.hpp"
#include "gmem/tlb.hpp"
#include "gmem/types.hpp"
#include "gmem/va_allocator.hpp"

namespace gmem {

class SimEngine;

struct ContextOptions {
  std::size_t async_batch = AsyncQueue::kDefaultBatch;
  std::uint64_t flush_interval = AsyncQueue::kDefaultInterval;
  // Minimum number of frames evicted when a fault runs out of memory.
  std::size_t eviction_batch = 16;
  std::size_t tlb_capacity = 64;
  std::uint64_t host_pool_max = 64ull << 30;
  bool migration_log = false;
};

struct RegionInfo {
  RegionId id;
  SpaceId space;
  VirtAddr start;
  std::uint64_t size = 0;
  Prot prot;
  std::optional<DeviceId> pinned;
  PlacementMode mode = PlacementMode::kUnique;
  bool mapped = false;
  std::uint64_t map_page_size = 0;
  VaRange span() const { return {start.value, start.value + size}; }
};

enum class BackingKind : std::uint8_t { kUnbackedZeroFill, kBacked, kSwapped };

struct BackingState {
  BackingKind kind = BackingKind::kUnbackedZeroFill;
  PhysAddr frame;
  std::vector<DeviceId> holders;  // ascending
  bool wired = false;
  std::uint64_t last_access_tick = 0;
};

struct MapFlags {
  std::uint64_t page_size = kBasePageSize;
  bool async = false;
};

struct UnmapFlags {
  bool async = false;
};

// The memory manager: a registry of devices, address spaces, regions and
// mapping sets, plus the host pool and the global counters.
//
// Every object is named by a handle. Operations on one address space are
// serialized by that space's lock; simulated device accesses bypass it and
// go through the device's page table and TLB only.
class Context {
 public:
  explicit Context(ContextOptions opts = {});
  ~Context();

  Context(const Context&) = delete;
  Context& operator=(const Context&) = delete;

  // Devices.
  Expected<DeviceId> device_create(MmuDescriptor mmu, DeviceCapabilities caps,
                                   std::size_t tlb_capacity = 0);
  Status device_destroy(DeviceId dev);
  Status device_switch(DeviceId dev, SpaceId as);
  Status device_detach(DeviceId dev, SpaceId as);
  Status register_physmem(DeviceId dev, std::uint64_t begin, std::uint64_t end);
  Status set_prep_granularity(DeviceId dev, std::uint64_t bytes);
  Status dev_fault(DeviceId dev, VirtAddr va, Prot access);
  Status host_fault(VirtAddr va, Prot access);

  // Address spaces.
  Expected<SpaceId> as_create(std::uint64_t begin, std::uint64_t end, AllocPolicy policy);
  Status as_destroy(SpaceId as);
  Status as_attach(SpaceId as, DeviceId dev, AttachMode mode, bool activate);
  Expected<RegionInfo> as_alloc(SpaceId as, const AllocRequest& req);
  Expected<RegionInfo> as_lookup(SpaceId as, VirtAddr addr) const;
  Status as_synchronize(SpaceId as);
  Status as_tick(SpaceId as, std::uint64_t n = 1);
  Status as_configure_async(SpaceId as, std::size_t batch, std::uint64_t flush_interval);
  // Host space whose regions and contents the CPU device inherits when it
  // attaches to another space. nullopt disables inheritance.
  Status set_host_inherit_space(std::optional<SpaceId> as);

  // Regions and mappings.
  Status region_dealloc(RegionId r);
  Status region_set_policy(RegionId r, std::optional<DeviceId> dev, PlacementMode mode);
  Status region_map(RegionId r, Prot prot, std::span<const PhysAddr> frames,
                    std::optional<MappingSetId> set = std::nullopt, MapFlags flags = {},
                    Callback cb = nullptr);
  Status region_unmap(RegionId r, UnmapFlags flags = {}, Callback cb = nullptr);
  Expected<MappingSetId> mapping_set_create(SpaceId as);
  Status mapping_set_destroy(MappingSetId set);
  Status mapping_set_unmap(MappingSetId set, UnmapFlags flags = {}, Callback cb = nullptr);
  Expected<std::vector<RegionId>> mapping_set_members(MappingSetId set) const;
  Expected<RegionInfo> region_info(RegionId r) const;
  Expected<BackingState> logical_lookup(SpaceId as, VirtAddr va) const;

  // Physical memory. `dev` names the pool; kCpuDevice is the host pool.
  Expected<std::vector<PhysAddr>> phys_alloc(DeviceId dev, std::size_t n_pages, bool contiguous);
  Status phys_free(std::span<const PhysAddr> frames);
  Status wire(std::span<const PhysAddr> frames);
  Status unwire(std::span<const PhysAddr> frames);
  Status prepare_zero(DeviceId dev, std::span<const PhysAddr> frames, std::uint64_t granularity);
  Status evict(DeviceId dev, std::size_t n_pages, SpaceId as);
  Expected<PhysAddr> migrate(SpaceId as, VirtAddr page, DeviceId to);
  Status shootdown(SpaceId as, VaRange range, std::span<const DeviceId> holders);

  // Diagnostics.
  const Metrics& metrics() const { return metrics_; }
  Metrics& metrics() { return metrics_; }
  std::size_t device_count() const;
  bool device_exists(DeviceId dev) const;
  std::optional<SpaceId> active_space(DeviceId dev) const;
  std::optional<AttachMode> attach_mode(DeviceId dev, SpaceId as) const;
  const PageTable* page_table(DeviceId dev, SpaceId as) const;
  Tlb* tlb(DeviceId dev);
  PhysMemPool* pool(DeviceId dev);
  PhysMemPool& host_pool() { return *host_pool_; }
  std::optional<DeviceCapabilities> capabilities(DeviceId dev) const;
  std::vector<RegionInfo> regions(SpaceId as) const;
  // Regions as enumerated through one attached device's view.
  Expected<std::vector<RegionInfo>> regions_via(DeviceId dev, SpaceId as) const;
  std::vector<std::pair<std::uint64_t, BackingState>> logical_entries(SpaceId as) const;
  std::vector<DeviceId> attached_devices(SpaceId as) const;
  std::uint64_t device_broadcasts(DeviceId dev) const;
  std::size_t pending_async(SpaceId as) const;
  AsyncQueueStats async_stats(SpaceId as) const;
  std::uint64_t cache_hits(SpaceId as) const;
  std::size_t space_count() const;
  // Reads the current contents at `va` without faulting or traffic.
  // Unbacked bytes read as zero.
  Status debug_read(SpaceId as, VirtAddr va, std::span<std::uint8_t> out) const;
  std::uint64_t clock() const { return clock_.load(std::memory_order_relaxed); }
  const ContextOptions& options() const { return opts_; }

  // Frame allocation observer across every pool (host pool included).
  using AllocObserver = std::function<void(std::span<const PhysAddr>)>;
  void set_alloc_observer(AllocObserver obs);

  struct DeviceState;
  struct SpaceState;

 private:
  friend class SimEngine;

  struct Attachment;
  struct Region;
  struct MappingSetState;

  std::shared_ptr<DeviceState> find_device(DeviceId dev) const;
  std::shared_ptr<SpaceState> find_space(SpaceId as) const;
  std::shared_ptr<SpaceState> space_of_region(RegionId r) const;
  std::shared_ptr<SpaceState> space_of_set(MappingSetId s) const;
  PhysMemPool* pool_for(DeviceId tag) const;

  // Helpers below expect the space lock held.
  Status fault_locked(DeviceState& dev, SpaceState& sp, VirtAddr va, Prot access);
  Status detach_locked(DeviceState& dev, SpaceState& sp);
  Status region_unmap_locked(SpaceState& sp, Region& reg, UnmapFlags flags, Callback cb);
  Status region_dealloc_locked(SpaceState& sp, Region& reg);
  void drain_pending(SpaceState& sp, const VaRange& r);
  std::vector<DeviceId> devices_of(const SpaceState& sp,
                                   const std::vector<PageTable*>& tables) const;
  // Destroys the translations of the given pages in every holder and
  // shoots down the affected TLBs with one broadcast per device.
  void unmap_holders(SpaceState& sp, std::span<const std::uint64_t> pages);
  void broadcast(SpaceState& sp, std::span<const DeviceId> devices,
                 std::span<const VaRange> ranges);
  void invalidate_device(DeviceState& dev, std::span<const VaRange> ranges);
  void install(SpaceState& sp, PageTable& table, std::uint64_t page, const LogicalEntry& e);
  Expected<std::vector<PhysAddr>> alloc_for_fault(SpaceState& sp, PhysMemPool& pool,
                                                  std::size_t n);
  Status evict_locked(SpaceState& sp, PhysMemPool& pool, std::size_t want, std::size_t need);
  Status move_page(SpaceState& sp, std::uint64_t page, PhysMemPool& to);
  void copy_frame(PhysAddr from, PhysAddr to);
  void zero_frames(DeviceState* dev, std::span<const PhysAddr> frames);
  void release_frames(std::span<const PhysAddr> frames);
  void free_entry_frame(const LogicalEntry& e);
  void migrate_pool_out(SpaceState& sp, DeviceId pool_owner);
  void inherit_host_space(SpaceState& dst, PageTable& cpu_table);
  BackingState to_backing(const SpaceState& sp, const LogicalEntry& e) const;
  std::uint64_t advance_clock() { return clock_.fetch_add(1, std::memory_order_relaxed) + 1; }

  ContextOptions opts_;
  Metrics metrics_;
  std::unique_ptr<PhysMemPool> host_pool_;
  std::atomic<std::uint64_t> clock_{0};

  mutable std::mutex registry_mu_;
  std::map<DeviceId, std::shared_ptr<DeviceState>> devices_;
  std::map<SpaceId, std::shared_ptr<SpaceState>> spaces_;
  std::map<RegionId, SpaceId> region_owner_;
  std::map<MappingSetId, SpaceId> set_owner_;
  std::uint64_t next_device_ = 0;
  std::uint64_t next_space_ = 0;
  std::uint64_t next_region_ = 0;
  std::uint64_t next_set_ = 0;
  std::uint64_t next_table_ = 0;
  std::optional<SpaceId> inherit_space_;
  AllocObserver observer_;

  // Pool lookup by tag without the registry lock, for the access path.
  std::unique_ptr<std::atomic<PhysMemPool*>[]> pools_;
};

}  // namespace gmem
