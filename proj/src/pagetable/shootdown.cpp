#include <algorithm>
#include <map>
#include <set>

#include "core/context_state.hpp"
#include "gmem/context.hpp"

namespace gmem {

void Context::invalidate_device(DeviceState& dev, std::span<const VaRange> ranges) {
  // Waits out accesses that translated before the caller cleared the
  // leaves; later accesses miss in the table.
  std::unique_lock guard(dev.inflight);
  dev.mmu.ops.tlb_invalidate_range(ranges);
  const auto removed = dev.tlb.invalidate(ranges);
  metrics_.add_broadcast(removed);
  dev.broadcasts.fetch_add(1, std::memory_order_relaxed);
}

void Context::broadcast(SpaceState& sp, std::span<const DeviceId> devices,
                        std::span<const VaRange> ranges) {
  (void)sp;
  if (ranges.empty()) return;
  const std::set<DeviceId> distinct(devices.begin(), devices.end());
  const auto merged = coalesce(std::vector<VaRange>(ranges.begin(), ranges.end()));
  for (auto d : distinct)
    if (auto ds = find_device(d)) invalidate_device(*ds, merged);
}

Status Context::shootdown(SpaceId as, VaRange range, std::span<const DeviceId> holders) {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  if (range.begin >= range.end) return Status::kInvalidArg;
  std::lock_guard lk(sp->mu);
  const VaRange r[] = {range};
  broadcast(*sp, holders, r);
  return Status::kSuccess;
}

std::vector<DeviceId> Context::devices_of(const SpaceState& sp,
                                          const std::vector<PageTable*>& tables) const {
  std::vector<DeviceId> out;
  for (const auto& a : sp.attached)
    if (std::find(tables.begin(), tables.end(), a.table) != tables.end()) out.push_back(a.dev);
  return out;
}

void Context::install(SpaceState& sp, PageTable& table, std::uint64_t page, const LogicalEntry& e) {
  const std::uint64_t base = align_down(page, e.leaf_size);
  table.map(VirtAddr{base}, e.frame, e.leaf_size, e.prot);
  for (auto d : table.sharers())
    if (auto ds = find_device(d)) ds->mmu.ops.pte_install(VirtAddr{base}, e.frame, e.leaf_size, e.prot);
  (void)sp;
}

void Context::unmap_holders(SpaceState& sp, std::span<const std::uint64_t> pages) {
  std::map<PageTable*, std::vector<VaRange>> cleared;
  for (auto page : pages) {
    LogicalEntry* e = sp.logical.find(page);
    if (!e) continue;
    const std::uint64_t base = align_down(page, e->leaf_size);
    for (PageTable* t : e->holders) {
      if (!t->unmap(VirtAddr{base}, e->leaf_size)) continue;  // superpage already gone
      cleared[t].push_back({base, base + e->leaf_size});
      for (auto d : t->sharers())
        if (auto ds = find_device(d)) ds->mmu.ops.pte_destroy(VirtAddr{base}, e->leaf_size);
    }
    e->holders.clear();
  }
  std::map<DeviceId, std::vector<VaRange>> per_device;
  for (auto& [t, ranges] : cleared)
    for (auto d : t->sharers()) {
      auto& v = per_device[d];
      v.insert(v.end(), ranges.begin(), ranges.end());
    }
  for (auto& [d, ranges] : per_device) {
    const DeviceId one[] = {d};
    broadcast(sp, one, ranges);
  }
}

}  // namespace gmem
