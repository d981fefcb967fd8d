#include <algorithm>
#include <cstring>
#include <set>

#include "core/context_state.hpp"
#include "gmem/context.hpp"

namespace gmem {

Status Context::region_map(RegionId r, Prot prot, std::span<const PhysAddr> frames,
                           std::optional<MappingSetId> set, MapFlags flags, Callback cb) {
  auto sp = space_of_region(r);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  auto it = sp->regions.find(r);
  if (it == sp->regions.end()) return Status::kNotFound;
  Region& reg = it->second;

  if (reg.mapped) return Status::kInvalidArg;
  if (!reg.prot.permits(prot)) return Status::kProtection;
  const std::uint64_t ps = flags.page_size;
  if (ps != kBasePageSize && ps != kLargePageSize) return Status::kInvalidArg;
  if (!is_aligned(reg.start, ps) || !is_aligned(reg.size, ps) || frames.size() != reg.size / ps)
    return Status::kInvalidArg;
  if (set && !sp->sets.count(*set)) return Status::kNotFound;
  for (const auto& a : sp->attached) {
    auto ds = find_device(a.dev);
    if (ds && !supports_page_size(ds->caps, ps)) return Status::kUnsupported;
  }

  // Expand to base pages and check every one is allocated and unclaimed.
  std::vector<PhysAddr> pages_pa;
  pages_pa.reserve(reg.size / kBasePageSize);
  std::set<PhysAddr> seen;
  for (const auto& f : frames) {
    PhysMemPool* pool = pool_for(f.pool);
    if (!pool || !is_aligned(f.addr, ps)) return Status::kInvalidArg;
    for (std::uint64_t off = 0; off < ps; off += kBasePageSize) {
      const PhysAddr pa = f + off;
      const auto q = pool->queue_of(pa);
      if (!q || *q == FrameQueue::kFree || pool->backing(pa) || !seen.insert(pa).second)
        return Status::kInvalidArg;
      pages_pa.push_back(pa);
    }
  }

  drain_pending(*sp, reg.span());

  // Fault-backed contents are discarded; the caller's frames take over.
  const auto old = sp->logical.pages_in(reg.start, reg.end());
  if (!old.empty()) {
    unmap_holders(*sp, old);
    for (auto page : old) {
      free_entry_frame(*sp->logical.find(page));
      sp->logical.erase(page);
    }
  }

  const auto tables = sp->all_tables();
  for (std::size_t i = 0; i < pages_pa.size(); ++i) {
    const std::uint64_t page = reg.start + i * kBasePageSize;
    const PhysAddr pa = pages_pa[i];
    PhysMemPool* pool = pool_for(pa.pool);
    LogicalEntry e;
    e.frame = pa;
    e.wired = true;
    e.leaf_size = ps;
    e.prot = prot;
    e.holders = tables;
    if (pool->queue_of(pa) == FrameQueue::kActive) {
      const PhysAddr one[] = {pa};
      pool->wire(one);
      e.wired_by_map = true;
    }
    pool->set_backing(pa, FrameBacking{sp->id, page});
    const LogicalEntry& stored = sp->logical.set(page, std::move(e));
    if (is_aligned(page, ps))
      for (PageTable* t : tables) install(*sp, *t, page, stored);
  }

  reg.mapped = true;
  reg.page_size = ps;
  if (set) {
    reg.sets.insert(*set);
    auto& members = sp->sets.at(*set).members;
    if (std::find(members.begin(), members.end(), r) == members.end()) members.push_back(r);
  }

  if (flags.async) {
    AsyncOp op;
    op.kind = AsyncOp::Kind::kCompletion;
    op.region = r;
    op.callback = std::move(cb);
    sp->queue->enqueue(std::move(op));
  } else if (cb) {
    cb();
  }
  return Status::kSuccess;
}

Status Context::region_unmap(RegionId r, UnmapFlags flags, Callback cb) {
  auto sp = space_of_region(r);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  auto it = sp->regions.find(r);
  if (it == sp->regions.end()) return Status::kNotFound;
  return region_unmap_locked(*sp, it->second, flags, std::move(cb));
}

Status Context::region_unmap_locked(SpaceState& sp, Region& reg, UnmapFlags flags, Callback cb) {
  if (!reg.mapped) return Status::kNotFound;

  std::set<PageTable*> holder_tables;
  std::vector<PhysAddr> frames;
  for (auto page : sp.logical.pages_in(reg.start, reg.end())) {
    LogicalEntry& e = *sp.logical.find(page);
    if (is_aligned(page, e.leaf_size)) {
      for (PageTable* t : e.holders) {
        if (t->unmap(VirtAddr{page}, e.leaf_size)) {
          holder_tables.insert(t);
          for (auto d : t->sharers())
            if (auto ds = find_device(d)) ds->mmu.ops.pte_destroy(VirtAddr{page}, e.leaf_size);
        }
      }
    }
    PhysMemPool* pool = pool_for(e.frame.pool);
    if (pool) {
      const PhysAddr one[] = {e.frame};
      if (e.wired_by_map) pool->unwire(one);
      pool->set_backing(e.frame, std::nullopt);
    }
    frames.push_back(e.frame);
    sp.logical.erase(page);
  }
  reg.mapped = false;
  reg.page_size = 0;

  std::vector<DeviceId> devices;
  for (PageTable* t : holder_tables)
    devices.insert(devices.end(), t->sharers().begin(), t->sharers().end());
  std::sort(devices.begin(), devices.end());
  devices.erase(std::unique(devices.begin(), devices.end()), devices.end());

  if (!flags.async) {
    const VaRange span[] = {reg.span()};
    broadcast(sp, devices, span);
    if (cb) cb();
    return Status::kSuccess;
  }

  // Frames stay out of circulation until the batched invalidation lands.
  for (const auto& f : frames) {
    if (PhysMemPool* pool = pool_for(f.pool)) {
      const PhysAddr one[] = {f};
      pool->quarantine(one);
    }
  }
  AsyncOp op;
  op.kind = AsyncOp::Kind::kUnmapRange;
  op.region = reg.id;
  for (auto d : devices) op.invalidations.push_back({d, reg.span()});
  op.quarantined = std::move(frames);
  op.callback = std::move(cb);
  sp.queue->enqueue(std::move(op));
  return Status::kSuccess;
}

void Context::release_frames(std::span<const PhysAddr> frames) {
  for (const auto& f : frames) {
    if (PhysMemPool* pool = pool_for(f.pool)) {
      const PhysAddr one[] = {f};
      pool->release_quarantine(one);
    }
  }
}

Expected<MappingSetId> Context::mapping_set_create(SpaceId as) {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  MappingSetId id;
  {
    std::lock_guard rlk(registry_mu_);
    id = MappingSetId{next_set_++};
    set_owner_[id] = as;
  }
  sp->sets.emplace(id, MappingSetState{id, {}});
  return id;
}

Status Context::mapping_set_destroy(MappingSetId set) {
  auto sp = space_of_set(set);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  auto it = sp->sets.find(set);
  if (it == sp->sets.end()) return Status::kNotFound;
  for (auto rid : it->second.members) {
    auto rit = sp->regions.find(rid);
    if (rit != sp->regions.end()) rit->second.sets.erase(set);
  }
  sp->sets.erase(it);
  std::lock_guard rlk(registry_mu_);
  set_owner_.erase(set);
  return Status::kSuccess;
}

Status Context::mapping_set_unmap(MappingSetId set, UnmapFlags flags, Callback cb) {
  auto sp = space_of_set(set);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  auto it = sp->sets.find(set);
  if (it == sp->sets.end()) return Status::kNotFound;
  const auto members = it->second.members;
  for (auto rid : members) {
    auto rit = sp->regions.find(rid);
    if (rit != sp->regions.end() && rit->second.mapped)
      region_unmap_locked(*sp, rit->second, flags, nullptr);
  }
  if (flags.async && sp->queue->pending() > 0) {
    // Queued behind the member unmaps, so it fires after all of them.
    AsyncOp op;
    op.kind = AsyncOp::Kind::kCompletion;
    op.callback = std::move(cb);
    sp->queue->enqueue(std::move(op));
  } else if (cb) {
    cb();
  }
  return Status::kSuccess;
}

Expected<std::vector<RegionId>> Context::mapping_set_members(MappingSetId set) const {
  auto sp = space_of_set(set);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  auto it = sp->sets.find(set);
  if (it == sp->sets.end()) return Status::kNotFound;
  return it->second.members;
}

BackingState Context::to_backing(const SpaceState& sp, const LogicalEntry& e) const {
  BackingState b;
  b.frame = e.frame;
  b.wired = e.wired;
  b.holders = devices_of(sp, e.holders);
  std::sort(b.holders.begin(), b.holders.end());
  if (const PhysMemPool* pool = pool_for(e.frame.pool)) b.last_access_tick = pool->last_access(e.frame);
  const bool parked = !e.wired && e.holders.empty() && e.frame.pool == kCpuDevice;
  b.kind = parked ? BackingKind::kSwapped : BackingKind::kBacked;
  return b;
}

Expected<BackingState> Context::logical_lookup(SpaceId as, VirtAddr va) const {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  if (!sp->region_at(va.value)) return Status::kNotFound;
  const LogicalEntry* e = sp->logical.find(align_down(va.value, kBasePageSize));
  if (!e) return BackingState{};
  return to_backing(*sp, *e);
}

std::vector<std::pair<std::uint64_t, BackingState>> Context::logical_entries(SpaceId as) const {
  std::vector<std::pair<std::uint64_t, BackingState>> out;
  auto sp = find_space(as);
  if (!sp) return out;
  std::lock_guard lk(sp->mu);
  for (const auto& [page, e] : sp->logical.entries()) out.emplace_back(page, to_backing(*sp, e));
  return out;
}

Status Context::debug_read(SpaceId as, VirtAddr va, std::span<std::uint8_t> out) const {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  std::uint64_t addr = va.value;
  std::size_t done = 0;
  while (done < out.size()) {
    const std::uint64_t page = align_down(addr, kBasePageSize);
    const std::size_t n = std::min<std::uint64_t>(out.size() - done, page + kBasePageSize - addr);
    if (!sp->region_at(addr)) return Status::kNotFound;
    const LogicalEntry* e = sp->logical.find(page);
    const PhysMemPool* pool = e ? pool_for(e->frame.pool) : nullptr;
    if (pool)
      std::memcpy(out.data() + done, pool->bytes(e->frame + (addr - page)), n);
    else
      std::memset(out.data() + done, 0, n);
    done += n;
    addr += n;
  }
  return Status::kSuccess;
}

}  // namespace gmem
