#include <algorithm>
#include <cstring>

#include "core/context_state.hpp"
#include "gmem/context.hpp"

namespace gmem {

Status Context::register_physmem(DeviceId dev, std::uint64_t begin, std::uint64_t end) {
  auto ds = find_device(dev);
  if (!ds) return Status::kNotFound;
  if (dev == kCpuDevice || ds->pool.load() != nullptr) return Status::kBusy;
  if (!ds->caps.has_local_memory) return Status::kUnsupported;
  if (begin >= end || !is_aligned(begin, kBasePageSize) || !is_aligned(end, kBasePageSize))
    return Status::kInvalidArg;
  std::lock_guard lk(registry_mu_);
  ds->own_pool = std::make_unique<PhysMemPool>(dev, begin, end);
  if (observer_) ds->own_pool->set_alloc_observer(observer_);
  ds->pool.store(ds->own_pool.get(), std::memory_order_release);
  pools_[dev.value].store(ds->own_pool.get(), std::memory_order_release);
  return Status::kSuccess;
}

Expected<std::vector<PhysAddr>> Context::phys_alloc(DeviceId dev, std::size_t n_pages,
                                                    bool contiguous) {
  PhysMemPool* pool = pool_for(dev);
  if (!pool) return Status::kNotFound;
  if (n_pages == 0) return Status::kInvalidArg;
  // Runs of whole superpages come back superpage-aligned.
  const std::uint64_t align =
      contiguous && n_pages % kPagesPerLarge == 0 ? kLargePageSize : kBasePageSize;
  return pool->alloc(n_pages, contiguous, align);
}

Status Context::phys_free(std::span<const PhysAddr> frames) {
  for (const auto& f : frames) {
    PhysMemPool* pool = pool_for(f.pool);
    if (!pool) return Status::kInvalidArg;
    if (pool->backing(f)) return Status::kBusy;
  }
  for (const auto& f : frames) {
    const PhysAddr one[] = {f};
    if (auto st = pool_for(f.pool)->free(one); st != Status::kSuccess) return st;
  }
  return Status::kSuccess;
}

Status Context::wire(std::span<const PhysAddr> frames) {
  for (const auto& f : frames) {
    PhysMemPool* pool = pool_for(f.pool);
    if (!pool || pool->queue_of(f) != FrameQueue::kActive) return Status::kInvalidArg;
  }
  for (const auto& f : frames) {
    const PhysAddr one[] = {f};
    pool_for(f.pool)->wire(one);
  }
  return Status::kSuccess;
}

Status Context::unwire(std::span<const PhysAddr> frames) {
  for (const auto& f : frames) {
    PhysMemPool* pool = pool_for(f.pool);
    if (!pool || pool->queue_of(f) != FrameQueue::kWired) return Status::kInvalidArg;
  }
  for (const auto& f : frames) {
    const PhysAddr one[] = {f};
    pool_for(f.pool)->unwire(one);
  }
  return Status::kSuccess;
}

void Context::zero_frames(DeviceState* dev, std::span<const PhysAddr> frames) {
  for (const auto& f : frames) {
    PhysMemPool* pool = pool_for(f.pool);
    std::memset(pool->bytes(f), 0, kBasePageSize);
    if (dev) dev->mmu.ops.page_zero(f, kBasePageSize);
  }
}

Status Context::prepare_zero(DeviceId dev, std::span<const PhysAddr> frames,
                             std::uint64_t granularity) {
  auto ds = find_device(dev);
  if (!ds) return Status::kNotFound;
  if (!supports_page_size(ds->caps, granularity)) return Status::kInvalidArg;
  if (frames.size() * kBasePageSize != granularity) return Status::kInvalidArg;
  for (const auto& f : frames) {
    PhysMemPool* pool = pool_for(f.pool);
    if (!pool || !pool->contains(f) || pool->queue_of(f) == FrameQueue::kFree)
      return Status::kInvalidArg;
  }
  zero_frames(ds.get(), frames);
  metrics_.add_zero_fill(granularity);
  return Status::kSuccess;
}

void Context::copy_frame(PhysAddr from, PhysAddr to) {
  const PhysMemPool* src = pool_for(from.pool);
  PhysMemPool* dst = pool_for(to.pool);
  std::memcpy(dst->bytes(to), src->bytes(from), kBasePageSize);
}

namespace {

MigrationDirection direction_of(DeviceId from, DeviceId to) {
  if (from == kCpuDevice) return MigrationDirection::kHostToDev;
  if (to == kCpuDevice) return MigrationDirection::kDevToHost;
  return MigrationDirection::kDevToDev;
}

}  // namespace

void Context::free_entry_frame(const LogicalEntry& e) {
  PhysMemPool* pool = pool_for(e.frame.pool);
  if (!pool) return;
  pool->set_backing(e.frame, std::nullopt);
  const PhysAddr one[] = {e.frame};
  if (e.wired) {
    if (e.wired_by_map) pool->unwire(one);
    return;  // caller-owned
  }
  pool->free(one);
}

Expected<std::vector<PhysAddr>> Context::alloc_for_fault(SpaceState& sp, PhysMemPool& pool,
                                                         std::size_t n) {
  auto frames = pool.alloc(n, false);
  if (frames || frames.status() != Status::kNoMem || pool.unbounded()) return frames;
  const std::size_t want = std::max(n, opts_.eviction_batch);
  if (evict_locked(sp, pool, want, n) != Status::kSuccess) return Status::kNoMem;
  return pool.alloc(n, false);
}

Status Context::evict_locked(SpaceState& sp, PhysMemPool& pool, std::size_t want,
                             std::size_t need) {
  if (pool.unbounded()) return Status::kInvalidArg;
  const auto victims = pool.lru_candidates(sp.id, want);
  if (victims.size() < need || victims.empty()) return Status::kNoMem;

  std::vector<std::uint64_t> pages;
  pages.reserve(victims.size());
  for (const auto& f : victims) pages.push_back(pool.backing(f)->va);
  unmap_holders(sp, pages);

  for (std::size_t i = 0; i < pages.size(); ++i) {
    LogicalEntry& e = *sp.logical.find(pages[i]);
    auto host = host_pool_->alloc(1, false);
    if (!host) return host.status();
    const PhysAddr to = host->front();
    copy_frame(e.frame, to);
    host_pool_->touch(to, pool.last_access(e.frame));
    host_pool_->set_backing(to, FrameBacking{sp.id, pages[i]});
    metrics_.record_migration({MigrationDirection::kDevToHost, kBasePageSize, e.frame.pool, kCpuDevice});
    free_entry_frame(e);
    e.frame = to;
  }
  metrics_.add_evicted(pages.size());
  return Status::kSuccess;
}

Status Context::evict(DeviceId dev, std::size_t n_pages, SpaceId as) {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  PhysMemPool* pool = dev == kCpuDevice ? nullptr : pool_for(dev);
  if (!pool) return Status::kInvalidArg;
  if (n_pages == 0) return Status::kSuccess;
  std::lock_guard lk(sp->mu);
  if (pool->evictable_pages(sp->id) < n_pages) return Status::kNoMem;
  return evict_locked(*sp, *pool, n_pages, n_pages);
}

Status Context::move_page(SpaceState& sp, std::uint64_t page, PhysMemPool& to) {
  LogicalEntry* e = sp.logical.find(page);
  if (!e) return Status::kNotFound;
  const std::uint64_t pages[] = {page};
  unmap_holders(sp, pages);
  auto frames = alloc_for_fault(sp, to, 1);
  if (!frames) return frames.status();
  e = sp.logical.find(page);
  const PhysAddr dst = frames->front();
  copy_frame(e->frame, dst);
  to.touch(dst, pool_for(e->frame.pool)->last_access(e->frame));
  to.set_backing(dst, FrameBacking{sp.id, page});
  metrics_.record_migration(
      {direction_of(e->frame.pool, to.owner()), kBasePageSize, e->frame.pool, to.owner()});
  free_entry_frame(*e);
  e->frame = dst;
  return Status::kSuccess;
}

Expected<PhysAddr> Context::migrate(SpaceId as, VirtAddr page, DeviceId to) {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  PhysMemPool* dst = pool_for(to);
  if (!dst) return Status::kInvalidArg;
  std::lock_guard lk(sp->mu);
  const std::uint64_t p = align_down(page.value, kBasePageSize);
  if (!sp->region_at(p)) return Status::kNotFound;
  drain_pending(*sp, {p, p + kBasePageSize});
  LogicalEntry* e = sp->logical.find(p);
  if (!e) return Status::kNotFound;
  if (e->wired) return Status::kBusy;
  if (e->frame.pool == to) return Status::kInvalidArg;
  if (auto st = move_page(*sp, p, *dst); st != Status::kSuccess) return st;
  return sp->logical.find(p)->frame;
}

void Context::migrate_pool_out(SpaceState& sp, DeviceId owner) {
  PhysMemPool* pool = pool_for(owner);
  if (!pool || pool == host_pool_.get()) return;
  std::vector<std::uint64_t> pages;
  for (const auto& [page, e] : sp.logical.entries())
    if (e.frame.pool == owner) pages.push_back(page);
  if (pages.empty()) return;

  unmap_holders(sp, pages);

  for (auto page : pages) {
    LogicalEntry& e = *sp.logical.find(page);
    auto host = host_pool_->alloc(1, false);
    if (!host) return;
    const PhysAddr to = host->front();
    copy_frame(e.frame, to);
    host_pool_->set_backing(to, FrameBacking{sp.id, page});
    metrics_.record_migration({MigrationDirection::kDevToHost, kBasePageSize, owner, kCpuDevice});
    free_entry_frame(e);
    e.frame = to;
    if (e.wired) {
      // Wired pages stay visible everywhere, now as base pages.
      const PhysAddr one[] = {to};
      host_pool_->wire(one);
      e.wired_by_map = true;
      e.leaf_size = kBasePageSize;
      e.holders = sp.all_tables();
      for (auto* t : e.holders) install(sp, *t, page, e);
    }
  }
}

}  // namespace gmem
