#include <algorithm>

#include "core/context_state.hpp"
#include "gmem/context.hpp"

namespace gmem {

void Context::drain_pending(SpaceState& sp, const VaRange& r) {
  if (sp.queue->pending_covers(r)) sp.queue->flush();
}

Status Context::host_fault(VirtAddr va, Prot access) { return dev_fault(kCpuDevice, va, access); }

Status Context::dev_fault(DeviceId dev, VirtAddr va, Prot access) {
  auto ds = find_device(dev);
  if (!ds) return Status::kNotFound;
  if (!ds->caps.fault_recoverable) return Status::kInvalidArg;
  BusyGuard busy(ds->busy);
  std::optional<SpaceId> active;
  {
    std::lock_guard lk(ds->mu);
    active = ds->active;
  }
  if (!active) return Status::kNotFound;
  auto sp = find_space(*active);
  if (!sp) return Status::kNotFound;
  BusyGuard faulting(sp->faults);
  std::lock_guard lk(sp->mu);
  if (!sp->attachment(dev)) return Status::kNotFound;
  return fault_locked(*ds, *sp, va, access);
}

Status Context::fault_locked(DeviceState& dev, SpaceState& sp, VirtAddr va, Prot access) {
  const std::uint64_t page = align_down(va.value, kBasePageSize);
  PageTable* table = sp.attachment(dev.id)->table;

  drain_pending(sp, {page, page + kBasePageSize});

  const Region* reg = sp.region_at(va.value);
  if (!reg) return Status::kNotFound;
  if (!reg->prot.permits(access)) return Status::kProtection;

  PhysMemPool* target = nullptr;
  if (reg->pinned)
    target = pool_for(*reg->pinned);
  else
    target = dev.pool.load(std::memory_order_acquire);
  if (!target) target = host_pool_.get();

  LogicalEntry* e = sp.logical.find(page);
  if (!e) {
    // First touch: back every still-unbacked page of the granule at once.
    const std::uint64_t g = dev.prep_granularity.load(std::memory_order_relaxed);
    const std::uint64_t lo = std::max(align_down(page, g), reg->start);
    const std::uint64_t hi = std::min(align_down(page, g) + g, reg->end());
    std::vector<std::uint64_t> missing;
    for (std::uint64_t p = lo; p < hi; p += kBasePageSize)
      if (!sp.logical.find(p)) missing.push_back(p);
    auto frames = alloc_for_fault(sp, *target, missing.size());
    if (!frames) return frames.status();
    zero_frames(&dev, *frames);
    metrics_.add_zero_fill(frames->size() * kBasePageSize);
    const std::uint64_t now = advance_clock();
    for (std::size_t i = 0; i < missing.size(); ++i) {
      LogicalEntry ne;
      ne.frame = (*frames)[i];
      ne.prot = reg->prot;
      ne.holders = {table};
      target->set_backing(ne.frame, FrameBacking{sp.id, missing[i]});
      target->touch(ne.frame, now);
      install(sp, *table, missing[i], sp.logical.set(missing[i], std::move(ne)));
    }
    metrics_.add_fault(dev.id == kCpuDevice);
    return Status::kRetryAccess;
  }

  if (e->wired) {
    if (!e->prot.permits(access)) return Status::kProtection;
    if (!e->held_by(table)) e->holders.push_back(table);
    if (!table->walk(VirtAddr{page})) install(sp, *table, page, *e);
  } else if (e->held_by(table)) {
    // Translation still present in the logical view; repair the leaf.
    if (!table->walk(VirtAddr{page})) install(sp, *table, page, *e);
  } else if (reg->mode == PlacementMode::kReplicateRemote) {
    e->holders.push_back(table);
    install(sp, *table, page, *e);
  } else if (target->contains(e->frame)) {
    // Already where it should live: only the other holders go.
    const std::uint64_t one[] = {page};
    unmap_holders(sp, one);
    e = sp.logical.find(page);
    e->holders = {table};
    install(sp, *table, page, *e);
  } else {
    if (auto st = move_page(sp, page, *target); st != Status::kSuccess) return st;
    e = sp.logical.find(page);
    e->holders = {table};
    install(sp, *table, page, *e);
  }

  if (PhysMemPool* pool = pool_for(e->frame.pool)) pool->touch(e->frame, advance_clock());
  metrics_.add_fault(dev.id == kCpuDevice);
  return Status::kRetryAccess;
}

}  // namespace gmem
