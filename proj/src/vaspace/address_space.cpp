#include <algorithm>

#include "core/context_state.hpp"
#include "gmem/context.hpp"

namespace gmem {

Expected<SpaceId> Context::as_create(std::uint64_t begin, std::uint64_t end, AllocPolicy policy) {
  if (begin >= end || !is_aligned(begin, kBasePageSize) || !is_aligned(end, kBasePageSize) ||
      end > kVaLimit)
    return Status::kInvalidArg;
  std::lock_guard lk(registry_mu_);
  const SpaceId id{next_space_++};
  auto sp = std::make_shared<SpaceState>(id, begin, end, policy);
  SpaceState* raw = sp.get();
  AsyncQueue::Sink sink;
  sink.invalidate = [this](DeviceId d, std::span<const VaRange> ranges) {
    if (auto ds = find_device(d)) invalidate_device(*ds, ranges);
  };
  sink.release_frames = [this](std::span<const PhysAddr> frames) { release_frames(frames); };
  sink.release_va = [raw](const VaRange& r) { raw->va.erase(r.begin); };
  sp->queue = std::make_unique<AsyncQueue>(std::move(sink), opts_.async_batch, opts_.flush_interval);
  spaces_.emplace(id, std::move(sp));
  return id;
}

Status Context::as_destroy(SpaceId as) {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  if (sp->faults.load(std::memory_order_acquire) > 0) return Status::kBusy;
  {
    std::lock_guard lk(sp->mu);
    sp->queue->flush();
    std::vector<RegionId> live;
    for (const auto& [rid, reg] : sp->regions) live.push_back(rid);
    for (auto rid : live) region_dealloc_locked(*sp, sp->regions.at(rid));
    sp->queue->flush();
    std::vector<DeviceId> devs;
    for (const auto& a : sp->attached) devs.push_back(a.dev);
    for (auto d : devs)
      if (auto ds = find_device(d)) detach_locked(*ds, *sp);
  }
  std::lock_guard lk(registry_mu_);
  for (auto it = region_owner_.begin(); it != region_owner_.end();)
    it = it->second == as ? region_owner_.erase(it) : std::next(it);
  for (auto it = set_owner_.begin(); it != set_owner_.end();)
    it = it->second == as ? set_owner_.erase(it) : std::next(it);
  if (inherit_space_ == as) inherit_space_.reset();
  spaces_.erase(as);
  return Status::kSuccess;
}

Status Context::set_host_inherit_space(std::optional<SpaceId> as) {
  if (as && !find_space(*as)) return Status::kNotFound;
  std::lock_guard lk(registry_mu_);
  inherit_space_ = as;
  return Status::kSuccess;
}

Status Context::as_attach(SpaceId as, DeviceId dev, AttachMode mode, bool activate) {
  auto sp = find_space(as);
  auto ds = find_device(dev);
  if (!sp || !ds) return Status::kNotFound;
  {
    std::lock_guard lk(sp->mu);
    if (sp->attachment(dev)) return Status::kInvalidArg;
    sp->queue->flush();

    PageTable* table = nullptr;
    if (mode == AttachMode::kShared) {
      for (const auto& t : sp->tables) {
        if (t->shareable() && t->format_id() == ds->caps.page_table_format) {
          table = t.get();
          break;
        }
      }
    }
    const bool fresh = table == nullptr;
    if (fresh) {
      std::uint64_t tid;
      {
        std::lock_guard rlk(registry_mu_);
        tid = next_table_++;
      }
      sp->tables.push_back(std::make_unique<PageTable>(tid, ds->caps.page_table_format,
                                                       mode == AttachMode::kShared, &metrics_));
      table = sp->tables.back().get();
    }
    table->add_sharer(dev);
    sp->attached.push_back(Attachment{dev, table, mode});
    {
      std::lock_guard dlk(ds->mu);
      ds->attachments[as] = table;
    }

    if (fresh) {
      // Wired mappings are visible to every attached table.
      for (auto& [page, e] : sp->logical.entries()) {
        if (!e.wired || e.held_by(table)) continue;
        if (e.leaf_size == kBasePageSize || is_aligned(page, e.leaf_size)) install(*sp, *table, page, e);
        e.holders.push_back(table);
      }
    } else {
      for (auto& [page, e] : sp->logical.entries())
        if (e.held_by(table) && (e.leaf_size == kBasePageSize || is_aligned(page, e.leaf_size)))
          ds->mmu.ops.pte_install(VirtAddr{page}, e.frame, e.leaf_size, e.prot);
    }

    std::optional<SpaceId> source;
    {
      std::lock_guard rlk(registry_mu_);
      source = inherit_space_;
    }
    if (dev == kCpuDevice && source && *source != as && fresh) inherit_host_space(*sp, *table);
  }
  if (activate) return device_switch(dev, as);
  return Status::kSuccess;
}

void Context::inherit_host_space(SpaceState& dst, PageTable& cpu_table) {
  auto src = find_space(*inherit_space_);
  if (!src) return;
  std::lock_guard lk(src->mu);
  for (const auto& [rid, reg] : src->regions) {
    if (reg.start < dst.begin || reg.end() > dst.end) continue;
    AllocRequest req;
    req.hint = reg.start;
    req.size = reg.size;
    auto at = dst.va.find(req);
    if (!at || *at != reg.start) continue;  // the range is taken here already
    RegionId nid;
    {
      std::lock_guard rlk(registry_mu_);
      nid = RegionId{next_region_++};
      region_owner_[nid] = dst.id;
    }
    dst.va.insert(reg.start, reg.size, VaAllocator::Kind::kLive, nid);
    Region copy = reg;
    copy.id = nid;
    copy.sets.clear();
    copy.mapped = false;
    copy.page_size = 0;
    dst.regions.emplace(nid, copy);

    // Contents are copied into fresh host frames and mapped for the CPU.
    for (auto page : src->logical.pages_in(reg.start, reg.end())) {
      const LogicalEntry& se = *src->logical.find(page);
      auto frames = host_pool_->alloc(1, false);
      if (!frames) return;
      const PhysAddr f = frames->front();
      copy_frame(se.frame, f);
      LogicalEntry e;
      e.frame = f;
      e.prot = reg.prot;
      e.holders = {&cpu_table};
      host_pool_->set_backing(f, FrameBacking{dst.id, page});
      install(dst, cpu_table, page, dst.logical.set(page, e));
    }
  }
}

Expected<RegionInfo> Context::as_alloc(SpaceId as, const AllocRequest& req) {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  if (auto st = sp->va.validate(req); st != Status::kSuccess) return st;

  std::optional<std::uint64_t> start;
  bool hit = false;
  if (sp->policy.cached()) {
    start = sp->va.take_cached(req);
    hit = start.has_value();
  }
  if (!start) {
    auto found = sp->va.find(req);
    if (!found) return found.status();
    start = *found;
  }

  RegionId rid;
  {
    std::lock_guard rlk(registry_mu_);
    rid = RegionId{next_region_++};
    region_owner_[rid] = as;
  }
  if (hit) {
    sp->va.set_kind(*start, VaAllocator::Kind::kLive, rid);
    ++sp->cache_hits;
  } else {
    sp->va.insert(*start, req.size, VaAllocator::Kind::kLive, rid);
  }
  Region reg;
  reg.id = rid;
  reg.start = *start;
  reg.size = req.size;
  reg.prot = req.prot;
  sp->regions.emplace(rid, reg);
  return region_info(rid);
}

Expected<RegionInfo> Context::as_lookup(SpaceId as, VirtAddr addr) const {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  RegionId rid;
  {
    std::lock_guard lk(sp->mu);
    const Region* reg = sp->region_at(addr.value);
    if (!reg) return Status::kNotFound;
    rid = reg->id;
  }
  return region_info(rid);
}

Expected<RegionInfo> Context::region_info(RegionId r) const {
  auto sp = space_of_region(r);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  auto it = sp->regions.find(r);
  if (it == sp->regions.end()) return Status::kNotFound;
  const Region& reg = it->second;
  RegionInfo ri;
  ri.id = r;
  ri.space = sp->id;
  ri.start = VirtAddr{reg.start};
  ri.size = reg.size;
  ri.prot = reg.prot;
  ri.pinned = reg.pinned;
  ri.mode = reg.mode;
  ri.mapped = reg.mapped;
  ri.map_page_size = reg.page_size;
  return ri;
}

std::vector<RegionInfo> Context::regions(SpaceId as) const {
  std::vector<RegionInfo> out;
  auto sp = find_space(as);
  if (!sp) return out;
  std::vector<RegionId> ids;
  {
    std::lock_guard lk(sp->mu);
    for (const auto& span : sp->va.spans())
      if (span.kind == VaAllocator::Kind::kLive) ids.push_back(span.region);
  }
  for (auto id : ids)
    if (auto ri = region_info(id)) out.push_back(*ri);
  return out;
}

Expected<std::vector<RegionInfo>> Context::regions_via(DeviceId dev, SpaceId as) const {
  auto ds = find_device(dev);
  if (!ds) return Status::kNotFound;
  {
    std::lock_guard lk(ds->mu);
    if (!ds->attachments.count(as)) return Status::kNotFound;
  }
  // Every attached device resolves regions through the space's one index.
  return regions(as);
}

Status Context::as_synchronize(SpaceId as) {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  sp->queue->flush();
  return Status::kSuccess;
}

Status Context::as_tick(SpaceId as, std::uint64_t n) {
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  sp->queue->tick(n);
  return Status::kSuccess;
}

Status Context::as_configure_async(SpaceId as, std::size_t batch, std::uint64_t flush_interval) {
  if (batch == 0) return Status::kInvalidArg;
  auto sp = find_space(as);
  if (!sp) return Status::kNotFound;
  sp->queue->configure(batch, flush_interval);
  return Status::kSuccess;
}

std::size_t Context::pending_async(SpaceId as) const {
  auto sp = find_space(as);
  return sp ? sp->queue->pending() : 0;
}

AsyncQueueStats Context::async_stats(SpaceId as) const {
  auto sp = find_space(as);
  return sp ? sp->queue->stats() : AsyncQueueStats{};
}

std::uint64_t Context::cache_hits(SpaceId as) const {
  auto sp = find_space(as);
  if (!sp) return 0;
  std::lock_guard lk(sp->mu);
  return sp->cache_hits;
}

std::vector<DeviceId> Context::attached_devices(SpaceId as) const {
  std::vector<DeviceId> out;
  auto sp = find_space(as);
  if (!sp) return out;
  std::lock_guard lk(sp->mu);
  for (const auto& a : sp->attached) out.push_back(a.dev);
  return out;
}

Status Context::region_dealloc(RegionId r) {
  auto sp = space_of_region(r);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  auto it = sp->regions.find(r);
  if (it == sp->regions.end()) return Status::kNotFound;
  return region_dealloc_locked(*sp, it->second);
}

Status Context::region_dealloc_locked(SpaceState& sp, Region& reg) {
  if (reg.mapped) region_unmap_locked(sp, reg, UnmapFlags{}, nullptr);

  // Fault-backed pages: translations go first, then the frames.
  const auto pages = sp.logical.pages_in(reg.start, reg.end());
  if (!pages.empty()) {
    unmap_holders(sp, pages);
    for (auto page : pages) {
      free_entry_frame(*sp.logical.find(page));
      sp.logical.erase(page);
    }
  }

  for (auto set : reg.sets) {
    auto sit = sp.sets.find(set);
    if (sit == sp.sets.end()) continue;
    auto& m = sit->second.members;
    m.erase(std::remove(m.begin(), m.end(), reg.id), m.end());
  }

  const RegionId rid = reg.id;
  const VaRange span = reg.span();
  if (sp.queue->attach_va_release(rid, span)) {
    sp.va.set_kind(span.begin, VaAllocator::Kind::kZombie, rid);
  } else if (sp.policy.cached()) {
    sp.va.set_kind(span.begin, VaAllocator::Kind::kIdle, RegionId{});
    if (auto evicted = sp.va.park(span.begin)) sp.va.erase(*evicted);
  } else {
    sp.va.erase(span.begin);
  }
  sp.regions.erase(rid);
  std::lock_guard rlk(registry_mu_);
  region_owner_.erase(rid);
  return Status::kSuccess;
}

Status Context::region_set_policy(RegionId r, std::optional<DeviceId> dev, PlacementMode mode) {
  auto sp = space_of_region(r);
  if (!sp) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  auto it = sp->regions.find(r);
  if (it == sp->regions.end()) return Status::kNotFound;
  if (dev && !sp->attachment(*dev)) return Status::kNotFound;
  it->second.pinned = dev;
  it->second.mode = mode;
  return Status::kSuccess;
}

Status Context::device_detach(DeviceId dev, SpaceId as) {
  auto sp = find_space(as);
  auto ds = find_device(dev);
  if (!sp || !ds) return Status::kNotFound;
  std::lock_guard lk(sp->mu);
  return detach_locked(*ds, *sp);
}

Status Context::detach_locked(DeviceState& ds, SpaceState& sp) {
  const Attachment* att = sp.attachment(ds.id);
  if (!att) return Status::kNotFound;
  PageTable* table = att->table;
  sp.queue->flush();
  if (ds.id != kCpuDevice) migrate_pool_out(sp, ds.id);

  const bool sole = table->sharers().size() == 1;
  std::vector<VaRange> dropped;
  for (auto& [page, e] : sp.logical.entries()) {
    if (!e.held_by(table)) continue;
    if (e.leaf_size == kBasePageSize || is_aligned(page, e.leaf_size)) {
      ds.mmu.ops.pte_destroy(VirtAddr{page}, e.leaf_size);
      dropped.push_back({page, page + e.leaf_size});
    }
    if (sole) e.drop_holder(table);
  }
  if (!dropped.empty()) invalidate_device(ds, coalesce(std::move(dropped)));
  if (!sole) table->remove_sharer(ds.id);

  {
    std::unique_lock guard(ds.inflight);
    std::lock_guard dlk(ds.mu);
    if (ds.active == sp.id) {
      ds.active.reset();
      ds.active_table.store(nullptr, std::memory_order_release);
      ds.tlb.flush();
    }
    ds.attachments.erase(sp.id);
  }

  sp.attached.erase(std::remove_if(sp.attached.begin(), sp.attached.end(),
                                   [&](const Attachment& a) { return a.dev == ds.id; }),
                    sp.attached.end());
  if (sole) {
    sp.tables.erase(std::remove_if(sp.tables.begin(), sp.tables.end(),
                                   [&](const auto& t) { return t.get() == table; }),
                    sp.tables.end());
  }
  for (auto& [rid, reg] : sp.regions)
    if (reg.pinned == ds.id) reg.pinned.reset();
  return Status::kSuccess;
}

}  // namespace gmem
