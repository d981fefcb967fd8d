#include "gmem/context.hpp"

#include <algorithm>

#include "core/context_state.hpp"

namespace gmem {

Context::Context(ContextOptions opts)
    : opts_(opts),
      host_pool_(PhysMemPool::make_unbounded(kCpuDevice, opts.host_pool_max)),
      pools_(std::make_unique<std::atomic<PhysMemPool*>[]>(kMaxDeviceIds)) {
  metrics_.set_event_log(opts_.migration_log);
  for (std::size_t i = 0; i < kMaxDeviceIds; ++i) pools_[i].store(nullptr);
  pools_[kCpuDevice.value].store(host_pool_.get());

  DeviceCapabilities cpu_caps;
  cpu_caps.fault_recoverable = true;
  cpu_caps.has_local_memory = true;
  cpu_caps.page_table_format = 1;
  cpu_caps.page_sizes = {kBasePageSize, kLargePageSize};
  auto cpu = std::make_shared<DeviceState>(kCpuDevice, MmuDescriptor{}, cpu_caps,
                                           opts_.tlb_capacity);
  cpu->pool.store(host_pool_.get());
  devices_.emplace(kCpuDevice, std::move(cpu));
}

Context::~Context() {
  std::vector<SpaceId> ids;
  {
    std::lock_guard lk(registry_mu_);
    for (const auto& [id, sp] : spaces_) ids.push_back(id);
  }
  for (auto id : ids) as_destroy(id);
}

std::shared_ptr<Context::DeviceState> Context::find_device(DeviceId dev) const {
  std::lock_guard lk(registry_mu_);
  auto it = devices_.find(dev);
  return it == devices_.end() ? nullptr : it->second;
}

std::shared_ptr<Context::SpaceState> Context::find_space(SpaceId as) const {
  std::lock_guard lk(registry_mu_);
  auto it = spaces_.find(as);
  return it == spaces_.end() ? nullptr : it->second;
}

std::shared_ptr<Context::SpaceState> Context::space_of_region(RegionId r) const {
  std::lock_guard lk(registry_mu_);
  auto it = region_owner_.find(r);
  if (it == region_owner_.end()) return nullptr;
  auto sp = spaces_.find(it->second);
  return sp == spaces_.end() ? nullptr : sp->second;
}

std::shared_ptr<Context::SpaceState> Context::space_of_set(MappingSetId s) const {
  std::lock_guard lk(registry_mu_);
  auto it = set_owner_.find(s);
  if (it == set_owner_.end()) return nullptr;
  auto sp = spaces_.find(it->second);
  return sp == spaces_.end() ? nullptr : sp->second;
}

PhysMemPool* Context::pool_for(DeviceId tag) const {
  if (tag.value >= kMaxDeviceIds) return nullptr;
  return pools_[tag.value].load(std::memory_order_acquire);
}

void Context::set_alloc_observer(AllocObserver obs) {
  std::lock_guard lk(registry_mu_);
  observer_ = std::move(obs);
  host_pool_->set_alloc_observer(observer_);
  for (auto& [id, ds] : devices_)
    if (ds->own_pool) ds->own_pool->set_alloc_observer(observer_);
}

Expected<DeviceId> Context::device_create(MmuDescriptor mmu, DeviceCapabilities caps,
                                          std::size_t tlb_capacity) {
  if (auto st = validate_capabilities(caps); st != Status::kSuccess) return st;
  if (!mmu.ops.complete()) return Status::kInvalidArg;
  std::lock_guard lk(registry_mu_);
  if (next_device_ >= kCpuDevice.value) return Status::kNoMem;
  const DeviceId id{next_device_++};
  devices_.emplace(id, std::make_shared<DeviceState>(
                           id, std::move(mmu), std::move(caps),
                           tlb_capacity == 0 ? opts_.tlb_capacity : tlb_capacity));
  return id;
}

Status Context::device_destroy(DeviceId dev) {
  if (dev == kCpuDevice) return Status::kInvalidArg;
  auto ds = find_device(dev);
  if (!ds) return Status::kNotFound;
  if (ds->busy.load(std::memory_order_acquire) > 0) return Status::kBusy;

  std::vector<SpaceId> attached;
  {
    std::lock_guard lk(ds->mu);
    for (const auto& [sid, t] : ds->attachments) attached.push_back(sid);
  }
  for (auto sid : attached) {
    if (auto sp = find_space(sid)) {
      std::lock_guard lk(sp->mu);
      if (auto st = detach_locked(*ds, *sp); st != Status::kSuccess) return st;
    }
  }

  // Placements elsewhere may still have parked data in this pool.
  std::vector<std::shared_ptr<SpaceState>> all;
  {
    std::lock_guard lk(registry_mu_);
    for (auto& [sid, sp] : spaces_) all.push_back(sp);
  }
  if (ds->own_pool) {
    for (auto& sp : all) {
      std::lock_guard lk(sp->mu);
      migrate_pool_out(*sp, dev);
      for (auto& [rid, reg] : sp->regions)
        if (reg.pinned == dev) reg.pinned.reset();
    }
  }

  std::lock_guard lk(registry_mu_);
  pools_[dev.value].store(nullptr, std::memory_order_release);
  devices_.erase(dev);
  return Status::kSuccess;
}

Status Context::device_switch(DeviceId dev, SpaceId as) {
  auto ds = find_device(dev);
  if (!ds) return Status::kNotFound;
  PageTable* table = nullptr;
  std::optional<SpaceId> old;
  {
    std::lock_guard lk(ds->mu);
    auto it = ds->attachments.find(as);
    if (it == ds->attachments.end()) return Status::kNotFound;
    if (ds->active == as) return Status::kSuccess;
    table = it->second;
    old = ds->active;
  }
  if (old) {
    if (auto osp = find_space(*old); osp && osp->queue->pending_targets(dev))
      return Status::kBusy;
  }
  std::unique_lock guard(ds->inflight);
  std::lock_guard lk(ds->mu);
  ds->active = as;
  ds->active_table.store(table, std::memory_order_release);
  // The TLB is tagged by nothing but VA; entries of the old space go.
  ds->tlb.flush();
  return Status::kSuccess;
}

Status Context::set_prep_granularity(DeviceId dev, std::uint64_t bytes) {
  auto ds = find_device(dev);
  if (!ds) return Status::kNotFound;
  if (!supports_page_size(ds->caps, bytes)) return Status::kInvalidArg;
  ds->prep_granularity.store(bytes, std::memory_order_relaxed);
  return Status::kSuccess;
}

std::size_t Context::device_count() const {
  std::lock_guard lk(registry_mu_);
  return devices_.size() - 1;  // the predefined CPU device is not counted
}

bool Context::device_exists(DeviceId dev) const { return find_device(dev) != nullptr; }

std::optional<SpaceId> Context::active_space(DeviceId dev) const {
  auto ds = find_device(dev);
  if (!ds) return std::nullopt;
  std::lock_guard lk(ds->mu);
  return ds->active;
}

std::optional<AttachMode> Context::attach_mode(DeviceId dev, SpaceId as) const {
  auto sp = find_space(as);
  if (!sp) return std::nullopt;
  std::lock_guard lk(sp->mu);
  if (const auto* a = sp->attachment(dev)) return a->mode;
  return std::nullopt;
}

const PageTable* Context::page_table(DeviceId dev, SpaceId as) const {
  auto ds = find_device(dev);
  if (!ds) return nullptr;
  std::lock_guard lk(ds->mu);
  auto it = ds->attachments.find(as);
  return it == ds->attachments.end() ? nullptr : it->second;
}

Tlb* Context::tlb(DeviceId dev) {
  auto ds = find_device(dev);
  return ds ? &ds->tlb : nullptr;
}

PhysMemPool* Context::pool(DeviceId dev) { return pool_for(dev); }

std::optional<DeviceCapabilities> Context::capabilities(DeviceId dev) const {
  auto ds = find_device(dev);
  if (!ds) return std::nullopt;
  return ds->caps;
}

std::uint64_t Context::device_broadcasts(DeviceId dev) const {
  auto ds = find_device(dev);
  return ds ? ds->broadcasts.load(std::memory_order_relaxed) : 0;
}

std::size_t Context::space_count() const {
  std::lock_guard lk(registry_mu_);
  return spaces_.size();
}

}  // namespace gmem
