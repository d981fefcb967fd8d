#include "gmem/sim.hpp"

#include <cstdio>
#include <cstring>
#include <shared_mutex>

#include "core/context_state.hpp"

namespace gmem {

DeviceCapabilities sim_capabilities(const SimDeviceConfig& cfg) {
  DeviceCapabilities caps;
  switch (cfg.kind) {
    case SimDeviceKind::kIntegratedGpu:
      caps.page_table_format = kHostFormat;
      caps.page_sizes = {kBasePageSize, kLargePageSize};
      break;
    case SimDeviceKind::kDiscreteGpu:
      caps.page_table_format = kDiscreteFormat;
      caps.page_sizes = {kBasePageSize, kLargePageSize};
      caps.has_local_memory = cfg.local_mem_bytes > 0;
      break;
    case SimDeviceKind::kDmaDevice:
      caps.fault_recoverable = false;
      caps.page_table_format = kDmaFormat;
      caps.page_sizes = {kBasePageSize, kLargePageSize};
      break;
  }
  return caps;
}

Expected<DeviceId> create_sim_device(Context& ctx, const SimDeviceConfig& cfg, MmuDescriptor mmu) {
  const auto caps = sim_capabilities(cfg);
  auto dev = ctx.device_create(std::move(mmu), caps, cfg.tlb_capacity);
  if (!dev) return dev;
  if (caps.has_local_memory) {
    const std::uint64_t bytes = align_down(cfg.local_mem_bytes, kBasePageSize);
    if (bytes == 0) return Status::kInvalidArg;
    if (auto st = ctx.register_physmem(*dev, 0, bytes); st != Status::kSuccess) return st;
  }
  if (auto st = ctx.set_prep_granularity(*dev, cfg.prep_granularity); st != Status::kSuccess)
    return st;
  return dev;
}

void AccessTrace::record(const TraceRecord& r) {
  std::lock_guard lk(mu_);
  records_.push_back(r);
}

std::vector<TraceRecord> AccessTrace::records() const {
  std::lock_guard lk(mu_);
  return records_;
}

std::size_t AccessTrace::size() const {
  std::lock_guard lk(mu_);
  return records_.size();
}

void AccessTrace::write(std::ostream& os) const {
  std::lock_guard lk(mu_);
  char va[32];
  for (const auto& r : records_) {
    std::snprintf(va, sizeof va, "0x%llx", static_cast<unsigned long long>(r.va));
    os << r.device.value << ' ' << va << ' ' << (r.write ? 'W' : 'R') << ' '
       << to_string(r.outcome) << '\n';
  }
}

SimEngine::SimEngine(Context& ctx, DeviceId dev, AccessTrace* trace)
    : ctx_(ctx), dev_(dev), state_(ctx.find_device(dev)), trace_(trace) {}

Status SimEngine::read(VirtAddr va, std::span<std::uint8_t> out) {
  return access(va, out.data(), out.size(), false);
}

Status SimEngine::write(VirtAddr va, std::span<const std::uint8_t> in) {
  return access(va, const_cast<std::uint8_t*>(in.data()), in.size(), true);
}

Status SimEngine::read_u64(VirtAddr va, std::uint64_t& out) {
  return access(va, reinterpret_cast<std::uint8_t*>(&out), sizeof out, false);
}

Status SimEngine::write_u64(VirtAddr va, std::uint64_t v) {
  return access(va, reinterpret_cast<std::uint8_t*>(&v), sizeof v, true);
}

Status SimEngine::read_words(VirtAddr va, std::span<std::uint64_t> out) {
  return access(va, reinterpret_cast<std::uint8_t*>(out.data()), out.size_bytes(), false);
}

Status SimEngine::write_words(VirtAddr va, std::span<const std::uint64_t> in) {
  return access(va, reinterpret_cast<std::uint8_t*>(const_cast<std::uint64_t*>(in.data())),
                in.size_bytes(), true);
}

Status SimEngine::access(VirtAddr va, std::uint8_t* buf, std::size_t n, bool write) {
  if (!state_) return Status::kNotFound;
  BusyGuard busy(state_->busy);
  std::uint64_t addr = va.value;
  std::size_t done = 0;
  while (done < n) {
    const std::size_t chunk =
        std::min<std::uint64_t>(n - done, align_down(addr, kBasePageSize) + kBasePageSize - addr);
    if (auto st = access_page(addr, buf + done, chunk, write); st != Status::kSuccess) return st;
    done += chunk;
    addr += chunk;
  }
  return Status::kSuccess;
}

Status SimEngine::access_page(std::uint64_t va, std::uint8_t* buf, std::size_t n, bool write) {
  const Prot access = write ? Prot{false, true} : Prot{true, false};
  Context::DeviceState& ds = *state_;
  ++stats_.accesses;
  for (int faults = 0;; ++faults) {
    Status st = Status::kNotFound;
    {
      std::shared_lock guard(ds.inflight);
      if (const PageTable* table = ds.active_table.load(std::memory_order_acquire)) {
        auto pa = translate(*table, ds.tlb, VirtAddr{va}, access);
        if (pa) {
          PhysMemPool* pool = ctx_.pool_for(pa->pool);
          if (write)
            std::memcpy(pool->bytes(*pa), buf, n);
          else
            std::memcpy(buf, pool->bytes(*pa), n);
          pool->touch(*pa, ctx_.advance_clock());
          if (trace_) trace_->record({dev_, va, write, Status::kSuccess});
          return Status::kSuccess;
        }
        st = pa.status();
      }
    }
    if (!ds.caps.fault_recoverable) {
      ++stats_.dma_faults;
      if (trace_) trace_->record({dev_, va, write, Status::kDmaFault});
      return Status::kDmaFault;
    }
    if (faults == kMaxFaults) {
      if (trace_) trace_->record({dev_, va, write, Status::kBusy});
      return Status::kBusy;
    }
    ++stats_.faults;
    st = ctx_.dev_fault(dev_, VirtAddr{va}, access);
    if (st != Status::kRetryAccess) {
      if (trace_) trace_->record({dev_, va, write, st});
      return st;
    }
  }
}

}  // namespace gmem
