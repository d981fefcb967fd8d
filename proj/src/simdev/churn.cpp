#include <random>

#include "gmem/kernels.hpp"

namespace gmem {

UseAfterUnmapDetector::UseAfterUnmapDetector(Context& ctx, std::vector<DeviceId> devices)
    : ctx_(ctx), devices_(std::move(devices)) {
  ctx_.set_alloc_observer([this](std::span<const PhysAddr> frames) { check(frames); });
}

UseAfterUnmapDetector::~UseAfterUnmapDetector() { ctx_.set_alloc_observer(nullptr); }

void UseAfterUnmapDetector::check(std::span<const PhysAddr> frames) {
  checked_.fetch_add(frames.size(), std::memory_order_relaxed);
  for (auto d : devices_) {
    Tlb* tlb = ctx_.tlb(d);
    if (!tlb) continue;
    for (const auto& entry : tlb->snapshot()) {
      for (const auto& f : frames) {
        if (f.pool == entry.frame.pool && f.addr >= entry.frame.addr &&
            f.addr < entry.frame.addr + entry.size)
          violations_.fetch_add(1, std::memory_order_relaxed);
      }
    }
  }
  for (const auto& f : frames) {
    if (PhysMemPool* pool = ctx_.pool(f.pool); pool && pool->quarantined(f))
      violations_.fetch_add(1, std::memory_order_relaxed);
  }
}

void UseAfterUnmapDetector::probe(std::size_t n) {
  if (n == 0) return;
  auto frames = ctx_.phys_alloc(kCpuDevice, n, false);
  if (frames) ctx_.phys_free(*frames);
}

void UseAfterUnmapDetector::quiescent_check() {
  for (auto d : devices_) {
    Tlb* tlb = ctx_.tlb(d);
    const auto as = ctx_.active_space(d);
    const PageTable* table = as ? ctx_.page_table(d, *as) : nullptr;
    if (!tlb) continue;
    for (const auto& entry : tlb->snapshot()) {
      const auto leaf = table ? table->walk(VirtAddr{entry.va_base}) : std::nullopt;
      if (!leaf || leaf->va.value != entry.va_base || leaf->frame != entry.frame ||
          leaf->size != entry.size)
        violations_.fetch_add(1, std::memory_order_relaxed);
    }
  }
}

ChurnReport run_dma_churn(Context& ctx, SpaceId as, SimEngine& dma, const ChurnConfig& cfg,
                          UseAfterUnmapDetector* detector) {
  ChurnReport report;
  std::mt19937_64 g(cfg.seed);
  std::atomic<std::uint64_t> callbacks{0};
  const std::uint64_t before = ctx.device_broadcasts(dma.device());
  const std::size_t max_pages = cfg.max_pages == 0 ? 1 : cfg.max_pages;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const std::size_t pages = 1 + g() % max_pages;
    AllocRequest req;
    req.size = pages * kBasePageSize;
    auto reg = ctx.as_alloc(as, req);
    if (!reg) {
      ++report.access_errors;
      continue;
    }
    auto frames = ctx.phys_alloc(kCpuDevice, pages, false);
    if (!frames || ctx.region_map(reg->id, Prot::rw(), *frames) != Status::kSuccess) {
      ++report.access_errors;
      ctx.region_dealloc(reg->id);
      continue;
    }
    for (std::size_t p = 0; p < pages; ++p) {
      ++report.simulated_ops;
      if (dma.write_u64(reg->start + p * kBasePageSize, (it << 8) | p) != Status::kSuccess)
        ++report.access_errors;
    }
    const UnmapFlags flags{cfg.mode == ChurnMode::kAsync};
    ctx.region_unmap(reg->id, flags, [&callbacks] { callbacks.fetch_add(1); });
    ctx.phys_free(*frames);
    ctx.region_dealloc(reg->id);
    if (detector) detector->probe(cfg.probe_frames);
    ++report.iterations;
  }
  ctx.as_synchronize(as);

  report.callbacks = callbacks.load();
  report.broadcasts = ctx.device_broadcasts(dma.device()) - before;
  report.detector_violations = detector ? detector->violations() : 0;
  return report;
}

}  // namespace gmem
