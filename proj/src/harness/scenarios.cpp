#include <chrono>
#include <random>
#include <set>
#include <thread>

#include "gmem/harness.hpp"

namespace gmem::harness {

namespace {

constexpr std::uint64_t kSpaceBegin = 1ull << 32;
constexpr std::uint64_t kSpaceEnd = 1ull << 44;

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(std::uint64_t h, std::span<const std::uint8_t> bytes) {
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

// One context, one space, the host CPU and the scenario's devices.
struct Rig {
  explicit Rig(const RunConfig& cfg) : cfg(cfg), ctx(options(cfg)) {}

  static ContextOptions options(const RunConfig& cfg) {
    ContextOptions o;
    o.async_batch = cfg.async_batch;
    o.flush_interval = cfg.flush_interval;
    o.tlb_capacity = cfg.tlb_capacity;
    return o;
  }

  // Creates the space and attaches the CPU; returns an error message.
  std::string open(AllocPolicy policy = AllocPolicy{}) {
    auto s = ctx.as_create(kSpaceBegin, kSpaceEnd, policy);
    if (!s) return "as_create: " + std::string(to_string(s.status()));
    as = *s;
    if (auto st = ctx.as_attach(as, kCpuDevice, cfg.pt_mode, true); st != Status::kSuccess)
      return "attach cpu: " + std::string(to_string(st));
    return {};
  }

  std::string add_device(SimDeviceKind kind, std::uint64_t local_mem, AttachMode mode) {
    SimDeviceConfig dc;
    dc.kind = kind;
    dc.local_mem_bytes = local_mem;
    dc.pt_mode = mode;
    dc.prep_granularity = cfg.prep_granularity;
    dc.tlb_capacity = cfg.tlb_capacity;
    auto d = create_sim_device(ctx, dc);
    if (!d) return "device_create: " + std::string(to_string(d.status()));
    if (auto st = ctx.as_attach(as, *d, mode, true); st != Status::kSuccess)
      return "attach device: " + std::string(to_string(st));
    devices.push_back(*d);
    return {};
  }

  AccessTrace* tracer() { return cfg.trace.empty() ? nullptr : &trace; }

  Expected<RegionInfo> alloc(std::uint64_t bytes) {
    AllocRequest req;
    req.size = align_up(std::max<std::uint64_t>(bytes, 1), kBasePageSize);
    auto r = ctx.as_alloc(as, req);
    if (r) ctx.region_set_policy(r->id, std::nullopt, cfg.policy);
    return r;
  }

  void finish(RunResult& res) {
    add_metrics(res.report, ctx.metrics().snapshot());
    const auto qs = ctx.async_stats(as);
    res.report["async_enqueued"] = qs.enqueued;
    res.report["async_flushes"] = qs.flushes;
    res.report["async_callbacks"] = qs.callbacks;
    if (!cfg.trace.empty()) res.trace = trace.records();
  }

  const RunConfig& cfg;
  Context ctx;
  SpaceId as;
  std::vector<DeviceId> devices;
  AccessTrace trace;
};

RunResult fail(Status st, std::string msg) {
  RunResult r;
  r.status = st;
  r.error = std::move(msg);
  return r;
}

std::uint64_t device_memory(const RunConfig& cfg, std::uint64_t working_set) {
  if (cfg.device != SimDeviceKind::kDiscreteGpu) return 0;
  if (cfg.device_mem_bytes) return align_down(*cfg.device_mem_bytes, kBasePageSize);
  // Enough for the working set with a granule of slack on either side.
  return align_up(working_set, kBasePageSize) + 2 * align_up(cfg.prep_granularity, kLargePageSize);
}

}  // namespace

RunResult run_vectoradd(const RunConfig& cfg) {
  if (auto err = validate(cfg); !err.empty()) return fail(Status::kInvalidArg, err);
  Rig rig(cfg);
  if (auto err = rig.open(); !err.empty()) return fail(Status::kInvalidArg, err);

  const std::uint64_t bytes = cfg.n * 8;
  const std::uint64_t ws = 3 * align_up(std::max<std::uint64_t>(bytes, 1), kBasePageSize);
  for (std::size_t e = 0; e < cfg.engines; ++e)
    if (auto err = rig.add_device(cfg.device, device_memory(cfg, ws), cfg.pt_mode); !err.empty())
      return fail(Status::kInvalidArg, err);

  auto a = rig.alloc(bytes);
  auto b = rig.alloc(bytes);
  auto out = rig.alloc(bytes);
  if (!a || !b || !out) return fail(Status::kNoMem, "as_alloc failed");

  SimEngine host(rig.ctx, kCpuDevice, rig.tracer());
  std::mt19937_64 g(cfg.seed);
  std::vector<std::uint64_t> va(cfg.n), vb(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    va[i] = g();
    vb[i] = g();
  }
  if (cfg.n) {
    if (auto st = host.write_words(a->start, va); st != Status::kSuccess)
      return fail(st, "host write of a failed");
    if (auto st = host.write_words(b->start, vb); st != Status::kSuccess)
      return fail(st, "host write of b failed");
  }

  // Engines take consecutive slices in turn, so the counters stay repeatable.
  std::uint64_t accesses = 0;
  for (std::size_t e = 0; e < cfg.engines; ++e) {
    SimEngine dev(rig.ctx, rig.devices[e], rig.tracer());
    const std::size_t lo = cfg.n * e / cfg.engines;
    const std::size_t hi = cfg.n * (e + 1) / cfg.engines;
    if (auto st = run_kernel_vectoradd(dev, a->start + lo * 8, b->start + lo * 8,
                                       out->start + lo * 8, hi - lo);
        st != Status::kSuccess)
      return fail(st, "vectoradd kernel failed: " + std::string(to_string(st)));
    accesses += dev.stats().accesses;
  }

  std::vector<std::uint64_t> result(cfg.n);
  if (cfg.n) {
    if (auto st = host.read_words(out->start, result); st != Status::kSuccess)
      return fail(st, "host read of out failed");
  }
  std::uint64_t mismatches = 0;
  for (std::size_t i = 0; i < cfg.n; ++i) mismatches += result[i] != va[i] + vb[i];

  RunResult res;
  res.report = config_echo(cfg);
  res.report["vectoradd_mismatches"] = mismatches;
  res.report["vectoradd_checksum"] = hex64(fnv1a(
      14695981039346656037ull,
      {reinterpret_cast<const std::uint8_t*>(result.data()), result.size() * 8}));
  res.report["device_accesses"] = accesses;
  res.report["working_set_bytes"] = ws;
  res.report["device_mem_bytes"] = device_memory(cfg, ws);
  rig.finish(res);
  if (mismatches) res.error = "vectoradd output mismatch";
  return res;
}

RunResult run_bp(const RunConfig& cfg) {
  if (auto err = validate(cfg); !err.empty()) return fail(Status::kInvalidArg, err);
  Rig rig(cfg);
  if (auto err = rig.open(); !err.empty()) return fail(Status::kInvalidArg, err);

  const auto& d = cfg.dims;
  const std::uint64_t ws = align_up(d.in * d.hidden * 8, kBasePageSize) +
                           align_up(d.hidden * d.out * 8, kBasePageSize) +
                           align_up((2 * d.hidden + 2 * d.out) * 8, kBasePageSize) +
                           align_up((d.in + d.out) * 8, kBasePageSize);
  if (auto err = rig.add_device(cfg.device, device_memory(cfg, ws), cfg.pt_mode); !err.empty())
    return fail(Status::kInvalidArg, err);

  auto net = bp_allocate(rig.ctx, rig.as, d);
  if (!net) return fail(net.status(), "bp_allocate failed");
  for (RegionId r : {net->weights_region, net->act_region, net->input_region})
    rig.ctx.region_set_policy(r, std::nullopt, cfg.policy);

  SimEngine host(rig.ctx, kCpuDevice, rig.tracer());
  SimEngine dev(rig.ctx, rig.devices[0], rig.tracer());
  if (auto st = bp_init(host, *net, cfg.seed); st != Status::kSuccess)
    return fail(st, "bp init failed");
  if (auto st = run_kernel_bp(host, dev, *net, cfg.steps, cfg.seed); st != Status::kSuccess)
    return fail(st, "bp kernel failed: " + std::string(to_string(st)));
  auto sum = bp_checksum(rig.ctx, rig.as, *net);
  if (!sum) return fail(sum.status(), "bp checksum failed");

  RunResult res;
  res.report = config_echo(cfg);
  res.report["bp_steps"] = cfg.steps;
  res.report["bp_checksum"] = hex64(*sum);
  res.report["bp_weight_bytes"] = net->weight_bytes();
  res.report["device_accesses"] = dev.stats().accesses;
  res.report["working_set_bytes"] = ws;
  res.report["device_mem_bytes"] = device_memory(cfg, ws);
  rig.finish(res);
  return res;
}

RunResult run_churn(const RunConfig& cfg) {
  if (auto err = validate(cfg); !err.empty()) return fail(Status::kInvalidArg, err);
  Rig rig(cfg);
  if (auto err = rig.open(); !err.empty()) return fail(Status::kInvalidArg, err);
  for (std::size_t e = 0; e < cfg.engines; ++e)
    if (auto err = rig.add_device(SimDeviceKind::kDmaDevice, 0, cfg.pt_mode); !err.empty())
      return fail(Status::kInvalidArg, err);

  std::vector<std::uint64_t> before;
  for (auto d : rig.devices) before.push_back(rig.ctx.device_broadcasts(d));

  UseAfterUnmapDetector detector(rig.ctx, rig.devices);
  std::vector<ChurnReport> reports(cfg.engines);
  auto body = [&](std::size_t e) {
    SimEngine dma(rig.ctx, rig.devices[e], rig.tracer());
    ChurnConfig cc;
    cc.iterations = cfg.iterations;
    cc.max_pages = cfg.buf_pages;
    cc.mode = cfg.unmap_mode;
    cc.seed = cfg.seed + e;
    reports[e] = run_dma_churn(rig.ctx, rig.as, dma, cc, &detector);
  };
  if (cfg.engines == 1) {
    body(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t e = 0; e < cfg.engines; ++e) threads.emplace_back(body, e);
    for (auto& t : threads) t.join();
  }
  rig.ctx.as_synchronize(rig.as);
  detector.quiescent_check();

  ChurnReport total;
  for (const auto& r : reports) {
    total.iterations += r.iterations;
    total.simulated_ops += r.simulated_ops;
    total.callbacks += r.callbacks;
    total.access_errors += r.access_errors;
  }
  std::uint64_t per_device_max = 0;
  for (std::size_t i = 0; i < rig.devices.size(); ++i) {
    const std::uint64_t n = rig.ctx.device_broadcasts(rig.devices[i]) - before[i];
    total.broadcasts += n;
    per_device_max = std::max(per_device_max, n);
  }

  RunResult res;
  res.report = config_echo(cfg);
  res.report["churn_iterations"] = total.iterations;
  res.report["churn_broadcasts"] = total.broadcasts;
  res.report["churn_broadcasts_per_device_max"] = per_device_max;
  res.report["churn_callbacks"] = total.callbacks;
  res.report["churn_simulated_ops"] = total.simulated_ops;
  res.report["churn_access_errors"] = total.access_errors;
  res.report["churn_detector_violations"] = detector.violations();
  res.report["churn_checked_frames"] = detector.checked_frames();
  rig.finish(res);
  if (detector.violations()) res.error = "use-after-unmap detector fired";
  else if (total.access_errors) res.error = "churn access errors";
  return res;
}

RunResult run_passthrough_demo(const RunConfig& cfg) {
  if (auto err = validate(cfg); !err.empty()) return fail(Status::kInvalidArg, err);
  Rig rig(cfg);
  if (auto err = rig.open(); !err.empty()) return fail(Status::kInvalidArg, err);
  const std::uint64_t region_bytes = cfg.region_pages * kBasePageSize;
  const std::uint64_t guest_mem = device_memory(cfg, (cfg.grow + 1) * region_bytes);
  if (auto err = rig.add_device(cfg.device, guest_mem, cfg.pt_mode); !err.empty())
    return fail(Status::kInvalidArg, err);
  if (auto err = rig.add_device(SimDeviceKind::kDmaDevice, 0, AttachMode::kCoherent);
      !err.empty())
    return fail(Status::kInvalidArg, err);
  const DeviceId guest = rig.devices[0];
  const DeviceId passthrough = rig.devices[1];
  SimEngine guest_engine(rig.ctx, guest, rig.tracer());
  SimEngine dma_engine(rig.ctx, passthrough, rig.tracer());

  struct Live {
    RegionInfo info;
    std::vector<PhysAddr> frames;
  };
  std::vector<Live> live;
  std::vector<std::uint64_t> released;  // starts of deallocated regions
  std::uint64_t checkpoints = 0;
  std::uint64_t verified = 0;
  std::uint64_t dma_faults_after_shrink = 0;

  // The DMA device must translate exactly the live wired pages, to the
  // frames the logical view records, and see the guest's data there.
  auto checkpoint = [&]() -> std::string {
    ++checkpoints;
    const PageTable* dt = rig.ctx.page_table(passthrough, rig.as);
    if (!dt) return "passthrough device has no table";
    std::set<std::uint64_t> wired;
    for (const auto& [page, b] : rig.ctx.logical_entries(rig.as))
      if (b.wired) wired.insert(page);
    std::set<std::uint64_t> visible;
    dt->for_each_leaf([&](const Leaf& l) {
      for (std::uint64_t off = 0; off < l.size; off += kBasePageSize) visible.insert(l.va.value + off);
    });
    if (wired != visible) return "dma view differs from the wired set";
    for (const auto& l : live) {
      for (std::uint64_t p = 0; p < cfg.region_pages; ++p) {
        const std::uint64_t va = l.info.start.value + p * kBasePageSize;
        auto leaf = dt->walk(VirtAddr{va});
        auto b = rig.ctx.logical_lookup(rig.as, VirtAddr{va});
        if (!leaf || !b || leaf->frame != b->frame || b->frame != l.frames[p])
          return "dma translation differs from the logical mapping";
        std::uint64_t word = 0;
        if (dma_engine.read_u64(VirtAddr{va}, word) != Status::kSuccess || word != va)
          return "dma read of guest data failed";
      }
    }
    for (std::uint64_t start : released) {
      std::uint64_t word = 0;
      if (dma_engine.read_u64(VirtAddr{start}, word) != Status::kDmaFault)
        return "dma reached a released region";
      ++dma_faults_after_shrink;
    }
    ++verified;
    return {};
  };

  if (auto err = checkpoint(); !err.empty()) return fail(Status::kInvalidArg, err);
  for (std::size_t i = 0; i < cfg.grow; ++i) {
    auto r = rig.alloc(region_bytes);
    if (!r) return fail(r.status(), "as_alloc failed");
    auto frames = rig.ctx.phys_alloc(kCpuDevice, cfg.region_pages, false);
    if (!frames) return fail(frames.status(), "phys_alloc failed");
    if (auto st = rig.ctx.region_map(r->id, Prot::rw(), *frames); st != Status::kSuccess)
      return fail(st, "region_map failed");
    for (std::uint64_t p = 0; p < cfg.region_pages; ++p) {
      const VirtAddr va = r->start + p * kBasePageSize;
      if (guest_engine.write_u64(va, va.value) != Status::kSuccess)
        return fail(Status::kInvalidArg, "guest write failed");
    }
    live.push_back({*r, *frames});
    if (auto err = checkpoint(); !err.empty()) return fail(Status::kInvalidArg, err);
  }
  for (std::size_t i = 0; i < cfg.shrink; ++i) {
    Live victim = live.front();
    live.erase(live.begin());
    if (auto st = rig.ctx.region_unmap(victim.info.id); st != Status::kSuccess)
      return fail(st, "region_unmap failed");
    rig.ctx.phys_free(victim.frames);
    if (auto st = rig.ctx.region_dealloc(victim.info.id); st != Status::kSuccess)
      return fail(st, "region_dealloc failed");
    released.push_back(victim.info.start.value);
    if (auto err = checkpoint(); !err.empty()) return fail(Status::kInvalidArg, err);
  }

  RunResult res;
  res.report = config_echo(cfg);
  res.report["passthrough_checkpoints"] = checkpoints;
  res.report["passthrough_verified"] = verified;
  res.report["passthrough_live_regions"] = live.size();
  res.report["passthrough_dma_faults_after_shrink"] = dma_faults_after_shrink;
  rig.finish(res);
  return res;
}

RunResult run_scenario(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult res;
  switch (cfg.scenario) {
    case Scenario::kVectorAdd: res = run_vectoradd(cfg); break;
    case Scenario::kBp: res = run_bp(cfg); break;
    case Scenario::kChurn: res = run_churn(cfg); break;
    case Scenario::kPassthrough: res = run_passthrough_demo(cfg); break;
  }
  if (cfg.wall_time) {
    const auto dt = std::chrono::steady_clock::now() - t0;
    res.report["wall_time_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(dt).count();
  }
  return res;
}

}  // namespace gmem::harness
