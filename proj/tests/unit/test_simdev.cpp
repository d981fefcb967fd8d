#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "common/sim_fixture.hpp"
#include "oracles/bp_reference.hpp"

using namespace gmem;
using testing_support::Sim;

namespace {

std::vector<std::uint64_t> fill_iota(SimEngine& host, VirtAddr va, std::size_t n, std::uint64_t k) {
  std::vector<std::uint64_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = k * i;
  EXPECT_EQ(host.write_words(va, v), Status::kSuccess);
  return v;
}

}  // namespace

TEST(SimAccessTest, GpuReadsUnbackedPageAsZeros) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(1 << 20);
  auto r = s.alloc(kBasePageSize);
  SimEngine dev(s.ctx, g);
  std::vector<std::uint64_t> out(512, 0xff);
  ASSERT_EQ(dev.read_words(r.start, out), Status::kSuccess);
  for (auto w : out) EXPECT_EQ(w, 0u);
  EXPECT_EQ(dev.stats().faults, 1u);
}

TEST(SimAccessTest, DmaReadOfUnwiredPageFails) {
  Sim s;
  auto d = s.dma();
  auto r = s.alloc(kBasePageSize);
  SimEngine dma(s.ctx, d);
  std::uint64_t v = 0;
  EXPECT_EQ(dma.read_u64(r.start, v), Status::kDmaFault);
  EXPECT_EQ(dma.stats().dma_faults, 1u);
  EXPECT_EQ(dma.stats().faults, 0u);
  EXPECT_EQ(s.ctx.metrics().snapshot().dev_faults, 0u);
}

TEST(SimAccessTest, DmaSeesWiredBytes) {
  Sim s;
  s.attach_cpu();
  auto d = s.dma();
  auto r = s.alloc(2 * kBasePageSize);
  s.wire(r);
  SimEngine host(s.ctx, kCpuDevice);
  SimEngine dma(s.ctx, d);
  ASSERT_EQ(host.write_u64(r.start + 0x1ff8, 0xabcdef), Status::kSuccess);
  std::uint64_t v = 0;
  ASSERT_EQ(dma.read_u64(r.start + 0x1ff8, v), Status::kSuccess);
  EXPECT_EQ(v, 0xabcdefu);
}

TEST(SimAccessTest, CpuWrittenValueVisibleUnderEachPolicy) {
  for (auto mode : {PlacementMode::kUnique, PlacementMode::kReplicateRemote}) {
    Sim s;
    s.attach_cpu();
    auto g = s.gpu(1 << 20);
    auto r = s.alloc(kBasePageSize);
    ASSERT_EQ(s.ctx.region_set_policy(r.id, std::nullopt, mode), Status::kSuccess);
    SimEngine host(s.ctx, kCpuDevice);
    SimEngine dev(s.ctx, g);
    ASSERT_EQ(host.write_u64(r.start + 16, 7), Status::kSuccess);
    std::uint64_t v = 0;
    ASSERT_EQ(dev.read_u64(r.start + 16, v), Status::kSuccess);
    EXPECT_EQ(v, 7u);
    auto st = s.ctx.logical_lookup(s.as, r.start);
    ASSERT_TRUE(st);
    if (mode == PlacementMode::kUnique) {
      EXPECT_EQ(st->holders, (std::vector<DeviceId>{g}));
      EXPECT_EQ(st->frame.pool, g);
    } else {
      EXPECT_EQ(st->holders.size(), 2u);
      EXPECT_EQ(st->frame.pool, kCpuDevice);
    }
  }
}

TEST(SimAccessTest, AccessSpanningPagesFaultsEach) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(1 << 20);
  auto r = s.alloc(2 * kBasePageSize);
  SimEngine dev(s.ctx, g);
  std::vector<std::uint8_t> buf(16, 1);
  ASSERT_EQ(dev.write(r.start + (kBasePageSize - 8), buf), Status::kSuccess);
  EXPECT_EQ(dev.stats().faults, 2u);
  std::vector<std::uint8_t> back(16, 0);
  ASSERT_EQ(dev.read(r.start + (kBasePageSize - 8), back), Status::kSuccess);
  EXPECT_EQ(back, buf);
}

TEST(SimAccessTest, UnallocatedAddressIsNotFound) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(1 << 20);
  SimEngine dev(s.ctx, g);
  std::uint64_t v = 0;
  EXPECT_EQ(dev.read_u64(VirtAddr{Sim::kBase + 0x100000}, v), Status::kNotFound);
}

TEST(SimAccessTest, FaultsPerAccessBounded) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(64 * kBasePageSize);
  auto r = s.alloc(256 * kBasePageSize);
  SimEngine host(s.ctx, kCpuDevice);
  SimEngine dev(s.ctx, g);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 2000; ++i) {
    const VirtAddr va = r.start + (rng() % 256) * kBasePageSize + (rng() % 512) * 8;
    SimEngine& e = (rng() & 1) ? host : dev;
    const auto before = e.stats().faults;
    std::uint64_t v = 0;
    ASSERT_EQ((rng() & 1) ? e.read_u64(va, v) : e.write_u64(va, i), Status::kSuccess);
    EXPECT_LE(e.stats().faults - before, 2u);
  }
}

TEST(VectorAddTest, ThousandElements) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(1 << 20);
  const std::size_t n = 1024;
  const auto bytes = align_up(n * 8, kBasePageSize);
  auto a = s.alloc(bytes), b = s.alloc(bytes), out = s.alloc(bytes);
  SimEngine host(s.ctx, kCpuDevice);
  SimEngine dev(s.ctx, g);
  fill_iota(host, a.start, n, 1);
  fill_iota(host, b.start, n, 2);
  ASSERT_EQ(run_kernel_vectoradd(dev, a.start, b.start, out.start, n), Status::kSuccess);
  EXPECT_EQ(dev.stats().accesses, 3 * n);
  std::vector<std::uint64_t> res(n);
  ASSERT_EQ(host.read_words(out.start, res), Status::kSuccess);
  for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(res[i], 3 * i);
}

TEST(VectorAddTest, ZeroElements) {
  Sim s;
  auto g = s.gpu(1 << 20);
  SimEngine dev(s.ctx, g);
  EXPECT_EQ(run_kernel_vectoradd(dev, VirtAddr{0}, VirtAddr{0}, VirtAddr{0}, 0), Status::kSuccess);
  EXPECT_EQ(dev.stats().accesses, 0u);
}

TEST(VectorAddTest, ReadOnlyOutputIsProtection) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(1 << 20);
  auto a = s.alloc(kBasePageSize), b = s.alloc(kBasePageSize);
  auto out = s.alloc(kBasePageSize, 0, Prot::ro());
  SimEngine dev(s.ctx, g);
  EXPECT_EQ(run_kernel_vectoradd(dev, a.start, b.start, out.start, 8), Status::kProtection);
  EXPECT_EQ(dev.stats().accesses, 3u);
}

TEST(VectorAddTest, OutputIdenticalAcrossModesAndPolicies) {
  const std::size_t n = 3000;
  std::vector<std::vector<std::uint64_t>> results;
  for (auto mode : {AttachMode::kShared, AttachMode::kCoherent})
    for (auto pol : {PlacementMode::kUnique, PlacementMode::kReplicateRemote})
      for (bool oversub : {false, true}) {
        Sim s;
        s.attach_cpu(mode);
        DeviceId g = mode == AttachMode::kShared
                         ? s.device(SimDeviceKind::kIntegratedGpu, 0, AttachMode::kShared)
                         : s.gpu(oversub ? 4 * kBasePageSize : (16 << 20));
        const auto bytes = align_up(n * 8, kBasePageSize);
        auto a = s.alloc(bytes), b = s.alloc(bytes), out = s.alloc(bytes);
        for (auto& r : {a, b, out}) s.ctx.region_set_policy(r.id, std::nullopt, pol);
        SimEngine host(s.ctx, kCpuDevice);
        SimEngine dev(s.ctx, g);
        std::mt19937_64 rng(11);
        std::vector<std::uint64_t> va(n), vb(n);
        for (auto& x : va) x = rng();
        for (auto& x : vb) x = rng();
        ASSERT_EQ(host.write_words(a.start, va), Status::kSuccess);
        ASSERT_EQ(host.write_words(b.start, vb), Status::kSuccess);
        ASSERT_EQ(run_kernel_vectoradd(dev, a.start, b.start, out.start, n), Status::kSuccess);
        std::vector<std::uint64_t> res(n);
        ASSERT_EQ(host.read_words(out.start, res), Status::kSuccess);
        for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(res[i], va[i] + vb[i]);
        if (oversub && mode == AttachMode::kCoherent) EXPECT_GT(s.ctx.metrics().snapshot().evicted_pages, 0u);
        results.push_back(std::move(res));
      }
  for (auto& r : results) EXPECT_EQ(r, results.front());
}

TEST(VectorAddTest, ConcurrentEnginesOnOneSpace) {
  Sim s;
  s.attach_cpu();
  const std::size_t n = 2048;
  std::vector<DeviceId> devs;
  for (int i = 0; i < 4; ++i) devs.push_back(s.gpu(8 * kBasePageSize));
  auto a = s.alloc(n * 8), b = s.alloc(n * 8);
  std::vector<RegionInfo> outs;
  for (int i = 0; i < 4; ++i) outs.push_back(s.alloc(n * 8));
  for (auto& r : {a, b}) s.ctx.region_set_policy(r.id, std::nullopt, PlacementMode::kReplicateRemote);
  SimEngine host(s.ctx, kCpuDevice);
  fill_iota(host, a.start, n, 5);
  fill_iota(host, b.start, n, 7);
  std::vector<Status> st(4);
  std::vector<std::thread> ts;
  for (int i = 0; i < 4; ++i)
    ts.emplace_back([&, i] {
      SimEngine e(s.ctx, devs[i]);
      st[i] = run_kernel_vectoradd(e, a.start, b.start, outs[i].start, n);
    });
  for (auto& t : ts) t.join();
  for (int i = 0; i < 4; ++i) {
    ASSERT_EQ(st[i], Status::kSuccess);
    std::vector<std::uint64_t> res(n);
    ASSERT_EQ(host.read_words(outs[i].start, res), Status::kSuccess);
    for (std::size_t k = 0; k < n; ++k) ASSERT_EQ(res[k], 12 * k);
  }
}

TEST(BpTest, OneStepMatchesReference) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(1 << 20);
  auto net = *bp_allocate(s.ctx, s.as, BpDims{});
  SimEngine host(s.ctx, kCpuDevice);
  SimEngine dev(s.ctx, g);
  ASSERT_EQ(bp_init(host, net, 3), Status::kSuccess);
  ASSERT_EQ(run_kernel_bp(host, dev, net, 1, 3), Status::kSuccess);
  oracle::BpReference ref(16, 16, 4, 3);
  ref.train(1, 3);
  EXPECT_EQ(*bp_checksum(s.ctx, s.as, net), ref.checksum());
}

TEST(BpTest, ZeroStepsLeavesWeights) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(1 << 20);
  auto net = *bp_allocate(s.ctx, s.as, BpDims{});
  SimEngine host(s.ctx, kCpuDevice);
  SimEngine dev(s.ctx, g);
  ASSERT_EQ(bp_init(host, net, 8), Status::kSuccess);
  const auto before = *bp_checksum(s.ctx, s.as, net);
  ASSERT_EQ(run_kernel_bp(host, dev, net, 0, 8), Status::kSuccess);
  EXPECT_EQ(*bp_checksum(s.ctx, s.as, net), before);
  EXPECT_EQ(before, oracle::BpReference(16, 16, 4, 8).checksum());
  EXPECT_EQ(dev.stats().accesses, 0u);
}

TEST(BpTest, OversubscribedDeviceCompletes) {
  const BpDims dims{64, 64, 8};
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(4 * kBasePageSize);
  auto net = *bp_allocate(s.ctx, s.as, dims);
  ASSERT_GT(net.weight_bytes(), 4 * kBasePageSize);
  SimEngine host(s.ctx, kCpuDevice);
  SimEngine dev(s.ctx, g);
  ASSERT_EQ(bp_init(host, net, 21), Status::kSuccess);
  ASSERT_EQ(run_kernel_bp(host, dev, net, 4, 21), Status::kSuccess);
  EXPECT_GT(s.ctx.metrics().snapshot().evicted_pages, 0u);
  oracle::BpReference ref(64, 64, 8, 21);
  ref.train(4, 21);
  EXPECT_EQ(*bp_checksum(s.ctx, s.as, net), ref.checksum());
}

TEST(BpTest, InvalidDims) {
  Sim s;
  EXPECT_EQ(bp_allocate(s.ctx, s.as, BpDims{0, 4, 4}).status(), Status::kInvalidArg);
}

TEST(ChurnTest, StrictOneBroadcastPerUnmap) {
  Sim s;
  auto d = s.dma();
  SimEngine dma(s.ctx, d);
  UseAfterUnmapDetector det(s.ctx, {d});
  ChurnConfig cfg;
  cfg.iterations = 1000;
  auto rep = run_dma_churn(s.ctx, s.as, dma, cfg, &det);
  EXPECT_EQ(rep.iterations, 1000u);
  EXPECT_EQ(rep.broadcasts, 1000u);
  EXPECT_EQ(rep.callbacks, 1000u);
  EXPECT_EQ(rep.detector_violations, 0u);
  EXPECT_EQ(rep.access_errors, 0u);
  EXPECT_GT(det.checked_frames(), 0u);
}

TEST(ChurnTest, AsyncBoundedBroadcasts) {
  Sim s;
  auto d = s.dma();
  SimEngine dma(s.ctx, d);
  UseAfterUnmapDetector det(s.ctx, {d});
  ChurnConfig cfg;
  cfg.iterations = 1000;
  cfg.mode = ChurnMode::kAsync;
  auto rep = run_dma_churn(s.ctx, s.as, dma, cfg, &det);
  EXPECT_LE(rep.broadcasts, 17u);
  EXPECT_EQ(rep.callbacks, 1000u);
  EXPECT_EQ(rep.detector_violations, 0u);
  EXPECT_EQ(rep.access_errors, 0u);
  EXPECT_EQ(s.ctx.pending_async(s.as), 0u);
}

TEST(ChurnTest, OpCountMatchesPagesTouched) {
  Sim s;
  auto d = s.dma();
  SimEngine dma(s.ctx, d);
  ChurnConfig cfg;
  cfg.iterations = 50;
  cfg.max_pages = 1;
  auto rep = run_dma_churn(s.ctx, s.as, dma, cfg, nullptr);
  EXPECT_EQ(rep.simulated_ops, 50u);
  EXPECT_EQ(dma.stats().accesses, 50u);
}

TEST(DetectorTest, FlagsFrameStillInTlb) {
  Sim s;
  auto d = s.dma();
  auto r = s.alloc(kBasePageSize);
  auto f = s.wire(r);
  SimEngine dma(s.ctx, d);
  std::uint64_t v;
  ASSERT_EQ(dma.read_u64(r.start, v), Status::kSuccess);
  UseAfterUnmapDetector det(s.ctx, {d});
  det.quiescent_check();
  EXPECT_EQ(det.violations(), 0u);
  // A stale entry left behind by hand.
  s.ctx.tlb(d)->fill({Sim::kBase + 0x100000, kBasePageSize, PhysAddr{kCpuDevice, 0x7000000}, Prot::rw()},
                     s.ctx.tlb(d)->generation());
  det.quiescent_check();
  EXPECT_EQ(det.violations(), 1u);
  (void)f;
}

TEST(DetectorTest, ConfinementExhaustiveProbe) {
  Sim s;
  s.attach_cpu();
  auto d = s.dma();
  SimEngine host(s.ctx, kCpuDevice);
  SimEngine dma(s.ctx, d);
  std::mt19937_64 rng(17);
  std::vector<RegionInfo> regions;
  std::set<std::uint64_t> wired;
  for (int i = 0; i < 40; ++i) {
    regions.push_back(s.alloc(kBasePageSize * (1 + rng() % 3)));
    if (rng() % 2) {
      s.wire(regions.back());
      for (std::uint64_t p = 0; p < regions.back().size; p += kBasePageSize)
        wired.insert(regions.back().start.value + p);
    } else {
      std::uint64_t dummy;
      host.read_u64(regions.back().start, dummy);  // backed but not wired
    }
  }
  for (int round = 0; round < 3; ++round) {
    for (auto& r : regions)
      for (std::uint64_t p = 0; p < r.size; p += kBasePageSize) {
        std::uint64_t v;
        const auto st = dma.read_u64(r.start + p, v);
        EXPECT_EQ(st == Status::kSuccess, wired.count(r.start.value + p) == 1);
      }
    // Unwire a few and re-probe.
    for (auto& r : regions)
      if (wired.count(r.start.value) && rng() % 3 == 0) {
        ASSERT_EQ(s.ctx.region_unmap(r.id), Status::kSuccess);
        for (std::uint64_t p = 0; p < r.size; p += kBasePageSize) wired.erase(r.start.value + p);
      }
  }
}

TEST(TraceTest, LineFormat) {
  Sim s;
  s.attach_cpu();
  auto d = s.dma();
  auto r = s.alloc(2 * kBasePageSize);
  AccessTrace trace;
  SimEngine dma(s.ctx, d, &trace);
  SimEngine host(s.ctx, kCpuDevice, &trace);
  ASSERT_EQ(host.write_u64(r.start, 1), Status::kSuccess);
  std::uint64_t v;
  EXPECT_EQ(dma.read_u64(r.start + kBasePageSize, v), Status::kDmaFault);
  ASSERT_EQ(trace.size(), 2u);
  std::ostringstream os;
  trace.write(os);
  char buf[128];
  std::snprintf(buf, sizeof buf, "%u 0x%llx W SUCCESS\n%u 0x%llx R ERR_DMA_FAULT\n",
                static_cast<unsigned>(kCpuDevice.value), static_cast<unsigned long long>(r.start.value),
                static_cast<unsigned>(d.value),
                static_cast<unsigned long long>(r.start.value + kBasePageSize));
  EXPECT_EQ(os.str(), buf);
}

TEST(TraceTest, OrderFollowsExecution) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(1 << 20);
  auto r = s.alloc(8 * kBasePageSize);
  AccessTrace trace;
  SimEngine dev(s.ctx, g, &trace);
  for (int i = 7; i >= 0; --i) ASSERT_EQ(dev.write_u64(r.start + i * kBasePageSize, i), Status::kSuccess);
  auto recs = trace.records();
  ASSERT_EQ(recs.size(), 8u);
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(recs[i].va, r.start.value + (7 - i) * kBasePageSize);
    EXPECT_TRUE(recs[i].write);
  }
}

TEST(SimDeviceTest, CapabilitiesPerKind) {
  SimDeviceConfig c;
  c.kind = SimDeviceKind::kIntegratedGpu;
  EXPECT_FALSE(sim_capabilities(c).has_local_memory);
  EXPECT_EQ(sim_capabilities(c).page_table_format, kHostFormat);
  c.kind = SimDeviceKind::kDmaDevice;
  EXPECT_FALSE(sim_capabilities(c).fault_recoverable);
  c.kind = SimDeviceKind::kDiscreteGpu;
  c.local_mem_bytes = 1 << 20;
  EXPECT_TRUE(sim_capabilities(c).has_local_memory);
  EXPECT_TRUE(sim_capabilities(c).fault_recoverable);
}

TEST(SimDeviceTest, IntegratedSwitchesModes) {
  Context ctx;
  SimDeviceConfig c;
  c.kind = SimDeviceKind::kIntegratedGpu;
  auto d = *create_sim_device(ctx, c);
  auto a = *ctx.as_create(Sim::kBase, 2 * Sim::kBase, {});
  auto b = *ctx.as_create(4 * Sim::kBase, 5 * Sim::kBase, {});
  ASSERT_EQ(ctx.as_attach(a, kCpuDevice, AttachMode::kShared, true), Status::kSuccess);
  EXPECT_EQ(ctx.as_attach(a, d, AttachMode::kShared, true), Status::kSuccess);
  EXPECT_EQ(ctx.as_attach(b, d, AttachMode::kCoherent, false), Status::kSuccess);
  EXPECT_EQ(ctx.device_switch(d, b), Status::kSuccess);
  EXPECT_EQ(ctx.attach_mode(d, b), AttachMode::kCoherent);
}

TEST(SimDeviceTest, SharedAttachJoinsOnlyMatchingFormat) {
  Sim s;
  s.attach_cpu(AttachMode::kShared);
  auto igpu = s.device(SimDeviceKind::kIntegratedGpu, 0, AttachMode::kShared);
  SimDeviceConfig c;
  c.local_mem_bytes = 1 << 20;
  auto d = *create_sim_device(s.ctx, c);
  ASSERT_EQ(s.ctx.as_attach(s.as, d, AttachMode::kShared, true), Status::kSuccess);
  EXPECT_EQ(s.ctx.page_table(igpu, s.as), s.ctx.page_table(kCpuDevice, s.as));
  EXPECT_NE(s.ctx.page_table(d, s.as), s.ctx.page_table(kCpuDevice, s.as));
}
