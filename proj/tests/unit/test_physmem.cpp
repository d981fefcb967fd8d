#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <random>

#include "common/sim_fixture.hpp"

using namespace gmem;
using testing_support::Sim;

namespace {

DeviceId local_device(Context& ctx) {
  DeviceCapabilities caps;
  caps.has_local_memory = true;
  caps.page_table_format = 2;
  return *ctx.device_create({}, caps);
}

void expect_partition(const PhysMemPool& p) {
  EXPECT_EQ(p.free_pages() + p.active_pages() + p.wired_pages(), p.capacity_pages());
}

}  // namespace

TEST(RegisterPhysmemTest, HundredMegabytes) {
  Context ctx;
  auto d = local_device(ctx);
  ASSERT_EQ(ctx.register_physmem(d, 0, 100ull << 20), Status::kSuccess);
  EXPECT_EQ(ctx.pool(d)->free_pages(), 25600u);
  EXPECT_EQ(ctx.register_physmem(d, 0, 100ull << 20), Status::kBusy);
}

TEST(RegisterPhysmemTest, RoundTrip) {
  Context ctx;
  auto d = local_device(ctx);
  ctx.register_physmem(d, 0, 100ull << 20);
  auto all = ctx.phys_alloc(d, 25600, false);
  ASSERT_TRUE(all);
  EXPECT_EQ(ctx.pool(d)->free_pages(), 0u);
  expect_partition(*ctx.pool(d));
  ASSERT_EQ(ctx.phys_free(*all), Status::kSuccess);
  EXPECT_EQ(ctx.pool(d)->free_pages(), 25600u);
}

TEST(RegisterPhysmemTest, Rejections) {
  Context ctx;
  auto d = local_device(ctx);
  EXPECT_EQ(ctx.register_physmem(d, 0x800, 0x10000), Status::kInvalidArg);
  EXPECT_EQ(ctx.register_physmem(d, 0x10000, 0x10000), Status::kInvalidArg);
  EXPECT_EQ(ctx.register_physmem(kCpuDevice, 0, 0x10000), Status::kBusy);
  auto plain = *ctx.device_create({}, {});
  EXPECT_EQ(ctx.register_physmem(plain, 0, 0x10000), Status::kUnsupported);
  EXPECT_EQ(ctx.register_physmem(DeviceId{77}, 0, 0x10000), Status::kNotFound);
}

TEST(PhysAllocTest, LowestFrameFirst) {
  Context ctx;
  auto d = local_device(ctx);
  ctx.register_physmem(d, 0x100000, 0x100000 + (8 << 20));
  auto f = ctx.phys_alloc(d, 1, false);
  ASSERT_TRUE(f);
  EXPECT_EQ((*f)[0], (PhysAddr{d, 0x100000}));
  EXPECT_EQ(ctx.pool(d)->queue_of((*f)[0]), FrameQueue::kActive);
}

TEST(PhysAllocTest, ContiguousRunIsSuperpageAligned) {
  Context ctx;
  auto d = local_device(ctx);
  ctx.register_physmem(d, 0x1000, 0x1000 + (8 << 20));
  ctx.phys_alloc(d, 1, false);
  auto run = ctx.phys_alloc(d, 512, true);
  ASSERT_TRUE(run);
  EXPECT_TRUE(is_aligned((*run)[0].addr, kLargePageSize));
  for (std::size_t i = 1; i < run->size(); ++i)
    EXPECT_EQ((*run)[i].addr, (*run)[0].addr + i * kBasePageSize);
}

TEST(PhysAllocTest, ExhaustedAndInvalid) {
  Context ctx;
  auto d = local_device(ctx);
  ctx.register_physmem(d, 0, 4 * kBasePageSize);
  EXPECT_TRUE(ctx.phys_alloc(d, 4, false));
  EXPECT_EQ(ctx.phys_alloc(d, 1, false).status(), Status::kNoMem);
  EXPECT_EQ(ctx.phys_alloc(d, 0, false).status(), Status::kInvalidArg);
  EXPECT_EQ(ctx.phys_alloc(DeviceId{55}, 1, false).status(), Status::kNotFound);
}

TEST(PhysAllocTest, HostPoolGrowsOnDemand) {
  Context ctx;
  const auto before = ctx.host_pool().capacity_pages();
  auto f = ctx.phys_alloc(kCpuDevice, before + 1000, false);
  ASSERT_TRUE(f);
  EXPECT_GE(ctx.host_pool().capacity_pages(), before + 1000);
  expect_partition(ctx.host_pool());
}

TEST(PoolTest, QueuePartitionUnderRandomOps) {
  PhysMemPool pool(DeviceId{1}, 0, 1 << 20);
  std::mt19937_64 g(3);
  std::vector<PhysAddr> active, wired;
  for (int i = 0; i < 2000; ++i) {
    switch (g() % 5) {
      case 0:
      case 1: {
        auto f = pool.alloc(1 + g() % 4, g() % 2);
        if (f) active.insert(active.end(), f->begin(), f->end());
        break;
      }
      case 2:
        if (!active.empty()) {
          auto idx = g() % active.size();
          ASSERT_EQ(pool.free({&active[idx], 1}), Status::kSuccess);
          active.erase(active.begin() + idx);
        }
        break;
      case 3:
        if (!active.empty()) {
          auto idx = g() % active.size();
          ASSERT_EQ(pool.wire({&active[idx], 1}), Status::kSuccess);
          wired.push_back(active[idx]);
          active.erase(active.begin() + idx);
        }
        break;
      default:
        if (!wired.empty()) {
          auto idx = g() % wired.size();
          ASSERT_EQ(pool.unwire({&wired[idx], 1}), Status::kSuccess);
          active.push_back(wired[idx]);
          wired.erase(wired.begin() + idx);
        }
    }
    ASSERT_EQ(pool.free_pages() + pool.active_pages() + pool.wired_pages(), pool.capacity_pages());
    ASSERT_EQ(pool.active_pages(), active.size());
    ASSERT_EQ(pool.wired_pages(), wired.size());
  }
}

TEST(PrepareZeroTest, FourKilobyteGranule) {
  Sim s;
  auto g = s.gpu(1 << 20);
  auto f = *s.ctx.phys_alloc(g, 1, false);
  std::memset(s.ctx.pool(g)->bytes(f[0]), 0xcd, kBasePageSize);
  const auto z = s.ctx.metrics().snapshot().zero_fill_bytes;
  ASSERT_EQ(s.ctx.prepare_zero(g, f, kBasePageSize), Status::kSuccess);
  EXPECT_EQ(s.ctx.metrics().snapshot().zero_fill_bytes, z + 4096);
  const auto* b = s.ctx.pool(g)->bytes(f[0]);
  EXPECT_TRUE(std::all_of(b, b + kBasePageSize, [](std::uint8_t c) { return c == 0; }));
}

TEST(PrepareZeroTest, Rejections) {
  Sim s;
  auto g = s.gpu(4 << 20);
  auto f = *s.ctx.phys_alloc(g, 2, false);
  EXPECT_EQ(s.ctx.prepare_zero(g, f, 8192), Status::kInvalidArg);
  EXPECT_EQ(s.ctx.prepare_zero(g, f, kBasePageSize), Status::kInvalidArg);  // run too long
  auto run = *s.ctx.phys_alloc(g, 512, true);
  EXPECT_EQ(s.ctx.prepare_zero(g, run, kLargePageSize), Status::kSuccess);
}

TEST(PrepareZeroTest, SweepEventCounts) {
  for (std::uint64_t gran : {kBasePageSize, kLargePageSize}) {
    Sim s;
    auto d = s.device(SimDeviceKind::kIntegratedGpu, 0, AttachMode::kCoherent, gran);
    auto r = s.alloc(400ull << 20, kLargePageSize);
    SimEngine e(s.ctx, d);
    for (std::uint64_t off = 0; off < r.size; off += kBasePageSize) e.write_u64(r.start + off, 1);
    const auto m = s.ctx.metrics().snapshot();
    EXPECT_EQ(m.zero_fill_events, (400ull << 20) / gran);
    EXPECT_EQ(m.zero_fill_bytes, 400ull << 20);
    EXPECT_EQ(s.ctx.logical_entries(s.as).size(), (400ull << 20) / kBasePageSize);
  }
}

TEST(WireTest, WiredSurvivesPressureUnwiredDoesNot) {
  Sim s;
  auto g = s.gpu(16 * kBasePageSize);
  auto pinned = s.alloc(kBasePageSize);
  auto pf = *s.ctx.phys_alloc(g, 1, false);
  ASSERT_EQ(s.ctx.region_map(pinned.id, Prot::rw(), pf), Status::kSuccess);
  auto r = s.alloc(64 * kBasePageSize);
  SimEngine dev(s.ctx, g);
  for (int i = 0; i < 64; ++i) ASSERT_EQ(dev.write_u64(r.start + i * kBasePageSize, i), Status::kSuccess);
  EXPECT_EQ(s.ctx.logical_lookup(s.as, pinned.start)->frame, pf[0]);
  EXPECT_EQ(s.ctx.pool(g)->queue_of(pf[0]), FrameQueue::kWired);

  s.ctx.region_unmap(pinned.id);
  ASSERT_EQ(s.ctx.pool(g)->queue_of(pf[0]), FrameQueue::kActive);
  // Once unwired and faulted by the device it competes like any other page.
  dev.write_u64(pinned.start, 7);
  for (int i = 0; i < 64; ++i) dev.write_u64(r.start + i * kBasePageSize, i);
  EXPECT_EQ(s.ctx.logical_lookup(s.as, pinned.start)->frame.pool, kCpuDevice);
}

TEST(WireTest, WrongQueue) {
  Context ctx;
  auto f = *ctx.phys_alloc(kCpuDevice, 1, false);
  EXPECT_EQ(ctx.unwire(f), Status::kInvalidArg);
  ASSERT_EQ(ctx.wire(f), Status::kSuccess);
  EXPECT_EQ(ctx.wire(f), Status::kInvalidArg);
  EXPECT_EQ(ctx.phys_free(f), Status::kInvalidArg);
  ctx.unwire(f);
  ctx.phys_free(f);
  EXPECT_EQ(ctx.wire(f), Status::kInvalidArg);
}

TEST(EvictTest, LeastRecentFrameLeaves) {
  Sim s;
  auto g = s.gpu(16 * kBasePageSize);
  auto r = s.alloc(3 * kBasePageSize);
  SimEngine dev(s.ctx, g);
  // Touch so the ticks are ordered p1 < p0 < p2, then evict one.
  dev.write_u64(r.start + kBasePageSize, 1);
  dev.write_u64(r.start, 0);
  dev.write_u64(r.start + 2 * kBasePageSize, 2);
  const auto t1 = s.ctx.logical_lookup(s.as, r.start + kBasePageSize)->last_access_tick;
  const auto t0 = s.ctx.logical_lookup(s.as, r.start)->last_access_tick;
  ASSERT_LT(t1, t0);
  const auto before = s.ctx.metrics().snapshot();
  ASSERT_EQ(s.ctx.evict(g, 1, s.as), Status::kSuccess);
  const auto after = s.ctx.metrics().snapshot();
  EXPECT_EQ(after.dev_to_host_bytes, before.dev_to_host_bytes + 4096);
  EXPECT_EQ(after.evicted_pages, before.evicted_pages + 1);
  EXPECT_EQ(s.ctx.logical_lookup(s.as, r.start + kBasePageSize)->kind, BackingKind::kSwapped);
  EXPECT_FALSE(s.ctx.page_table(g, s.as)->walk(r.start + kBasePageSize));
  EXPECT_EQ(s.ctx.logical_lookup(s.as, r.start)->frame.pool, g);
  EXPECT_EQ(s.ctx.logical_lookup(s.as, r.start + 2 * kBasePageSize)->frame.pool, g);

  // Re-access migrates it back.
  std::uint64_t v = 0;
  dev.read_u64(r.start + kBasePageSize, v);
  EXPECT_EQ(v, 1u);
  EXPECT_EQ(s.ctx.metrics().snapshot().host_to_dev_bytes, after.host_to_dev_bytes + 4096);
}

TEST(EvictTest, MatchesExactLruOracle) {
  Sim s;
  auto g = s.gpu(64 * kBasePageSize);
  auto r = s.alloc(40 * kBasePageSize);
  SimEngine dev(s.ctx, g);
  std::mt19937_64 rng(12);
  for (int i = 0; i < 300; ++i) dev.write_u64(r.start + (rng() % 40) * kBasePageSize, i);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> by_tick;  // (tick, page)
  for (auto& [page, st] : s.ctx.logical_entries(s.as))
    if (st.frame.pool == g) by_tick.emplace_back(st.last_access_tick, page);
  std::sort(by_tick.begin(), by_tick.end());
  ASSERT_GE(by_tick.size(), 10u);
  ASSERT_EQ(s.ctx.evict(g, 10, s.as), Status::kSuccess);
  for (std::size_t i = 0; i < by_tick.size(); ++i) {
    auto st = s.ctx.logical_lookup(s.as, VirtAddr{by_tick[i].second});
    EXPECT_EQ(st->frame.pool == kCpuDevice, i < 10) << i;
  }
}

TEST(EvictTest, Rejections) {
  Sim s;
  auto g = s.gpu(16 * kBasePageSize);
  auto r = s.alloc(2 * kBasePageSize);
  s.ctx.region_map(r.id, Prot::rw(), *s.ctx.phys_alloc(g, 2, false));
  EXPECT_EQ(s.ctx.evict(g, 1, s.as), Status::kNoMem);
  EXPECT_EQ(s.ctx.evict(kCpuDevice, 1, s.as), Status::kInvalidArg);
  EXPECT_EQ(s.ctx.evict(g, 1, SpaceId{99}), Status::kNotFound);
}

TEST(MigrateTest, ContentsPreserved) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(1 << 20);
  auto r = s.alloc(kBasePageSize);
  SimEngine cpu(s.ctx, kCpuDevice), dev(s.ctx, g);
  std::vector<std::uint8_t> fill(kBasePageSize, 0xab);
  cpu.write(r.start, fill);
  auto to = s.ctx.migrate(s.as, r.start, g);
  ASSERT_TRUE(to);
  EXPECT_EQ(to->pool, g);
  EXPECT_FALSE(s.ctx.page_table(kCpuDevice, s.as)->walk(r.start));
  std::vector<std::uint8_t> back(kBasePageSize);
  dev.read(r.start, back);
  EXPECT_EQ(back, fill);
}

TEST(MigrateTest, RoundTripCounters) {
  Sim s;
  s.attach_cpu();
  auto g = s.gpu(1 << 20);
  auto r = s.alloc(kBasePageSize);
  SimEngine dev(s.ctx, g);
  dev.write_u64(r.start, 5);
  const auto m0 = s.ctx.metrics().snapshot();
  ASSERT_TRUE(s.ctx.migrate(s.as, r.start, kCpuDevice));
  ASSERT_TRUE(s.ctx.migrate(s.as, r.start, g));
  const auto m1 = s.ctx.metrics().snapshot();
  EXPECT_EQ(m1.dev_to_host_bytes, m0.dev_to_host_bytes + 4096);
  EXPECT_EQ(m1.host_to_dev_bytes, m0.host_to_dev_bytes + 4096);
  EXPECT_EQ(m1.migrations, m0.migrations + 2);
  std::uint64_t v = 0;
  dev.read_u64(r.start, v);
  EXPECT_EQ(v, 5u);
}

TEST(MigrateTest, Rejections) {
  Sim s;
  auto g = s.gpu(1 << 20);
  auto r = s.alloc(kBasePageSize);
  EXPECT_EQ(s.ctx.migrate(s.as, r.start, g).status(), Status::kNotFound);
  SimEngine dev(s.ctx, g);
  dev.write_u64(r.start, 1);
  EXPECT_EQ(s.ctx.migrate(s.as, r.start, g).status(), Status::kInvalidArg);
  auto w = s.alloc(kBasePageSize);
  s.wire(w);
  EXPECT_EQ(s.ctx.migrate(s.as, w.start, g).status(), Status::kBusy);
}

TEST(ZeroFillTest, IndependentOfCapacity) {
  auto run = [](std::uint64_t mem) {
    Sim s;
    s.attach_cpu();
    auto g = s.gpu(mem);
    auto r = s.alloc(128 * kBasePageSize);
    SimEngine cpu(s.ctx, kCpuDevice), dev(s.ctx, g);
    std::mt19937_64 rng(6);
    for (int i = 0; i < 2000; ++i)
      (rng() % 4 ? dev : cpu).write_u64(r.start + (rng() % 128) * kBasePageSize, i);
    return s.ctx.metrics().snapshot();
  };
  auto small = run(32 * kBasePageSize);
  auto large = run(256 * kBasePageSize);
  EXPECT_EQ(small.zero_fill_bytes, large.zero_fill_bytes);
  EXPECT_GT(small.dev_to_host_bytes, large.dev_to_host_bytes);
}
