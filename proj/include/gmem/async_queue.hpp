#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "gmem/types.hpp"

namespace gmem {

struct AsyncOp {
  enum class Kind : std::uint8_t {
    kUnmapRange,  // leaves already cleared; TLBs and frames still pending
    kCompletion,  // barrier carrying only a callback
  };

  struct Invalidation {
    DeviceId device;
    VaRange range;
  };

  Kind kind = Kind::kUnmapRange;
  RegionId region{};
  std::vector<Invalidation> invalidations;
  std::vector<PhysAddr> quarantined;
  // VA span to hand back to the allocator once the op completes.
  std::optional<VaRange> va_release;
  Callback callback;
  std::uint64_t enqueue_tick = 0;
};

struct AsyncQueueStats {
  std::uint64_t enqueued = 0;
  std::uint64_t flushes = 0;
  std::uint64_t callbacks = 0;
  std::uint64_t batch_flushes = 0;
  std::uint64_t interval_flushes = 0;
};

// Deferred MMU operations of one address space.
//
// A flush merges the pending ranges per device and issues one invalidation
// per device, then releases the quarantined frames and deferred VA spans,
// then fires callbacks in enqueue order. Flushes are serialized; a callback
// that enqueues does not trigger a nested flush.
class AsyncQueue {
 public:
  struct Sink {
    std::function<void(DeviceId, std::span<const VaRange>)> invalidate;
    std::function<void(std::span<const PhysAddr>)> release_frames;
    std::function<void(const VaRange&)> release_va;
  };

  static constexpr std::size_t kDefaultBatch = 64;
  static constexpr std::uint64_t kDefaultInterval = 256;

  explicit AsyncQueue(Sink sink, std::size_t batch = kDefaultBatch,
                      std::uint64_t flush_interval = kDefaultInterval);

  void enqueue(AsyncOp op);
  void flush();
  // Advances the queue clock; flushes once the oldest op is old enough.
  void tick(std::uint64_t n = 1);

  std::size_t pending() const;
  bool pending_covers(const VaRange& r) const;
  bool pending_targets(DeviceId d) const;
  bool pending_for(RegionId r) const;
  // Defers releasing `span` until the newest pending op of `region`
  // completes. False when the region has nothing pending.
  bool attach_va_release(RegionId region, const VaRange& span);

  std::uint64_t now() const { return clock_.load(std::memory_order_relaxed); }
  std::size_t batch() const { return batch_; }
  std::uint64_t flush_interval() const { return interval_; }
  void configure(std::size_t batch, std::uint64_t flush_interval);
  AsyncQueueStats stats() const;

 private:
  bool flushing_here() const;

  Sink sink_;
  std::size_t batch_;
  std::uint64_t interval_;
  std::atomic<std::uint64_t> clock_{0};

  mutable std::mutex mu_;
  std::deque<AsyncOp> pending_;
  AsyncQueueStats stats_;

  std::recursive_mutex flush_mu_;
  std::atomic<std::thread::id> flusher_{};
};

// Sorts and merges overlapping or adjacent ranges.
std::vector<VaRange> coalesce(std::vector<VaRange> ranges);

}  // namespace gmem
