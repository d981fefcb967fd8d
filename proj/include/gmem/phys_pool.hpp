#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include "gmem/metrics.hpp"
#include "gmem/status.hpp"
#include "gmem/types.hpp"

namespace gmem {

enum class FrameQueue : std::uint8_t { kFree, kActive, kWired };

struct FrameBacking {
  SpaceId space;
  std::uint64_t va = 0;
  auto operator<=>(const FrameBacking&) const = default;
};

// Physical memory of one device, or of the host.
//
// Frames are 4 KiB quanta handed out first-fit from a list of free runs.
// Every frame sits in exactly one of the free, active and wired queues.
// Host pools are unbounded and grow in 2 MiB chunks on demand.
//
// A frame may additionally be quarantined while a deferred unmap of it is
// outstanding. Freeing a quarantined frame is deferred until the quarantine
// is released, so it cannot be handed out again before the invalidation
// that covers it has completed.
class PhysMemPool {
 public:
  static constexpr std::uint64_t kChunkPages = 512;
  static constexpr std::uint64_t kChunkBytes = kChunkPages * kBasePageSize;

  // Fixed-capacity pool covering [begin, end).
  PhysMemPool(DeviceId owner, std::uint64_t begin, std::uint64_t end);
  static std::unique_ptr<PhysMemPool> make_unbounded(DeviceId owner,
                                                     std::uint64_t max_bytes = 64ull << 30);
  ~PhysMemPool();

  PhysMemPool(const PhysMemPool&) = delete;
  PhysMemPool& operator=(const PhysMemPool&) = delete;

  DeviceId owner() const { return owner_; }
  bool unbounded() const { return unbounded_; }
  std::uint64_t begin() const { return begin_; }
  bool contains(PhysAddr pa) const;

  std::size_t capacity_pages() const;
  std::size_t free_pages() const;
  std::size_t active_pages() const;
  std::size_t wired_pages() const;

  // Lowest-addressed frames first. Contiguous runs honor `align` bytes.
  Expected<std::vector<PhysAddr>> alloc(std::size_t n_pages, bool contiguous,
                                        std::uint64_t align = kBasePageSize);
  Status free(std::span<const PhysAddr> frames);
  Status wire(std::span<const PhysAddr> frames);
  Status unwire(std::span<const PhysAddr> frames);

  void quarantine(std::span<const PhysAddr> frames);
  void release_quarantine(std::span<const PhysAddr> frames);
  bool quarantined(PhysAddr pa) const;

  std::optional<FrameQueue> queue_of(PhysAddr pa) const;
  void set_backing(PhysAddr pa, std::optional<FrameBacking> backing);
  std::optional<FrameBacking> backing(PhysAddr pa) const;

  void touch(PhysAddr pa, std::uint64_t tick);
  std::uint64_t last_access(PhysAddr pa) const;

  // Up to `n` active, unwired, unquarantined frames backing pages of
  // `space`, ordered by least recent access (ties by address).
  std::vector<PhysAddr> lru_candidates(SpaceId space, std::size_t n) const;
  std::size_t evictable_pages(SpaceId space) const;

  // Simulated contents. The pointer stays valid for the pool's lifetime.
  std::uint8_t* bytes(PhysAddr pa);
  const std::uint8_t* bytes(PhysAddr pa) const;

  using AllocObserver = std::function<void(std::span<const PhysAddr>)>;
  void set_alloc_observer(AllocObserver obs);

 private:
  struct Frame {
    FrameQueue queue = FrameQueue::kFree;
    bool quarantined = false;
    bool free_pending = false;
    bool has_backing = false;
    FrameBacking backing;
    std::atomic<std::uint64_t> tick{0};
  };
  struct Chunk {
    std::array<Frame, kChunkPages> frames;
    std::unique_ptr<std::uint8_t[]> data;
  };

  PhysMemPool(DeviceId owner, std::uint64_t begin, std::uint64_t max_pages, bool unbounded);

  Frame& frame(std::uint64_t page) const;
  std::optional<std::uint64_t> page_of(PhysAddr pa) const;
  void add_chunk_locked();
  bool grow_locked(std::size_t n_pages, std::uint64_t align_pages);
  std::optional<std::vector<std::uint64_t>> take_locked(std::size_t n, bool contiguous,
                                                        std::uint64_t align_pages);
  void release_page_locked(std::uint64_t page);

  DeviceId owner_;
  std::uint64_t begin_;
  std::uint64_t max_pages_;
  bool unbounded_;

  mutable std::mutex mu_;
  std::unique_ptr<std::atomic<Chunk*>[]> chunks_;
  std::size_t max_chunks_;
  std::atomic<std::uint64_t> capacity_{0};
  std::map<std::uint64_t, std::uint64_t> free_runs_;  // first page -> length
  std::size_t free_count_ = 0;
  std::size_t active_count_ = 0;
  std::size_t wired_count_ = 0;
  AllocObserver observer_;
};

}  // namespace gmem
