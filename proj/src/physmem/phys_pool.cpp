#include "gmem/phys_pool.hpp"

#include <algorithm>
#include <tuple>

namespace gmem {

PhysMemPool::PhysMemPool(DeviceId owner, std::uint64_t begin, std::uint64_t max_pages,
                         bool unbounded)
    : owner_(owner),
      begin_(begin),
      max_pages_(max_pages),
      unbounded_(unbounded),
      max_chunks_((max_pages + kChunkPages - 1) / kChunkPages) {
  chunks_ = std::make_unique<std::atomic<Chunk*>[]>(max_chunks_);
  for (std::size_t i = 0; i < max_chunks_; ++i) chunks_[i].store(nullptr);
}

PhysMemPool::PhysMemPool(DeviceId owner, std::uint64_t begin, std::uint64_t end)
    : PhysMemPool(owner, begin, (end - begin) / kBasePageSize, false) {
  std::lock_guard lk(mu_);
  for (std::size_t i = 0; i < max_chunks_; ++i) add_chunk_locked();
  // The last chunk may extend past the end of the pool.
  capacity_.store(max_pages_);
  free_runs_.clear();
  if (max_pages_ > 0) free_runs_.emplace(0, max_pages_);
  free_count_ = max_pages_;
}

std::unique_ptr<PhysMemPool> PhysMemPool::make_unbounded(DeviceId owner, std::uint64_t max_bytes) {
  return std::unique_ptr<PhysMemPool>(
      new PhysMemPool(owner, 0, max_bytes / kBasePageSize, true));
}

PhysMemPool::~PhysMemPool() {
  for (std::size_t i = 0; i < max_chunks_; ++i) delete chunks_[i].load();
}

void PhysMemPool::add_chunk_locked() {
  const std::uint64_t first = capacity_.load(std::memory_order_relaxed);
  auto* c = new Chunk;
  c->data = std::make_unique<std::uint8_t[]>(kChunkBytes);
  chunks_[first / kChunkPages].store(c, std::memory_order_release);
  capacity_.store(first + kChunkPages, std::memory_order_release);
  free_count_ += kChunkPages;
  // Merge with a trailing free run.
  if (!free_runs_.empty()) {
    auto last = std::prev(free_runs_.end());
    if (last->first + last->second == first) {
      last->second += kChunkPages;
      return;
    }
  }
  free_runs_.emplace(first, kChunkPages);
}

PhysMemPool::Frame& PhysMemPool::frame(std::uint64_t page) const {
  return chunks_[page / kChunkPages].load(std::memory_order_acquire)->frames[page % kChunkPages];
}

std::optional<std::uint64_t> PhysMemPool::page_of(PhysAddr pa) const {
  if (pa.pool != owner_ || pa.addr < begin_) return std::nullopt;
  const auto page = (pa.addr - begin_) / kBasePageSize;
  if (page >= capacity_.load(std::memory_order_acquire)) return std::nullopt;
  return page;
}

bool PhysMemPool::contains(PhysAddr pa) const { return page_of(pa).has_value(); }

std::size_t PhysMemPool::capacity_pages() const { return capacity_.load(); }

std::size_t PhysMemPool::free_pages() const {
  std::lock_guard lk(mu_);
  return free_count_;
}

std::size_t PhysMemPool::active_pages() const {
  std::lock_guard lk(mu_);
  return active_count_;
}

std::size_t PhysMemPool::wired_pages() const {
  std::lock_guard lk(mu_);
  return wired_count_;
}

std::optional<std::vector<std::uint64_t>> PhysMemPool::take_locked(std::size_t n, bool contiguous,
                                                                   std::uint64_t align_pages) {
  std::vector<std::uint64_t> pages;
  if (contiguous) {
    const std::uint64_t base_page = begin_ / kBasePageSize;
    for (auto it = free_runs_.begin(); it != free_runs_.end(); ++it) {
      const auto [start, len] = *it;
      const std::uint64_t s = align_up(base_page + start, align_pages) - base_page;
      if (s + n > start + len) continue;
      free_runs_.erase(it);
      if (s > start) free_runs_.emplace(start, s - start);
      if (s + n < start + len) free_runs_.emplace(s + n, start + len - s - n);
      pages.reserve(n);
      for (std::uint64_t p = s; p < s + n; ++p) pages.push_back(p);
      return pages;
    }
    return std::nullopt;
  }
  if (free_count_ < n) return std::nullopt;
  pages.reserve(n);
  while (pages.size() < n) {
    auto it = free_runs_.begin();
    const auto [start, len] = *it;
    const auto take = std::min<std::uint64_t>(len, n - pages.size());
    for (std::uint64_t p = start; p < start + take; ++p) pages.push_back(p);
    free_runs_.erase(it);
    if (take < len) free_runs_.emplace(start + take, len - take);
  }
  return pages;
}

Expected<std::vector<PhysAddr>> PhysMemPool::alloc(std::size_t n_pages, bool contiguous,
                                                   std::uint64_t align) {
  if (n_pages == 0 || !is_pow2(align) || align < kBasePageSize) return Status::kInvalidArg;
  std::vector<PhysAddr> out;
  {
    std::lock_guard lk(mu_);
    const std::uint64_t align_pages = contiguous ? align / kBasePageSize : 1;
    auto pages = take_locked(n_pages, contiguous, align_pages);
    while (!pages) {
      if (!unbounded_ || capacity_.load() + kChunkPages > max_pages_) return Status::kNoMem;
      add_chunk_locked();
      pages = take_locked(n_pages, contiguous, align_pages);
    }
    out.reserve(pages->size());
    for (auto p : *pages) {
      Frame& f = frame(p);
      f.queue = FrameQueue::kActive;
      f.has_backing = false;
      f.free_pending = false;
      f.tick.store(0, std::memory_order_relaxed);
      out.push_back(PhysAddr{owner_, begin_ + p * kBasePageSize});
    }
    free_count_ -= out.size();
    active_count_ += out.size();
  }
  if (observer_) observer_(out);
  return out;
}

void PhysMemPool::release_page_locked(std::uint64_t page) {
  Frame& f = frame(page);
  f.queue = FrameQueue::kFree;
  f.has_backing = false;
  f.free_pending = false;
  --active_count_;
  ++free_count_;

  auto next = free_runs_.upper_bound(page);
  if (next != free_runs_.begin()) {
    auto prev = std::prev(next);
    if (prev->first + prev->second == page) {
      ++prev->second;
      if (next != free_runs_.end() && next->first == page + 1) {
        prev->second += next->second;
        free_runs_.erase(next);
      }
      return;
    }
  }
  if (next != free_runs_.end() && next->first == page + 1) {
    const auto len = next->second;
    free_runs_.erase(next);
    free_runs_.emplace(page, len + 1);
    return;
  }
  free_runs_.emplace(page, 1);
}

Status PhysMemPool::free(std::span<const PhysAddr> frames) {
  std::lock_guard lk(mu_);
  for (const auto& pa : frames) {
    const auto page = page_of(pa);
    if (!page || !is_aligned(pa.addr, kBasePageSize)) return Status::kInvalidArg;
    const Frame& f = frame(*page);
    if (f.queue != FrameQueue::kActive || f.free_pending) return Status::kInvalidArg;
  }
  for (const auto& pa : frames) {
    const auto page = *page_of(pa);
    Frame& f = frame(page);
    if (f.quarantined)
      f.free_pending = true;
    else
      release_page_locked(page);
  }
  return Status::kSuccess;
}

Status PhysMemPool::wire(std::span<const PhysAddr> frames) {
  std::lock_guard lk(mu_);
  for (const auto& pa : frames) {
    const auto page = page_of(pa);
    if (!page || frame(*page).queue != FrameQueue::kActive || frame(*page).free_pending)
      return Status::kInvalidArg;
  }
  for (const auto& pa : frames) {
    frame(*page_of(pa)).queue = FrameQueue::kWired;
    --active_count_;
    ++wired_count_;
  }
  return Status::kSuccess;
}

Status PhysMemPool::unwire(std::span<const PhysAddr> frames) {
  std::lock_guard lk(mu_);
  for (const auto& pa : frames) {
    const auto page = page_of(pa);
    if (!page || frame(*page).queue != FrameQueue::kWired) return Status::kInvalidArg;
  }
  for (const auto& pa : frames) {
    frame(*page_of(pa)).queue = FrameQueue::kActive;
    ++active_count_;
    --wired_count_;
  }
  return Status::kSuccess;
}

void PhysMemPool::quarantine(std::span<const PhysAddr> frames) {
  std::lock_guard lk(mu_);
  for (const auto& pa : frames)
    if (auto page = page_of(pa)) frame(*page).quarantined = true;
}

void PhysMemPool::release_quarantine(std::span<const PhysAddr> frames) {
  std::lock_guard lk(mu_);
  for (const auto& pa : frames) {
    auto page = page_of(pa);
    if (!page) continue;
    Frame& f = frame(*page);
    f.quarantined = false;
    if (f.free_pending) release_page_locked(*page);
  }
}

bool PhysMemPool::quarantined(PhysAddr pa) const {
  std::lock_guard lk(mu_);
  auto page = page_of(pa);
  return page && frame(*page).quarantined;
}

std::optional<FrameQueue> PhysMemPool::queue_of(PhysAddr pa) const {
  std::lock_guard lk(mu_);
  auto page = page_of(pa);
  if (!page) return std::nullopt;
  return frame(*page).queue;
}

void PhysMemPool::set_backing(PhysAddr pa, std::optional<FrameBacking> backing) {
  std::lock_guard lk(mu_);
  auto page = page_of(pa);
  if (!page) return;
  Frame& f = frame(*page);
  f.has_backing = backing.has_value();
  if (backing) f.backing = *backing;
}

std::optional<FrameBacking> PhysMemPool::backing(PhysAddr pa) const {
  std::lock_guard lk(mu_);
  auto page = page_of(pa);
  if (!page || !frame(*page).has_backing) return std::nullopt;
  return frame(*page).backing;
}

void PhysMemPool::touch(PhysAddr pa, std::uint64_t tick) {
  if (auto page = page_of(pa)) frame(*page).tick.store(tick, std::memory_order_relaxed);
}

std::uint64_t PhysMemPool::last_access(PhysAddr pa) const {
  auto page = page_of(pa);
  return page ? frame(*page).tick.load(std::memory_order_relaxed) : 0;
}

std::vector<PhysAddr> PhysMemPool::lru_candidates(SpaceId space, std::size_t n) const {
  std::lock_guard lk(mu_);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> cands;  // (tick, page)
  const auto cap = capacity_.load();
  for (std::uint64_t p = 0; p < cap; ++p) {
    const Frame& f = frame(p);
    if (f.queue == FrameQueue::kActive && !f.quarantined && !f.free_pending && f.has_backing &&
        f.backing.space == space)
      cands.emplace_back(f.tick.load(std::memory_order_relaxed), p);
  }
  const auto k = std::min(n, cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k), cands.end());
  std::vector<PhysAddr> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    out.push_back(PhysAddr{owner_, begin_ + cands[i].second * kBasePageSize});
  return out;
}

std::size_t PhysMemPool::evictable_pages(SpaceId space) const {
  std::lock_guard lk(mu_);
  std::size_t n = 0;
  const auto cap = capacity_.load();
  for (std::uint64_t p = 0; p < cap; ++p) {
    const Frame& f = frame(p);
    if (f.queue == FrameQueue::kActive && !f.quarantined && !f.free_pending && f.has_backing &&
        f.backing.space == space)
      ++n;
  }
  return n;
}

std::uint8_t* PhysMemPool::bytes(PhysAddr pa) {
  const auto page = (pa.addr - begin_) / kBasePageSize;
  Chunk* c = chunks_[page / kChunkPages].load(std::memory_order_acquire);
  return c->data.get() + (page % kChunkPages) * kBasePageSize + (pa.addr % kBasePageSize);
}

const std::uint8_t* PhysMemPool::bytes(PhysAddr pa) const {
  return const_cast<PhysMemPool*>(this)->bytes(pa);
}

void PhysMemPool::set_alloc_observer(AllocObserver obs) {
  std::lock_guard lk(mu_);
  observer_ = std::move(obs);
}

}  // namespace gmem
