#include "gmem/async_queue.hpp"

#include <algorithm>
#include <map>

namespace gmem {

std::vector<VaRange> coalesce(std::vector<VaRange> ranges) {
  std::sort(ranges.begin(), ranges.end());
  std::vector<VaRange> out;
  for (const auto& r : ranges) {
    if (!out.empty() && r.begin <= out.back().end) {
      out.back().end = std::max(out.back().end, r.end);
    } else {
      out.push_back(r);
    }
  }
  return out;
}

AsyncQueue::AsyncQueue(Sink sink, std::size_t batch, std::uint64_t flush_interval)
    : sink_(std::move(sink)), batch_(batch == 0 ? 1 : batch), interval_(flush_interval) {}

void AsyncQueue::configure(std::size_t batch, std::uint64_t flush_interval) {
  std::lock_guard lk(mu_);
  batch_ = batch == 0 ? 1 : batch;
  interval_ = flush_interval;
}

bool AsyncQueue::flushing_here() const {
  return flusher_.load(std::memory_order_acquire) == std::this_thread::get_id();
}

void AsyncQueue::enqueue(AsyncOp op) {
  bool full = false;
  {
    std::lock_guard lk(mu_);
    op.enqueue_tick = clock_.load(std::memory_order_relaxed);
    pending_.push_back(std::move(op));
    ++stats_.enqueued;
    full = pending_.size() >= batch_;
    if (full && !flushing_here()) ++stats_.batch_flushes;
  }
  if (full && !flushing_here()) flush();
}

void AsyncQueue::flush() {
  std::lock_guard flk(flush_mu_);
  const auto prev = flusher_.exchange(std::this_thread::get_id(), std::memory_order_acq_rel);

  std::deque<AsyncOp> ops;
  {
    std::lock_guard lk(mu_);
    ops.swap(pending_);
    if (!ops.empty()) ++stats_.flushes;
  }

  if (!ops.empty()) {
    std::map<DeviceId, std::vector<VaRange>> per_device;
    std::vector<PhysAddr> frames;
    for (const auto& op : ops) {
      for (const auto& inv : op.invalidations) per_device[inv.device].push_back(inv.range);
      frames.insert(frames.end(), op.quarantined.begin(), op.quarantined.end());
    }
    for (auto& [dev, ranges] : per_device) {
      const auto merged = coalesce(std::move(ranges));
      if (sink_.invalidate) sink_.invalidate(dev, merged);
    }
    if (!frames.empty() && sink_.release_frames) sink_.release_frames(frames);
    for (const auto& op : ops) {
      if (op.va_release && sink_.release_va) sink_.release_va(*op.va_release);
    }
    std::uint64_t fired = 0;
    for (auto& op : ops) {
      if (op.callback) {
        op.callback();
        ++fired;
      }
    }
    std::lock_guard lk(mu_);
    stats_.callbacks += fired;
  }

  flusher_.store(prev, std::memory_order_release);
}

void AsyncQueue::tick(std::uint64_t n) {
  const auto now = clock_.fetch_add(n, std::memory_order_relaxed) + n;
  bool due = false;
  {
    std::lock_guard lk(mu_);
    due = !pending_.empty() && now - pending_.front().enqueue_tick >= interval_;
    if (due && !flushing_here()) ++stats_.interval_flushes;
  }
  if (due && !flushing_here()) flush();
}

std::size_t AsyncQueue::pending() const {
  std::lock_guard lk(mu_);
  return pending_.size();
}

bool AsyncQueue::pending_covers(const VaRange& r) const {
  std::lock_guard lk(mu_);
  for (const auto& op : pending_) {
    for (const auto& inv : op.invalidations)
      if (inv.range.overlaps(r)) return true;
    if (op.va_release && op.va_release->overlaps(r)) return true;
  }
  return false;
}

bool AsyncQueue::pending_targets(DeviceId d) const {
  std::lock_guard lk(mu_);
  for (const auto& op : pending_)
    for (const auto& inv : op.invalidations)
      if (inv.device == d) return true;
  return false;
}

bool AsyncQueue::pending_for(RegionId r) const {
  std::lock_guard lk(mu_);
  return std::any_of(pending_.begin(), pending_.end(),
                     [&](const AsyncOp& op) { return op.region == r; });
}

bool AsyncQueue::attach_va_release(RegionId region, const VaRange& span) {
  std::lock_guard lk(mu_);
  for (auto it = pending_.rbegin(); it != pending_.rend(); ++it) {
    if (it->region == region) {
      it->va_release = span;
      return true;
    }
  }
  return false;
}

AsyncQueueStats AsyncQueue::stats() const {
  std::lock_guard lk(mu_);
  return stats_;
}

}  // namespace gmem
