#include "gmem/va_allocator.hpp"

#include <algorithm>

namespace gmem {
namespace {

std::uint64_t effective_align(const AllocRequest& req) {
  return std::max<std::uint64_t>(req.align, kBasePageSize);
}

}  // namespace

VaAllocator::VaAllocator(std::uint64_t begin, std::uint64_t end, AllocPolicy policy)
    : begin_(begin), end_(end), policy_(policy) {}

Status VaAllocator::validate(const AllocRequest& req) const {
  if (req.size == 0 || !is_aligned(req.size, kBasePageSize)) return Status::kInvalidArg;
  if (req.align != 0 && !is_pow2(req.align)) return Status::kInvalidArg;
  if (req.no_cross != 0 && (!is_pow2(req.no_cross) || req.no_cross < req.size))
    return Status::kInvalidArg;
  if (req.max_va != 0 && (req.max_va <= begin_ || req.max_va > end_)) return Status::kInvalidArg;
  return Status::kSuccess;
}

bool VaAllocator::satisfies(std::uint64_t start, const AllocRequest& req) const {
  const auto limit = req.max_va ? std::min(req.max_va, end_) : end_;
  if (!is_aligned(start, effective_align(req))) return false;
  if (start + req.size > limit) return false;
  if (req.no_cross != 0 && align_down(start + req.size - 1, req.no_cross) > start) return false;
  return true;
}

std::optional<std::uint64_t> VaAllocator::search(const AllocRequest& req,
                                                 std::uint64_t lo_bound) const {
  const std::uint64_t limit = req.max_va ? std::min(req.max_va, end_) : end_;
  const std::uint64_t guard = policy_.guarded() ? kBasePageSize : 0;
  const std::uint64_t align = effective_align(req);

  auto try_gap = [&](std::uint64_t gap_lo, std::uint64_t gap_hi) -> std::optional<std::uint64_t> {
    if (gap_hi < gap_lo + 2 * guard) return std::nullopt;
    const std::uint64_t lo = std::max(gap_lo + guard, lo_bound);
    const std::uint64_t hi = std::min(gap_hi - guard, limit);
    if (hi <= lo || hi - lo < req.size) return std::nullopt;
    std::uint64_t s = align_up(lo, align);
    if (req.no_cross != 0) {
      const std::uint64_t boundary = align_down(s + req.size - 1, req.no_cross);
      if (boundary > s) s = align_up(boundary, align);
    }
    if (s + req.size <= hi) return s;
    return std::nullopt;
  };

  std::uint64_t prev_end = begin_;
  for (const auto& [start, span] : spans_) {
    if (prev_end >= limit) return std::nullopt;
    if (start > prev_end && start > lo_bound) {
      if (auto s = try_gap(prev_end, start)) return s;
    }
    prev_end = span.end();
  }
  return try_gap(prev_end, end_);
}

Expected<std::uint64_t> VaAllocator::find(const AllocRequest& req) const {
  if (auto st = validate(req); st != Status::kSuccess) return st;
  const bool hint_inside = req.hint > begin_ && req.hint < end_;
  if (auto s = search(req, hint_inside ? req.hint : begin_)) return *s;
  if (hint_inside) {
    if (auto s = search(req, begin_)) return *s;
  }
  return Status::kNoMem;
}

void VaAllocator::insert(std::uint64_t start, std::uint64_t size, Kind kind, RegionId region) {
  spans_[start] = Span{start, size, kind, region};
}

Status VaAllocator::erase(std::uint64_t start) {
  if (spans_.erase(start) == 0) return Status::kNotFound;
  cache_.erase(std::remove(cache_.begin(), cache_.end(), start), cache_.end());
  return Status::kSuccess;
}

void VaAllocator::set_kind(std::uint64_t start, Kind kind, RegionId region) {
  auto it = spans_.find(start);
  if (it == spans_.end()) return;
  it->second.kind = kind;
  it->second.region = region;
}

const VaAllocator::Span* VaAllocator::span_at(std::uint64_t start) const {
  auto it = spans_.find(start);
  return it == spans_.end() ? nullptr : &it->second;
}

const VaAllocator::Span* VaAllocator::lookup(std::uint64_t addr) const {
  auto it = spans_.upper_bound(addr);
  if (it == spans_.begin()) return nullptr;
  --it;
  const Span& s = it->second;
  if (addr >= s.end() || s.kind != Kind::kLive) return nullptr;
  return &s;
}

std::vector<VaAllocator::Span> VaAllocator::spans() const {
  std::vector<Span> out;
  out.reserve(spans_.size());
  for (const auto& [start, span] : spans_) out.push_back(span);
  return out;
}

std::optional<std::uint64_t> VaAllocator::take_cached(const AllocRequest& req) {
  for (auto it = cache_.rbegin(); it != cache_.rend(); ++it) {
    const Span& s = spans_.at(*it);
    if (s.size == req.size && satisfies(s.start, req)) {
      const auto start = *it;
      cache_.erase(std::next(it).base());
      return start;
    }
  }
  return std::nullopt;
}

std::optional<std::uint64_t> VaAllocator::park(std::uint64_t start) {
  cache_.push_back(start);
  if (cache_.size() <= kCacheCapacity) return std::nullopt;
  const auto oldest = cache_.front();
  cache_.pop_front();
  return oldest;
}

}  // namespace gmem
