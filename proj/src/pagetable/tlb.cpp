#include "gmem/tlb.hpp"

#include <algorithm>

namespace gmem {

std::optional<TlbEntry> Tlb::lookup(VirtAddr va) {
  std::lock_guard lk(mu_);
  if (mru_ < entries_.size() && entries_[mru_].covers(va.value)) {
    ++stats_.hits;
    return entries_[mru_];
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].covers(va.value)) {
      mru_ = i;
      ++stats_.hits;
      return entries_[i];
    }
  }
  ++stats_.misses;
  return std::nullopt;
}

std::uint64_t Tlb::generation() const {
  std::lock_guard lk(mu_);
  return generation_;
}

void Tlb::fill(const TlbEntry& entry, std::uint64_t observed_generation) {
  std::lock_guard lk(mu_);
  if (observed_generation != generation_) return;
  for (const auto& e : entries_)
    if (e.va_base == entry.va_base && e.size == entry.size) return;
  if (entries_.size() >= capacity_) {
    entries_.erase(entries_.begin());
    ++stats_.evictions;
  }
  entries_.push_back(entry);
  mru_ = entries_.size() - 1;
  ++stats_.fills;
}

std::size_t Tlb::invalidate(std::span<const VaRange> ranges) {
  std::lock_guard lk(mu_);
  ++generation_;
  ++stats_.invalidations;
  const auto before = entries_.size();
  std::erase_if(entries_, [&](const TlbEntry& e) {
    const VaRange span{e.va_base, e.va_base + e.size};
    return std::any_of(ranges.begin(), ranges.end(),
                       [&](const VaRange& r) { return r.overlaps(span); });
  });
  mru_ = 0;
  return before - entries_.size();
}

std::size_t Tlb::flush() {
  std::lock_guard lk(mu_);
  ++generation_;
  const auto n = entries_.size();
  entries_.clear();
  mru_ = 0;
  return n;
}

std::vector<TlbEntry> Tlb::snapshot() const {
  std::lock_guard lk(mu_);
  return entries_;
}

TlbStats Tlb::stats() const {
  std::lock_guard lk(mu_);
  return stats_;
}

std::size_t Tlb::size() const {
  std::lock_guard lk(mu_);
  return entries_.size();
}

Expected<PhysAddr> translate(const PageTable& pt, Tlb& tlb, VirtAddr va, Prot access) {
  if (auto hit = tlb.lookup(va)) {
    if (!hit->prot.permits(access)) return Status::kProtection;
    return hit->frame + (va.value - hit->va_base);
  }
  const auto gen = tlb.generation();
  const auto leaf = pt.walk(va);
  if (!leaf) return Status::kNotFound;
  if (!leaf->prot.permits(access)) return Status::kProtection;
  tlb.fill(TlbEntry{leaf->va.value, leaf->size, leaf->frame, leaf->prot}, gen);
  return leaf->frame + (va.value - leaf->va.value);
}

}  // namespace gmem
