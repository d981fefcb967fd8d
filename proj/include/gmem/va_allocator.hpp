#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <vector>

#include "gmem/status.hpp"
#include "gmem/types.hpp"

namespace gmem {

struct AllocRequest {
  std::uint64_t hint = 0;
  std::uint64_t size = 0;
  std::uint64_t align = 0;     // 0 means the base page size
  std::uint64_t no_cross = 0;  // 0 means unconstrained
  std::uint64_t max_va = 0;    // 0 means the end of the space
  Prot prot = Prot::rw();
};

// Ordered index of the allocated virtual ranges of one address space.
//
// Spans are live regions, idle regions parked in the object cache, or
// zombies whose deferred unmap has not completed yet. All three kinds
// occupy address space; only live spans answer lookups.
class VaAllocator {
 public:
  enum class Kind : std::uint8_t { kLive, kIdle, kZombie };

  struct Span {
    std::uint64_t start = 0;
    std::uint64_t size = 0;
    Kind kind = Kind::kLive;
    RegionId region{};
    std::uint64_t end() const { return start + size; }
  };

  static constexpr std::size_t kCacheCapacity = 64;

  VaAllocator(std::uint64_t begin, std::uint64_t end, AllocPolicy policy);

  Status validate(const AllocRequest& req) const;
  // Lowest start >= hint satisfying the request, wrapping once to begin.
  Expected<std::uint64_t> find(const AllocRequest& req) const;

  void insert(std::uint64_t start, std::uint64_t size, Kind kind, RegionId region);
  Status erase(std::uint64_t start);
  void set_kind(std::uint64_t start, Kind kind, RegionId region);
  const Span* span_at(std::uint64_t start) const;
  // The live span containing `addr`.
  const Span* lookup(std::uint64_t addr) const;
  std::vector<Span> spans() const;

  // Object cache of idle regions: exact size, newest first.
  std::optional<std::uint64_t> take_cached(const AllocRequest& req);
  // Parks an idle span; returns the oldest span pushed out of a full cache,
  // which the caller must erase.
  std::optional<std::uint64_t> park(std::uint64_t start);
  std::size_t cached() const { return cache_.size(); }

  std::uint64_t begin() const { return begin_; }
  std::uint64_t end() const { return end_; }
  AllocPolicy policy() const { return policy_; }

 private:
  bool satisfies(std::uint64_t start, const AllocRequest& req) const;
  std::optional<std::uint64_t> search(const AllocRequest& req, std::uint64_t lo_bound) const;

  std::uint64_t begin_;
  std::uint64_t end_;
  AllocPolicy policy_;
  std::map<std::uint64_t, Span> spans_;
  std::deque<std::uint64_t> cache_;  // oldest at front
};

}  // namespace gmem
