#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <vector>

#include "gmem/page_table.hpp"
#include "gmem/types.hpp"

namespace gmem {

// What currently backs one base page of a space.
struct LogicalEntry {
  PhysAddr frame;
  // Tables holding a translation for this page. Sharers of a shared table
  // are all covered by its single entry here.
  std::vector<PageTable*> holders;
  bool wired = false;
  // Set when the mapping moved the frame to the wired queue itself, so the
  // unmap has to move it back.
  bool wired_by_map = false;
  // Leaf size used for the page in every holder (2 MiB for superpage maps).
  std::uint64_t leaf_size = kBasePageSize;
  // Protection installed for wired maps; faults use the region's.
  Prot prot = Prot::rw();

  bool held_by(const PageTable* t) const {
    return std::find(holders.begin(), holders.end(), t) != holders.end();
  }
  void drop_holder(const PageTable* t) {
    holders.erase(std::remove(holders.begin(), holders.end(), t), holders.end());
  }
};

// Sparse per-page map keyed by base-page address. Absent pages are
// unbacked zero-fill.
class LogicalPageTable {
 public:
  using Map = std::map<std::uint64_t, LogicalEntry>;

  LogicalEntry* find(std::uint64_t page) {
    auto it = map_.find(page);
    return it == map_.end() ? nullptr : &it->second;
  }
  const LogicalEntry* find(std::uint64_t page) const {
    auto it = map_.find(page);
    return it == map_.end() ? nullptr : &it->second;
  }
  LogicalEntry& set(std::uint64_t page, LogicalEntry e) { return map_[page] = std::move(e); }
  void erase(std::uint64_t page) { map_.erase(page); }

  // Entries whose page lies in [begin, end).
  std::vector<std::uint64_t> pages_in(std::uint64_t begin, std::uint64_t end) const {
    std::vector<std::uint64_t> out;
    for (auto it = map_.lower_bound(begin); it != map_.end() && it->first < end; ++it)
      out.push_back(it->first);
    return out;
  }

  std::size_t size() const { return map_.size(); }
  bool empty() const { return map_.empty(); }
  Map& entries() { return map_; }
  const Map& entries() const { return map_; }

 private:
  Map map_;
};

}  // namespace gmem
