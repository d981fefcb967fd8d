#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <shared_mutex>
#include <vector>

#include "gmem/metrics.hpp"
#include "gmem/status.hpp"
#include "gmem/types.hpp"

namespace gmem {

struct Leaf {
  VirtAddr va;  // base of the leaf's span
  PhysAddr frame;
  Prot prot;
  std::uint64_t size = kBasePageSize;
};

// Four-level radix translation table, 512 entries per node, with 4 KiB and
// 2 MiB leaves.
//
// Each node counts its non-empty entries. Mappings of disjoint ranges run
// concurrently under a shared lock and install intermediate nodes with
// compare-and-swap; the losing racer frees its speculative node. A node is
// reclaimed once its count drops to zero, and only under the exclusive lock,
// so no traversal ever observes a freed node. The root is allocated on the
// first mapping and reclaimed like any other node.
class PageTable {
 public:
  static constexpr int kLevels = 4;
  static constexpr std::size_t kFanout = 512;

  PageTable(std::uint64_t id, std::uint32_t format_id, bool shareable, Metrics* metrics);
  ~PageTable();

  PageTable(const PageTable&) = delete;
  PageTable& operator=(const PageTable&) = delete;

  Status map(VirtAddr va, PhysAddr pa, std::uint64_t size, Prot prot);
  Expected<Leaf> unmap(VirtAddr va, std::uint64_t size);
  std::optional<Leaf> walk(VirtAddr va) const;

  std::uint64_t id() const { return id_; }
  std::uint32_t format_id() const { return format_id_; }
  bool shareable() const { return shareable_; }
  std::size_t node_count() const { return nodes_.load(std::memory_order_relaxed); }

  // Devices whose MMU refers to this table. Mutated under the owning
  // address space's exclusion.
  const std::vector<DeviceId>& sharers() const { return sharers_; }
  void add_sharer(DeviceId d);
  void remove_sharer(DeviceId d);

  // Diagnostics: full walks, independent of the running node counter.
  void for_each_leaf(const std::function<void(const Leaf&)>& fn) const;
  std::size_t count_reachable_nodes() const;
  bool verify_refcounts() const;
  // Refcount of the node at `level` (3 = root, 0 = last level) on the path
  // to `va`, if that node exists.
  std::optional<std::uint32_t> node_refcount(VirtAddr va, int level) const;

 private:
  struct Node;

  static std::uint64_t index(std::uint64_t va, int level);
  static Node* child_of(std::uint64_t entry);
  Node* new_node(int level);
  void free_node(Node* n);
  void free_subtree(Node* n);
  void reclaim_path(std::uint64_t va);

  std::uint64_t id_;
  std::uint32_t format_id_;
  bool shareable_;
  Metrics* metrics_;
  std::vector<DeviceId> sharers_;

  mutable std::shared_mutex reclaim_mu_;
  std::atomic<Node*> root_{nullptr};
  std::atomic<std::size_t> nodes_{0};
};

}  // namespace gmem
