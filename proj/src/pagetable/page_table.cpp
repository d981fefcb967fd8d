#include "gmem/page_table.hpp"

#include <algorithm>
#include <array>
#include <mutex>

namespace gmem {
namespace {

constexpr std::uint64_t kPresent = 1u << 0;
constexpr std::uint64_t kTable = 1u << 1;
constexpr std::uint64_t kRead = 1u << 2;
constexpr std::uint64_t kWrite = 1u << 3;
constexpr std::uint64_t kLarge = 1u << 4;
constexpr int kTagShift = 52;
constexpr std::uint64_t kAddrMask = ((1ull << kTagShift) - 1) & ~(kBasePageSize - 1);

std::uint64_t encode_leaf(PhysAddr pa, Prot prot, bool large) {
  std::uint64_t e = (pa.addr & kAddrMask) | (pa.pool.value << kTagShift) | kPresent;
  if (prot.read) e |= kRead;
  if (prot.write) e |= kWrite;
  if (large) e |= kLarge;
  return e;
}

Leaf decode_leaf(std::uint64_t e, std::uint64_t va) {
  Leaf l;
  l.size = (e & kLarge) ? kLargePageSize : kBasePageSize;
  l.va = VirtAddr{align_down(va, l.size)};
  l.frame = PhysAddr{DeviceId{e >> kTagShift}, e & kAddrMask};
  l.prot = Prot{(e & kRead) != 0, (e & kWrite) != 0};
  return l;
}

bool is_table(std::uint64_t e) { return (e & (kPresent | kTable)) == (kPresent | kTable); }
bool is_leaf(std::uint64_t e) { return (e & (kPresent | kTable)) == kPresent; }

}  // namespace

struct alignas(64) PageTable::Node {
  explicit Node(int lvl) : level(lvl) {
    for (auto& e : entries) e.store(0, std::memory_order_relaxed);
  }
  std::array<std::atomic<std::uint64_t>, kFanout> entries;
  std::atomic<std::uint32_t> refs{0};
  int level;
};

PageTable::PageTable(std::uint64_t id, std::uint32_t format_id, bool shareable, Metrics* metrics)
    : id_(id), format_id_(format_id), shareable_(shareable), metrics_(metrics) {}

PageTable::~PageTable() {
  if (Node* r = root_.load()) free_subtree(r);
}

std::uint64_t PageTable::index(std::uint64_t va, int level) {
  return (va >> (12 + 9 * level)) & (kFanout - 1);
}

PageTable::Node* PageTable::new_node(int level) {
  auto* n = new Node(level);
  nodes_.fetch_add(1, std::memory_order_relaxed);
  if (metrics_) metrics_->node_created();
  return n;
}

void PageTable::free_node(Node* n) {
  delete n;
  nodes_.fetch_sub(1, std::memory_order_relaxed);
  if (metrics_) metrics_->node_freed();
}

void PageTable::free_subtree(Node* n) {
  if (n->level > 0) {
    for (auto& slot : n->entries) {
      const auto e = slot.load(std::memory_order_relaxed);
      if (is_table(e)) free_subtree(reinterpret_cast<Node*>(e & ~std::uint64_t{0x3f}));
    }
  }
  free_node(n);
}

PageTable::Node* PageTable::child_of(std::uint64_t e) {
  return reinterpret_cast<PageTable::Node*>(e & ~std::uint64_t{0x3f});
}

Status PageTable::map(VirtAddr va, PhysAddr pa, std::uint64_t size, Prot prot) {
  if (size != kBasePageSize && size != kLargePageSize) return Status::kUnsupported;
  if (!is_aligned(va.value, size) || !is_aligned(pa.addr, size) || va.value >= kVaLimit ||
      pa.addr >= (1ull << kTagShift) || pa.pool.value >= kMaxDeviceIds)
    return Status::kInvalidArg;

  const int leaf_level = size == kBasePageSize ? 0 : 1;
  std::shared_lock lk(reclaim_mu_);

  Node* node = root_.load(std::memory_order_acquire);
  if (node == nullptr) {
    Node* fresh = new_node(kLevels - 1);
    if (root_.compare_exchange_strong(node, fresh, std::memory_order_acq_rel))
      node = fresh;
    else
      free_node(fresh);
  }

  for (int level = kLevels - 1; level > leaf_level; --level) {
    auto& slot = node->entries[index(va.value, level)];
    std::uint64_t e = slot.load(std::memory_order_acquire);
    if (e == 0) {
      Node* child = new_node(level - 1);
      const std::uint64_t enc = reinterpret_cast<std::uintptr_t>(child) | kPresent | kTable;
      if (slot.compare_exchange_strong(e, enc, std::memory_order_acq_rel)) {
        node->refs.fetch_add(1, std::memory_order_acq_rel);
        e = enc;
      } else {
        free_node(child);
      }
    }
    if (!is_table(e)) return Status::kInvalidArg;  // a superpage already covers va
    node = child_of(e);
  }

  auto& slot = node->entries[index(va.value, leaf_level)];
  std::uint64_t expected = 0;
  if (!slot.compare_exchange_strong(expected, encode_leaf(pa, prot, leaf_level == 1),
                                    std::memory_order_acq_rel))
    return Status::kInvalidArg;
  node->refs.fetch_add(1, std::memory_order_acq_rel);
  return Status::kSuccess;
}

Expected<Leaf> PageTable::unmap(VirtAddr va, std::uint64_t size) {
  if (size != kBasePageSize && size != kLargePageSize) return Status::kInvalidArg;
  const int leaf_level = size == kBasePageSize ? 0 : 1;
  Leaf out;
  bool reclaim = false;
  {
    std::shared_lock lk(reclaim_mu_);
    Node* node = root_.load(std::memory_order_acquire);
    if (node == nullptr) return Status::kNotFound;
    for (int level = kLevels - 1; level > leaf_level; --level) {
      const auto e = node->entries[index(va.value, level)].load(std::memory_order_acquire);
      if (!is_table(e)) return Status::kNotFound;
      node = child_of(e);
    }
    auto& slot = node->entries[index(va.value, leaf_level)];
    auto e = slot.load(std::memory_order_acquire);
    if (!is_leaf(e) || ((e & kLarge) != 0) != (leaf_level == 1)) return Status::kNotFound;
    if (!is_aligned(va.value, size)) return Status::kNotFound;
    if (!slot.compare_exchange_strong(e, 0, std::memory_order_acq_rel)) return Status::kNotFound;
    out = decode_leaf(e, va.value);
    reclaim = node->refs.fetch_sub(1, std::memory_order_acq_rel) == 1;
  }
  if (reclaim) {
    std::unique_lock lk(reclaim_mu_);
    reclaim_path(va.value);
  }
  return out;
}

void PageTable::reclaim_path(std::uint64_t va) {
  std::array<Node*, kLevels> path{};
  Node* node = root_.load(std::memory_order_acquire);
  if (node == nullptr) return;
  int depth = 0;
  path[0] = node;
  while (node->level > 0) {
    const auto e = node->entries[index(va, node->level)].load(std::memory_order_acquire);
    if (!is_table(e)) break;
    node = child_of(e);
    path[++depth] = node;
  }
  for (int i = depth; i >= 1; --i) {
    if (path[i]->refs.load(std::memory_order_acquire) != 0) break;
    Node* parent = path[i - 1];
    parent->entries[index(va, parent->level)].store(0, std::memory_order_release);
    parent->refs.fetch_sub(1, std::memory_order_acq_rel);
    free_node(path[i]);
  }
  if (path[0]->refs.load(std::memory_order_acquire) == 0) {
    root_.store(nullptr, std::memory_order_release);
    free_node(path[0]);
  }
}

std::optional<Leaf> PageTable::walk(VirtAddr va) const {
  if (va.value >= kVaLimit) return std::nullopt;
  std::shared_lock lk(reclaim_mu_);
  const Node* node = root_.load(std::memory_order_acquire);
  if (node == nullptr) return std::nullopt;
  for (int level = kLevels - 1; level >= 0; --level) {
    const auto e = node->entries[index(va.value, level)].load(std::memory_order_acquire);
    if (is_leaf(e)) return decode_leaf(e, va.value);
    if (!is_table(e)) return std::nullopt;
    node = child_of(e);
  }
  return std::nullopt;
}

void PageTable::add_sharer(DeviceId d) {
  if (std::find(sharers_.begin(), sharers_.end(), d) == sharers_.end()) sharers_.push_back(d);
}

void PageTable::remove_sharer(DeviceId d) {
  sharers_.erase(std::remove(sharers_.begin(), sharers_.end(), d), sharers_.end());
}

void PageTable::for_each_leaf(const std::function<void(const Leaf&)>& fn) const {
  std::shared_lock lk(reclaim_mu_);
  const Node* root = root_.load(std::memory_order_acquire);
  if (root == nullptr) return;
  auto visit = [&](auto&& self, const Node* n, std::uint64_t base) -> void {
    for (std::size_t i = 0; i < kFanout; ++i) {
      const auto e = n->entries[i].load(std::memory_order_acquire);
      const std::uint64_t va = base | (static_cast<std::uint64_t>(i) << (12 + 9 * n->level));
      if (is_leaf(e))
        fn(decode_leaf(e, va));
      else if (is_table(e))
        self(self, child_of(e), va);
    }
  };
  visit(visit, root, 0);
}

std::size_t PageTable::count_reachable_nodes() const {
  std::shared_lock lk(reclaim_mu_);
  const Node* root = root_.load(std::memory_order_acquire);
  if (root == nullptr) return 0;
  auto count = [](auto&& self, const Node* n) -> std::size_t {
    std::size_t c = 1;
    if (n->level == 0) return c;
    for (const auto& slot : n->entries) {
      const auto e = slot.load(std::memory_order_acquire);
      if (is_table(e)) c += self(self, child_of(e));
    }
    return c;
  };
  return count(count, root);
}

bool PageTable::verify_refcounts() const {
  std::shared_lock lk(reclaim_mu_);
  const Node* root = root_.load(std::memory_order_acquire);
  if (root == nullptr) return true;
  auto check = [](auto&& self, const Node* n) -> bool {
    std::uint32_t used = 0;
    for (const auto& slot : n->entries) {
      const auto e = slot.load(std::memory_order_acquire);
      if (e == 0) continue;
      ++used;
      if (is_table(e) && !self(self, child_of(e))) return false;
    }
    return used == n->refs.load(std::memory_order_acquire);
  };
  return check(check, root);
}

std::optional<std::uint32_t> PageTable::node_refcount(VirtAddr va, int level) const {
  std::shared_lock lk(reclaim_mu_);
  const Node* node = root_.load(std::memory_order_acquire);
  if (node == nullptr) return std::nullopt;
  while (node->level > level) {
    const auto e = node->entries[index(va.value, node->level)].load(std::memory_order_acquire);
    if (!is_table(e)) return std::nullopt;
    node = child_of(e);
  }
  return node->refs.load(std::memory_order_acquire);
}

}  // namespace gmem
