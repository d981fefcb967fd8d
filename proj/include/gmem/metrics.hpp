#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <vector>

#include "gmem/types.hpp"

namespace gmem {

struct MetricsSnapshot {
  std::uint64_t zero_fill_bytes = 0;
  std::uint64_t zero_fill_events = 0;
  std::uint64_t host_to_dev_bytes = 0;
  std::uint64_t dev_to_host_bytes = 0;
  std::uint64_t dev_faults = 0;
  std::uint64_t cpu_faults = 0;
  std::uint64_t tlb_invalidation_broadcasts = 0;
  std::uint64_t tlb_entries_invalidated = 0;
  std::uint64_t pt_nodes_current = 0;
  std::uint64_t pt_nodes_peak = 0;
  std::uint64_t evicted_pages = 0;
  std::uint64_t migrations = 0;
};

enum class MigrationDirection : std::uint8_t { kHostToDev, kDevToHost, kDevToDev };

struct MigrationEvent {
  MigrationDirection direction;
  std::uint64_t bytes;
  DeviceId from_pool;
  DeviceId to_pool;
};

// Global counters for one Context. All counters are monotonic except
// pt_nodes_current, which tracks the live page-table node population.
class Metrics {
 public:
  void add_zero_fill(std::uint64_t bytes) {
    zero_fill_bytes_.fetch_add(bytes, std::memory_order_relaxed);
    zero_fill_events_.fetch_add(1, std::memory_order_relaxed);
  }
  void add_fault(bool cpu) {
    (cpu ? cpu_faults_ : dev_faults_).fetch_add(1, std::memory_order_relaxed);
  }
  void add_broadcast(std::uint64_t entries_removed) {
    broadcasts_.fetch_add(1, std::memory_order_relaxed);
    entries_invalidated_.fetch_add(entries_removed, std::memory_order_relaxed);
  }
  void add_evicted(std::uint64_t pages) { evicted_.fetch_add(pages, std::memory_order_relaxed); }
  void record_migration(const MigrationEvent& ev);

  void node_created();
  void node_freed();

  void set_event_log(bool enabled);
  std::vector<MigrationEvent> events() const;

  MetricsSnapshot snapshot() const;

 private:
  std::atomic<std::uint64_t> zero_fill_bytes_{0};
  std::atomic<std::uint64_t> zero_fill_events_{0};
  std::atomic<std::uint64_t> h2d_{0};
  std::atomic<std::uint64_t> d2h_{0};
  std::atomic<std::uint64_t> dev_faults_{0};
  std::atomic<std::uint64_t> cpu_faults_{0};
  std::atomic<std::uint64_t> broadcasts_{0};
  std::atomic<std::uint64_t> entries_invalidated_{0};
  std::atomic<std::uint64_t> nodes_current_{0};
  std::atomic<std::uint64_t> nodes_peak_{0};
  std::atomic<std::uint64_t> evicted_{0};
  std::atomic<std::uint64_t> migrations_{0};

  mutable std::mutex log_mu_;
  bool log_enabled_ = false;
  std::vector<MigrationEvent> log_;
};

}  // namespace gmem
