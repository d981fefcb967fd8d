#include "gmem/metrics.hpp"

namespace gmem {

void Metrics::record_migration(const MigrationEvent& ev) {
  // Device-to-device moves are staged through host memory and so count in
  // both directions.
  if (ev.direction != MigrationDirection::kDevToHost)
    h2d_.fetch_add(ev.bytes, std::memory_order_relaxed);
  if (ev.direction != MigrationDirection::kHostToDev)
    d2h_.fetch_add(ev.bytes, std::memory_order_relaxed);
  migrations_.fetch_add(1, std::memory_order_relaxed);
  std::lock_guard lk(log_mu_);
  if (log_enabled_) log_.push_back(ev);
}

void Metrics::node_created() {
  const auto now = nodes_current_.fetch_add(1, std::memory_order_relaxed) + 1;
  auto peak = nodes_peak_.load(std::memory_order_relaxed);
  while (now > peak && !nodes_peak_.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
}

void Metrics::node_freed() { nodes_current_.fetch_sub(1, std::memory_order_relaxed); }

void Metrics::set_event_log(bool enabled) {
  std::lock_guard lk(log_mu_);
  log_enabled_ = enabled;
}

std::vector<MigrationEvent> Metrics::events() const {
  std::lock_guard lk(log_mu_);
  return log_;
}

MetricsSnapshot Metrics::snapshot() const {
  MetricsSnapshot s;
  s.zero_fill_bytes = zero_fill_bytes_.load();
  s.zero_fill_events = zero_fill_events_.load();
  s.host_to_dev_bytes = h2d_.load();
  s.dev_to_host_bytes = d2h_.load();
  s.dev_faults = dev_faults_.load();
  s.cpu_faults = cpu_faults_.load();
  s.tlb_invalidation_broadcasts = broadcasts_.load();
  s.tlb_entries_invalidated = entries_invalidated_.load();
  s.pt_nodes_current = nodes_current_.load();
  s.pt_nodes_peak = nodes_peak_.load();
  s.evicted_pages = evicted_.load();
  s.migrations = migrations_.load();
  return s;
}

}  // namespace gmem
