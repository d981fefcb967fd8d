#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <ostream>
#include <span>
#include <vector>

#include "gmem/context.hpp"

namespace gmem {

enum class SimDeviceKind : std::uint8_t { kIntegratedGpu, kDiscreteGpu, kDmaDevice };

struct SimDeviceConfig {
  SimDeviceKind kind = SimDeviceKind::kDiscreteGpu;
  // DISCRETE only; 0 leaves the device without local memory.
  std::uint64_t local_mem_bytes = 0;
  AttachMode pt_mode = AttachMode::kCoherent;
  std::uint64_t prep_granularity = kBasePageSize;
  std::size_t tlb_capacity = 64;
};

// Page-table formats of the simulated devices. Integrated GPUs use the
// host's, so they can share its table.
inline constexpr std::uint32_t kHostFormat = 1;
inline constexpr std::uint32_t kDiscreteFormat = 2;
inline constexpr std::uint32_t kDmaFormat = 3;

DeviceCapabilities sim_capabilities(const SimDeviceConfig& cfg);
// Creates the device and registers its local memory.
Expected<DeviceId> create_sim_device(Context& ctx, const SimDeviceConfig& cfg,
                                     MmuDescriptor mmu = {});

struct TraceRecord {
  DeviceId device;
  std::uint64_t va = 0;
  bool write = false;
  Status outcome = Status::kSuccess;
};

// Line-delimited access log: "<device-id> <va-hex> <R|W> <outcome>".
class AccessTrace {
 public:
  void record(const TraceRecord& r);
  std::vector<TraceRecord> records() const;
  std::size_t size() const;
  void write(std::ostream& os) const;

 private:
  mutable std::mutex mu_;
  std::vector<TraceRecord> records_;
};

struct EngineStats {
  std::uint64_t accesses = 0;
  std::uint64_t faults = 0;
  std::uint64_t dma_faults = 0;
};

// Sequential access engine of one device. Every access is translated by
// the device's MMU model; faultable devices fault and retry, others fail
// with kDmaFault.
class SimEngine {
 public:
  static constexpr int kMaxFaults = 4;

  SimEngine(Context& ctx, DeviceId dev, AccessTrace* trace = nullptr);

  DeviceId device() const { return dev_; }
  Status read(VirtAddr va, std::span<std::uint8_t> out);
  Status write(VirtAddr va, std::span<const std::uint8_t> in);
  Status read_u64(VirtAddr va, std::uint64_t& out);
  Status write_u64(VirtAddr va, std::uint64_t v);
  Status read_words(VirtAddr va, std::span<std::uint64_t> out);
  Status write_words(VirtAddr va, std::span<const std::uint64_t> in);

  const EngineStats& stats() const { return stats_; }

 private:
  Status access(VirtAddr va, std::uint8_t* buf, std::size_t n, bool write);
  Status access_page(std::uint64_t va, std::uint8_t* buf, std::size_t n, bool write);

  Context& ctx_;
  DeviceId dev_;
  std::shared_ptr<Context::DeviceState> state_;
  AccessTrace* trace_;
  EngineStats stats_;
};

}  // namespace gmem
