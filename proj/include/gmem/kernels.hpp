#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <mutex>
#include <vector>

#include "gmem/context.hpp"
#include "gmem/sim.hpp"

namespace gmem {

// out[i] = a[i] + b[i] over 64-bit elements, one translated access each.
Status run_kernel_vectoradd(SimEngine& dev, VirtAddr a, VirtAddr b, VirtAddr out, std::size_t n);

// Three-layer fully connected network trained with plain SGD in Q32.32
// fixed point: ReLU hidden layer, linear output, squared-error loss.
struct BpDims {
  std::size_t in = 16;
  std::size_t hidden = 16;
  std::size_t out = 4;
};

// Hidden-layer width 8192 and 8-byte weights put the two weight matrices at
// roughly 137 MB.
inline constexpr BpDims kPaperScaleDims{2048, 8192, 48};

struct BpNet {
  BpDims dims;
  RegionId weights_region;
  RegionId act_region;
  RegionId input_region;
  VirtAddr w1;  // in x hidden, row-major
  VirtAddr w2;  // hidden x out, row-major
  VirtAddr h;   // hidden activations
  VirtAddr dh;  // hidden deltas
  VirtAddr y;   // outputs
  VirtAddr e;   // output errors
  VirtAddr x;   // input sample
  VirtAddr t;   // target

  std::uint64_t weight_bytes() const { return (dims.in * dims.hidden + dims.hidden * dims.out) * 8; }
};

inline constexpr int kBpLearningShift = 6;

namespace q32 {
inline constexpr std::int64_t kOne = std::int64_t{1} << 32;
inline std::int64_t mul(std::int64_t a, std::int64_t b) {
  return static_cast<std::int64_t>((static_cast<__int128>(a) * b) >> 32);
}
inline std::int64_t add(std::int64_t a, std::int64_t b) {
  return static_cast<std::int64_t>(static_cast<std::uint64_t>(a) + static_cast<std::uint64_t>(b));
}
inline std::int64_t sub(std::int64_t a, std::int64_t b) {
  return static_cast<std::int64_t>(static_cast<std::uint64_t>(a) - static_cast<std::uint64_t>(b));
}
}  // namespace q32

Expected<BpNet> bp_allocate(Context& ctx, SpaceId as, const BpDims& dims);
// Host writes the initial weights drawn from `seed`.
Status bp_init(SimEngine& host, const BpNet& net, std::uint64_t seed);
// Each step the host writes a fresh sample and the device trains on it.
Status run_kernel_bp(SimEngine& host, SimEngine& dev, const BpNet& net, std::size_t steps,
                     std::uint64_t seed);
// FNV-1a over the weight bytes, read without generating traffic.
Expected<std::uint64_t> bp_checksum(const Context& ctx, SpaceId as, const BpNet& net);

// Flags reuse of a frame that some TLB still translates to.
//
// Installed as the allocation observer of every pool: each newly handed
// out frame is checked against every monitored TLB. At quiescent points
// every TLB entry must also still be present in its device's table.
class UseAfterUnmapDetector {
 public:
  UseAfterUnmapDetector(Context& ctx, std::vector<DeviceId> devices);
  ~UseAfterUnmapDetector();

  // Allocates and immediately frees `n` host frames, letting the observer
  // check them; exercised while unmaps are in flight.
  void probe(std::size_t n);
  // Checks TLBs against the tables; call only when nothing is in flight.
  void quiescent_check();
  std::uint64_t violations() const { return violations_.load(); }
  std::uint64_t checked_frames() const { return checked_.load(); }

 private:
  void check(std::span<const PhysAddr> frames);

  Context& ctx_;
  std::vector<DeviceId> devices_;
  std::atomic<std::uint64_t> violations_{0};
  std::atomic<std::uint64_t> checked_{0};
};

enum class ChurnMode : std::uint8_t { kStrict, kAsync };

struct ChurnConfig {
  std::size_t iterations = 1000;
  std::size_t max_pages = 16;
  ChurnMode mode = ChurnMode::kStrict;
  std::uint64_t seed = 1;
  // Frames probed by the detector after every iteration.
  std::size_t probe_frames = 4;
};

struct ChurnReport {
  std::uint64_t iterations = 0;
  std::uint64_t broadcasts = 0;  // received by this engine's device
  std::uint64_t detector_violations = 0;
  std::uint64_t simulated_ops = 0;
  std::uint64_t callbacks = 0;
  std::uint64_t access_errors = 0;
};

// Map, touch, unmap and free short-lived DMA buffers in a loop. The engine's
// device must be a non-faultable device attached and active in `as`.
ChurnReport run_dma_churn(Context& ctx, SpaceId as, SimEngine& dma, const ChurnConfig& cfg,
                          UseAfterUnmapDetector* detector);

}  // namespace gmem
