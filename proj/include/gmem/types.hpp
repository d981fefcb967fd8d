#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace gmem {

inline constexpr std::uint64_t kBasePageSize = 4096;
inline constexpr std::uint64_t kLargePageSize = 2ull << 20;
inline constexpr std::uint64_t kPagesPerLarge = kLargePageSize / kBasePageSize;
// Page tables translate 48-bit virtual addresses.
inline constexpr std::uint64_t kVaLimit = 1ull << 48;

constexpr bool is_pow2(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }
constexpr std::uint64_t align_down(std::uint64_t v, std::uint64_t a) { return v & ~(a - 1); }
constexpr std::uint64_t align_up(std::uint64_t v, std::uint64_t a) { return (v + a - 1) & ~(a - 1); }
constexpr bool is_aligned(std::uint64_t v, std::uint64_t a) { return (v & (a - 1)) == 0; }

template <typename Tag>
struct Id {
  std::uint64_t value = 0;
  auto operator<=>(const Id&) const = default;
};

struct DeviceTag {};
struct SpaceTag {};
struct RegionTag {};
struct MappingSetTag {};

using DeviceId = Id<DeviceTag>;
using SpaceId = Id<SpaceTag>;
using RegionId = Id<RegionTag>;
using MappingSetId = Id<MappingSetTag>;

// Physical addresses carry a 12-bit pool tag, so device ids are limited to
// that range. The host CPU device takes the top tag.
inline constexpr std::uint64_t kMaxDeviceIds = 4096;
inline constexpr DeviceId kCpuDevice{kMaxDeviceIds - 1};

struct VirtAddr {
  std::uint64_t value = 0;
  auto operator<=>(const VirtAddr&) const = default;
  VirtAddr operator+(std::uint64_t off) const { return VirtAddr{value + off}; }
};

// A byte address inside the physical pool owned by `pool` (a device id, or
// kCpuDevice for host memory).
struct PhysAddr {
  DeviceId pool{};
  std::uint64_t addr = 0;
  auto operator<=>(const PhysAddr&) const = default;
  PhysAddr operator+(std::uint64_t off) const { return PhysAddr{pool, addr + off}; }
};

struct Prot {
  bool read = false;
  bool write = false;

  static constexpr Prot none() { return {false, false}; }
  static constexpr Prot ro() { return {true, false}; }
  static constexpr Prot rw() { return {true, true}; }

  // True when `access` is permitted under this protection.
  constexpr bool permits(Prot access) const {
    return (!access.read || read) && (!access.write || write);
  }
  auto operator<=>(const Prot&) const = default;
};

enum class AttachMode : std::uint8_t { kShared, kCoherent };
enum class PlacementMode : std::uint8_t { kUnique, kReplicateRemote };

struct VaRange {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;  // exclusive
  std::uint64_t size() const { return end - begin; }
  bool overlaps(const VaRange& o) const { return begin < o.end && o.begin < end; }
  auto operator<=>(const VaRange&) const = default;
};

// Composable VA allocation policy. First fit is the only search strategy
// and is always in effect.
struct AllocPolicy {
  enum Flag : std::uint32_t { kFirstFit = 1u, kGuarded = 2u, kCached = 4u };
  std::uint32_t flags = kFirstFit;

  constexpr AllocPolicy() = default;
  constexpr AllocPolicy(std::uint32_t f) : flags(f | kFirstFit) {}  // NOLINT
  constexpr bool guarded() const { return (flags & kGuarded) != 0; }
  constexpr bool cached() const { return (flags & kCached) != 0; }
};

using Callback = std::function<void()>;

std::string to_string(AttachMode m);
std::string to_string(PlacementMode m);

}  // namespace gmem

template <typename Tag>
struct std::hash<gmem::Id<Tag>> {
  std::size_t operator()(const gmem::Id<Tag>& id) const noexcept {
    return std::hash<std::uint64_t>{}(id.value);
  }
};
