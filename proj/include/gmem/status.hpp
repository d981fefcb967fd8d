#pragma once

#include <cassert>
#include <cstdint>
#include <string_view>
#include <utility>
#include <variant>

namespace gmem {

// Return codes of every public operation. kSuccess and kRetryAccess are the
// only non-error values; kRetryAccess is produced by fault handling only and
// tells the driver to replay the faulting access.
enum class Status : std::uint8_t {
  kSuccess,
  kNoMem,
  kInvalidArg,
  kNotFound,
  kProtection,
  kBusy,
  kUnsupported,
  kDmaFault,
  kRetryAccess,
};

std::string_view to_string(Status s);

constexpr bool is_error(Status s) {
  return s != Status::kSuccess && s != Status::kRetryAccess;
}

// Value-or-error carrier for operations that produce an object.
template <typename T>
class Expected {
 public:
  Expected(T value) : v_(std::move(value)) {}  // NOLINT(google-explicit-constructor)
  Expected(Status error) : v_(error) {         // NOLINT(google-explicit-constructor)
    assert(is_error(error));
  }

  bool has_value() const { return v_.index() == 0; }
  explicit operator bool() const { return has_value(); }

  Status status() const {
    return has_value() ? Status::kSuccess : std::get<1>(v_);
  }

  T& value() & { return std::get<0>(v_); }
  const T& value() const& { return std::get<0>(v_); }
  T&& value() && { return std::get<0>(std::move(v_)); }

  T& operator*() & { return value(); }
  const T& operator*() const& { return value(); }
  T* operator->() { return &value(); }
  const T* operator->() const { return &value(); }

 private:
  std::variant<T, Status> v_;
};

}  // namespace gmem
