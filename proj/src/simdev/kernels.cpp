#include "gmem/kernels.hpp"

#include <random>

namespace gmem {

Status run_kernel_vectoradd(SimEngine& dev, VirtAddr a, VirtAddr b, VirtAddr out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t x = 0;
    std::uint64_t y = 0;
    if (auto st = dev.read_u64(a + i * 8, x); st != Status::kSuccess) return st;
    if (auto st = dev.read_u64(b + i * 8, y); st != Status::kSuccess) return st;
    if (auto st = dev.write_u64(out + i * 8, x + y); st != Status::kSuccess) return st;
  }
  return Status::kSuccess;
}

namespace {

std::int64_t draw_weight(std::mt19937_64& g) {
  return static_cast<std::int64_t>(g() >> 40) - (std::int64_t{1} << 23);
}

std::int64_t draw_sample(std::mt19937_64& g) {
  return static_cast<std::int64_t>(g() >> 31) - q32::kOne;
}

std::span<std::uint64_t> as_words(std::vector<std::int64_t>& v) {
  return {reinterpret_cast<std::uint64_t*>(v.data()), v.size()};
}

}  // namespace

Expected<BpNet> bp_allocate(Context& ctx, SpaceId as, const BpDims& dims) {
  if (dims.in == 0 || dims.hidden == 0 || dims.out == 0) return Status::kInvalidArg;
  BpNet net;
  net.dims = dims;
  const std::uint64_t w1_bytes = align_up(dims.in * dims.hidden * 8, kBasePageSize);
  const std::uint64_t w2_bytes = align_up(dims.hidden * dims.out * 8, kBasePageSize);

  AllocRequest req;
  req.size = w1_bytes + w2_bytes;
  auto w = ctx.as_alloc(as, req);
  if (!w) return w.status();
  net.weights_region = w->id;
  net.w1 = w->start;
  net.w2 = w->start + w1_bytes;

  req.size = align_up((2 * dims.hidden + 2 * dims.out) * 8, kBasePageSize);
  auto a = ctx.as_alloc(as, req);
  if (!a) return a.status();
  net.act_region = a->id;
  net.h = a->start;
  net.dh = net.h + dims.hidden * 8;
  net.y = net.dh + dims.hidden * 8;
  net.e = net.y + dims.out * 8;

  req.size = align_up((dims.in + dims.out) * 8, kBasePageSize);
  auto x = ctx.as_alloc(as, req);
  if (!x) return x.status();
  net.input_region = x->id;
  net.x = x->start;
  net.t = net.x + dims.in * 8;
  return net;
}

Status bp_init(SimEngine& host, const BpNet& net, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const auto& d = net.dims;
  std::vector<std::int64_t> row(d.hidden);
  for (std::size_t i = 0; i < d.in; ++i) {
    for (auto& w : row) w = draw_weight(g);
    if (auto st = host.write_words(net.w1 + i * d.hidden * 8, as_words(row)); st != Status::kSuccess)
      return st;
  }
  row.resize(d.out);
  for (std::size_t j = 0; j < d.hidden; ++j) {
    for (auto& w : row) w = draw_weight(g);
    if (auto st = host.write_words(net.w2 + j * d.out * 8, as_words(row)); st != Status::kSuccess)
      return st;
  }
  return Status::kSuccess;
}

namespace {

Status bp_step_device(SimEngine& dev, const BpNet& net) {
  const auto& d = net.dims;
  std::vector<std::int64_t> x(d.in);
  std::vector<std::int64_t> t(d.out);
  if (auto st = dev.read_words(net.x, as_words(x)); st != Status::kSuccess) return st;
  if (auto st = dev.read_words(net.t, as_words(t)); st != Status::kSuccess) return st;

  // Forward through the hidden layer.
  std::vector<std::int64_t> h(d.hidden, 0);
  std::vector<std::int64_t> row(d.hidden);
  for (std::size_t i = 0; i < d.in; ++i) {
    if (auto st = dev.read_words(net.w1 + i * d.hidden * 8, as_words(row)); st != Status::kSuccess)
      return st;
    for (std::size_t j = 0; j < d.hidden; ++j) h[j] = q32::add(h[j], q32::mul(x[i], row[j]));
  }
  for (auto& v : h) v = v > 0 ? v : 0;
  if (auto st = dev.write_words(net.h, as_words(h)); st != Status::kSuccess) return st;

  // Output layer and error.
  std::vector<std::int64_t> y(d.out, 0);
  std::vector<std::int64_t> w2row(d.out);
  for (std::size_t j = 0; j < d.hidden; ++j) {
    if (auto st = dev.read_words(net.w2 + j * d.out * 8, as_words(w2row)); st != Status::kSuccess)
      return st;
    for (std::size_t k = 0; k < d.out; ++k) y[k] = q32::add(y[k], q32::mul(h[j], w2row[k]));
  }
  std::vector<std::int64_t> e(d.out);
  for (std::size_t k = 0; k < d.out; ++k) e[k] = q32::sub(y[k], t[k]);
  if (auto st = dev.write_words(net.y, as_words(y)); st != Status::kSuccess) return st;
  if (auto st = dev.write_words(net.e, as_words(e)); st != Status::kSuccess) return st;

  // Hidden deltas use the weights from before this step's update.
  std::vector<std::int64_t> dh(d.hidden);
  for (std::size_t j = 0; j < d.hidden; ++j) {
    const VirtAddr at = net.w2 + j * d.out * 8;
    if (auto st = dev.read_words(at, as_words(w2row)); st != Status::kSuccess) return st;
    std::int64_t acc = 0;
    for (std::size_t k = 0; k < d.out; ++k) {
      acc = q32::add(acc, q32::mul(w2row[k], e[k]));
      w2row[k] = q32::sub(w2row[k], q32::mul(h[j], e[k]) >> kBpLearningShift);
    }
    dh[j] = h[j] > 0 ? acc : 0;
    if (auto st = dev.write_words(at, as_words(w2row)); st != Status::kSuccess) return st;
  }
  if (auto st = dev.write_words(net.dh, as_words(dh)); st != Status::kSuccess) return st;

  if (auto st = dev.read_words(net.dh, as_words(dh)); st != Status::kSuccess) return st;
  for (std::size_t i = 0; i < d.in; ++i) {
    const VirtAddr at = net.w1 + i * d.hidden * 8;
    if (auto st = dev.read_words(at, as_words(row)); st != Status::kSuccess) return st;
    for (std::size_t j = 0; j < d.hidden; ++j)
      row[j] = q32::sub(row[j], q32::mul(x[i], dh[j]) >> kBpLearningShift);
    if (auto st = dev.write_words(at, as_words(row)); st != Status::kSuccess) return st;
  }
  return Status::kSuccess;
}

}  // namespace

Status run_kernel_bp(SimEngine& host, SimEngine& dev, const BpNet& net, std::size_t steps,
                     std::uint64_t seed) {
  std::mt19937_64 g(seed ^ 0x9e3779b97f4a7c15ull);
  const auto& d = net.dims;
  std::vector<std::int64_t> x(d.in);
  std::vector<std::int64_t> t(d.out);
  for (std::size_t s = 0; s < steps; ++s) {
    for (auto& v : x) v = draw_sample(g);
    for (auto& v : t) v = draw_sample(g);
    if (auto st = host.write_words(net.x, as_words(x)); st != Status::kSuccess) return st;
    if (auto st = host.write_words(net.t, as_words(t)); st != Status::kSuccess) return st;
    if (auto st = bp_step_device(dev, net); st != Status::kSuccess) return st;
  }
  return Status::kSuccess;
}

Expected<std::uint64_t> bp_checksum(const Context& ctx, SpaceId as, const BpNet& net) {
  std::uint64_t h = 14695981039346656037ull;
  auto fold = [&](VirtAddr at, std::uint64_t bytes) -> Status {
    std::vector<std::uint8_t> buf(kBasePageSize * 16);
    for (std::uint64_t off = 0; off < bytes; off += buf.size()) {
      const std::size_t n = std::min<std::uint64_t>(buf.size(), bytes - off);
      if (auto st = ctx.debug_read(as, at + off, {buf.data(), n}); st != Status::kSuccess) return st;
      for (std::size_t i = 0; i < n; ++i) {
        h ^= buf[i];
        h *= 1099511628211ull;
      }
    }
    return Status::kSuccess;
  };
  const auto& d = net.dims;
  if (auto st = fold(net.w1, d.in * d.hidden * 8); st != Status::kSuccess) return st;
  if (auto st = fold(net.w2, d.hidden * d.out * 8); st != Status::kSuccess) return st;
  return h;
}

}  // namespace gmem
