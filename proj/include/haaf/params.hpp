// SPDX-License-Identifier: Apache-2.0
//
// Named parameter collections, seeded initialization and the binary
// checkpoint format.
//
// Checkpoint layout (all integers little-endian):
//   "HAAF1" | version u32 | count u32 |
//   count x { name_len u32 | name utf-8 | rank u32 | dims u64[rank] | values f64[numel] }
// Tensors are written in sorted name order.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "haaf/tensor.hpp"

namespace haaf {

/// Names with this prefix hold fixed statistics and are never optimized.
inline constexpr std::string_view kBufferPrefix = "buffer.";

class ModelParams {
 public:
  using Map = std::map<std::string, Tensor>;

  void add(const std::string& name, Tensor t) {
    if (!tensors_.emplace(name, std::move(t)).second)
      throw std::invalid_argument("duplicate parameter name: " + name);
  }

  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }

  std::size_t size() const { return tensors_.size(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (auto& [k, v] : tensors_) out.push_back(k);
    return out;
  }

  void zero_grad() {
    for (auto& [k, t] : tensors_) t.zero_grad();
  }

  /// Deep copy; the clone shares no storage with *this.
  ModelParams clone() const {
    ModelParams out;
    for (auto& [k, t] : tensors_) out.tensors_.emplace(k, t.clone(t.requires_grad()));
    return out;
  }

  /// Overwrites values of every tensor present in both collections.
  void copy_values_from(const ModelParams& other) {
    for (auto& [k, t] : tensors_) {
      auto it = other.tensors_.find(k);
      if (it == other.tensors_.end()) continue;
      if (it->second.shape() != t.shape())
        throw ShapeError("copy_values_from", k + " " + shape_str(t.shape()), shape_str(it->second.shape()));
      std::copy(it->second.values().begin(), it->second.values().end(), t.mutable_values().begin());
    }
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (auto& [k, t] : tensors_) n += t.size();
    return n;
  }

 private:
  Map tensors_;
};

inline bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape() != ib->second.shape()) return false;
    if (!std::equal(ia->second.values().begin(), ia->second.values().end(), ib->second.values().begin()))
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Initialization

enum class InitKind { xavier_uniform, zeros, ones, normal, uniform_variance };

struct ParamDecl {
  std::string name;
  Shape shape;
  InitKind init = InitKind::xavier_uniform;
  double scale = 0.0;  // normal: stddev; uniform_variance: target variance
  bool trainable = true;
};

using ArchSpec = std::vector<ParamDecl>;

/// FNV-1a; stable across platforms so per-tensor streams do not depend on
/// which other tensors a variant declares.
inline std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::mt19937_64 derived_rng(std::uint64_t seed, std::string_view stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stable_hash(stream)),
                    static_cast<std::uint32_t>(stable_hash(stream) >> 32)};
  return std::mt19937_64(seq);
}

inline Tensor init_tensor(const ParamDecl& d, std::uint64_t seed) {
  for (auto s : d.shape)
    if (s == 0) throw std::invalid_argument("init_params: non-positive dimension in " + d.name);
  const std::size_t n = shape_numel(d.shape);
  std::vector<real> v(n, real(0));
  auto rng = derived_rng(seed, d.name);
  switch (d.init) {
    case InitKind::zeros:
      break;
    case InitKind::ones:
      std::fill(v.begin(), v.end(), real(1));
      break;
    case InitKind::normal: {
      std::normal_distribution<double> dist(0.0, d.scale);
      for (auto& x : v) x = static_cast<real>(dist(rng));
      break;
    }
    case InitKind::xavier_uniform: {
      const double fan_in = static_cast<double>(d.shape.front());
      const double fan_out = static_cast<double>(d.shape.back());
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& x : v) x = static_cast<real>(dist(rng));
      break;
    }
    case InitKind::uniform_variance: {
      // U(-b, b) has variance b^2 / 3.
      const double bound = std::sqrt(3.0 * d.scale);
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& x : v) x = static_cast<real>(dist(rng));
      break;
    }
  }
  return Tensor::from(d.shape, std::move(v), d.trainable);
}

/// Every tensor draws from its own stream derived from (seed, name).
inline ModelParams init_params(const ArchSpec& spec, std::uint64_t seed) {
  ModelParams p;
  for (auto& d : spec) p.add(d.name, init_tensor(d, seed));
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline constexpr char kCheckpointMagic[5] = {'H', 'A', 'A', 'F', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T)))
    throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ModelParams& params) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (auto& [name, t] : params) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le<std::uint64_t>(os, d);
    for (real v : t.values()) detail::put_le<double>(os, static_cast<double>(v));
  }
  if (!os) throw CheckpointError("failed writing checkpoint");
}

inline ModelParams read_checkpoint(std::istream& is) {
  char magic[sizeof(kCheckpointMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError("not a HAAF1 checkpoint (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(is, "tensor count");
  ModelParams out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("checkpoint truncated while reading a name");
    const auto rank = detail::get_le<std::uint32_t>(is, "rank");
    Shape shape;
    if (rank == 0 || rank > 8) throw CheckpointError("bad rank " + std::to_string(rank) + " for " + name);
    std::uint64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(detail::get_le<std::uint64_t>(is, "dims"));
      if (shape.back() == 0 || shape.back() > (std::uint64_t{1} << 32) || (numel *= shape.back()) > (std::uint64_t{1} << 32))
        throw CheckpointError("implausible shape for " + name);
    }
    std::vector<real> values(shape_numel(shape));
    for (auto& v : values) v = static_cast<real>(detail::get_le<double>(is, name.c_str()));
    const bool trainable = !std::string_view(name).starts_with(kBufferPrefix);
    if (out.contains(name)) throw CheckpointError("duplicate tensor " + name);
    out.add(name, Tensor::from(std::move(shape), std::move(values), trainable));
  }
  return out;
}

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  write_checkpoint(os, params);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace haaf
