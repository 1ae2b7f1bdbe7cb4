// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "danet/errors.hpp"

namespace danet {

/// Extents of a dense (batch, channel, height, width) array.
struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  constexpr std::size_t size() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  constexpr std::size_t item() const noexcept { return c * h * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
  }
};

inline ShapeError shape_mismatch(const std::string& op, const Shape& a, const Shape& b) {
  return ShapeError(op + ": shape mismatch " + a.str() + " vs " + b.str());
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw shape_mismatch(op, a, b);
}

/// Dense row-major NCHW array. `T` is float for training and double for
/// finite-difference checking.
template <class T>
class Tensor {
public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
  }

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor full(Shape s, T v) { return Tensor(s, v); }
  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[index(n, c, h, w)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[index(n, c, h, w)];
  }

  /// Single-element tensors only.
  T item() const {
    if (data_.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  /// Batch items [first, first + count).
  Tensor slice_batch(std::size_t first, std::size_t count) const {
    if (first + count > shape_.n)
      throw ShapeError("slice_batch out of range for " + shape_.str());
    Shape s{count, shape_.c, shape_.h, shape_.w};
    auto begin = data_.begin() + static_cast<std::ptrdiff_t>(first * shape_.item());
    return Tensor(s, std::vector<T>(begin, begin + static_cast<std::ptrdiff_t>(s.size())));
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor&) const = default;

private:
  Shape shape_{};
  std::vector<T> data_;
};

/// Stacks equally shaped tensors along the batch axis.
template <class T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("stack_batch: no items");
  Shape s = items.front().shape();
  std::size_t n = 0;
  for (const auto& t : items) {
    if (t.shape().c != s.c || t.shape().h != s.h || t.shape().w != s.w)
      throw shape_mismatch("stack_batch", s, t.shape());
    n += t.shape().n;
  }
  std::vector<T> data;
  data.reserve(n * s.item());
  for (const auto& t : items) data.insert(data.end(), t.data().begin(), t.data().end());
  return Tensor<T>(Shape{n, s.c, s.h, s.w}, std::move(data));
}

// ---------------------------------------------------------------------------
// DTN1 binary format: "DTN1", four little-endian u64 extents (N,C,H,W), then
// little-endian float32 payload in row-major order.

namespace detail {

inline void put_u64_le(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

inline std::uint64_t get_u64_le(std::istream& is) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), 8);
  if (!is) throw IoError("DTN1: truncated header");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint32_t to_le32(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

} // namespace detail

template <class T>
void write_dtn1(std::ostream& os, const Tensor<T>& t) {
  os.write("DTN1", 4);
  const Shape& s = t.shape();
  for (auto e : {s.n, s.c, s.h, s.w}) detail::put_u64_le(os, static_cast<std::uint64_t>(e));
  std::vector<std::uint32_t> words(t.size());
  for (std::size_t i = 0; i < t.size(); ++i)
    words[i] = detail::to_le32(std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
  os.write(reinterpret_cast<const char*>(words.data()),
           static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!os) throw IoError("DTN1: write failed");
}

template <class T = float>
Tensor<T> read_dtn1(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || std::memcmp(magic.data(), "DTN1", 4) != 0) throw IoError("DTN1: bad magic");
  Shape s;
  s.n = detail::get_u64_le(is);
  s.c = detail::get_u64_le(is);
  s.h = detail::get_u64_le(is);
  s.w = detail::get_u64_le(is);
  constexpr std::size_t kMaxElements = std::size_t(1) << 34;
  if (s.n > kMaxElements || s.c > kMaxElements || s.h > kMaxElements || s.w > kMaxElements ||
      s.size() > kMaxElements)
    throw IoError("DTN1: implausible extents " + s.str());
  std::vector<std::uint32_t> words(s.size());
  is.read(reinterpret_cast<char*>(words.data()),
          static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!is) throw IoError("DTN1: truncated payload for " + s.str());
  std::vector<T> data(words.size());
  for (std::size_t i = 0; i < words.size(); ++i)
    data[i] = static_cast<T>(std::bit_cast<float>(detail::to_le32(words[i])));
  return Tensor<T>(s, std::move(data));
}

template <class T>
void save_dtn1(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  write_dtn1(os, t);
}

template <class T = float>
Tensor<T> load_dtn1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  try {
    return read_dtn1<T>(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

} // namespace danet
