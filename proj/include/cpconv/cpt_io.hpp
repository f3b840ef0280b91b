#pragma once

// CPT1 binary tensor files:
//   "CPT1" | dtype u8 (0 = f32, 1 = f64) | ndim u8 | ndim x u64 LE dims |
//   row-major LE elements.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "cpconv/tensor.hpp"

namespace cpconv {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return DType::f32;
  } else {
    static_assert(std::is_same_v<T, double>, "CPT1 stores f32 or f64 only");
    return DType::f64;
  }
}

namespace detail {

template <typename U>
void put_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& is) {
  static_assert(std::is_unsigned_v<U>);
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) throw FormatError("CPT1: truncated stream");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

template <typename T>
using bits_of = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename T>
std::vector<T> read_elements(std::istream& is, std::size_t count) {
  std::vector<T> out(count);
  for (auto& v : out) v = std::bit_cast<T>(get_le<bits_of<T>>(is));
  return out;
}

}  // namespace detail

template <typename T>
void write_cpt(std::ostream& os, const DenseTensor<T>& t) {
  os.write("CPT1", 4);
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  if (t.ndim() > 255) throw FormatError("CPT1: too many axes");
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
  for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(os, d);
  for (T v : t.data()) detail::put_le(os, std::bit_cast<detail::bits_of<T>>(v));
  if (!os) throw FormatError("CPT1: write failed");
}

// Either precision, as stored.
using AnyTensor = std::variant<DenseTensor<float>, DenseTensor<double>>;

inline AnyTensor read_cpt_any(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::memcmp(magic.data(), "CPT1", 4) != 0) throw FormatError("CPT1: bad magic");
  const auto code = detail::get_le<std::uint8_t>(is);
  const auto ndim = detail::get_le<std::uint8_t>(is);
  if (ndim == 0) throw FormatError("CPT1: zero axes");
  Shape shape(ndim);
  for (auto& d : shape) {
    d = detail::get_le<std::uint64_t>(is);
    if (d == 0) throw FormatError("CPT1: zero-sized axis");
  }
  const std::size_t count = shape_size(shape);
  switch (code) {
    case 0:
      return DenseTensor<float>(shape, detail::read_elements<float>(is, count));
    case 1:
      return DenseTensor<double>(shape, detail::read_elements<double>(is, count));
    default:
      throw FormatError("CPT1: unknown dtype code " + std::to_string(code));
  }
}

// Reads either precision and converts to T.
template <typename T>
DenseTensor<T> read_cpt(std::istream& is) {
  return std::visit([](const auto& t) { return t.template cast<T>(); }, read_cpt_any(is));
}

template <typename T>
void save_cpt(const std::filesystem::path& path, const DenseTensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_cpt(os, t);
}

template <typename T>
DenseTensor<T> load_cpt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_cpt<T>(is);
}

}  // namespace cpconv
