#include "neas/checkpoint.hpp"

#include <bit>
#include <cstring>

namespace neas::le {

namespace {

template <typename U>
void put(std::ostream& os, U v) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  unsigned char bytes[sizeof(U)] = {};
  is.read(reinterpret_cast<char*>(bytes), sizeof(U));
  if (!is) throw InputError("truncated checkpoint");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void write_i32(std::ostream& os, std::int32_t v) {
  put(os, static_cast<std::uint32_t>(v));
}
void write_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
void write_f64(std::ostream& os, double v) { put(os, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t read_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::int32_t read_i32(std::istream& is) {
  return static_cast<std::int32_t>(get<std::uint32_t>(is));
}
std::uint64_t read_u64(std::istream& is) { return get<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get<std::uint64_t>(is)); }

}  // namespace neas::le
