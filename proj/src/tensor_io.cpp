#include "wdfq/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace wdfq {

namespace {

constexpr char kMagic[8] = {'W', 'D', 'F', 'Q', 'T', 'N', 'S', 'R'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) raise(ErrorCode::Io, "cannot open '" + path + "' for writing");
  os.write(kMagic, 8);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int a = 0; a < t.rank(); ++a) put_u64(os, static_cast<std::uint64_t>(t.extent(a)));
  for (std::int64_t i = 0; i < t.size(); ++i) put_u64(os, std::bit_cast<std::uint64_t>(t[i]));
  if (!os) raise(ErrorCode::Io, "short write to '" + path + "'");
}

Tensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise(ErrorCode::Io, "cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    raise(ErrorCode::Format, "'" + path + "' is not a tensor file (bad magic)");
  const std::uint32_t rank = get_u32(is);
  if (!is || rank < 1 || rank > 4)
    raise(ErrorCode::Format, "'" + path + "' has unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  for (std::uint32_t a = 0; a < rank; ++a) {
    shape[a] = static_cast<std::int64_t>(get_u64(is));
    if (!is || shape[a] <= 0)
      raise(ErrorCode::Format, "'" + path + "' has bad extent on axis " + std::to_string(a));
  }
  Tensor t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[i] = std::bit_cast<double>(get_u64(is));
    if (!is) raise(ErrorCode::Format, "'" + path + "' payload truncated");
  }
  return t;
}

}  // namespace wdfq
