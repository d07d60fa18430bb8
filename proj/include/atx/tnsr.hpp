#pragma once

// Raw tensor container: a text header line "TNSR v1 <ndim> <d0> <d1> ..."
// followed by little-endian IEEE-754 doubles in row-major order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "atx/tensor.hpp"

namespace atx {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFF) << (8 * (7 - i));
    return r;
  }
  return v;
}

}  // namespace detail

inline void write_tnsr(std::ostream& os, const Tensor& t) {
  os << "TNSR v1 " << t.ndim();
  for (std::size_t d : t.shape()) os << ' ' << d;
  os << '\n';
  for (double v : t.data()) {
    const std::uint64_t bits = detail::to_little(std::bit_cast<std::uint64_t>(v));
    char buf[8];
    std::memcpy(buf, &bits, 8);
    os.write(buf, 8);
  }
  if (!os) throw FormatError("TNSR: write failed");
}

inline Tensor read_tnsr(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("TNSR: missing header");
  std::istringstream hs(line);
  std::string magic, version;
  long long ndim = -1;
  hs >> magic >> version >> ndim;
  if (magic != "TNSR" || version != "v1" || !hs || ndim < 0 || ndim > 16) {
    throw FormatError("TNSR: malformed header '" + line + "'");
  }
  Shape shape;
  for (long long i = 0; i < ndim; ++i) {
    long long d = -1;
    if (!(hs >> d) || d < 0) throw FormatError("TNSR: malformed dimension in header '" + line + "'");
    shape.push_back(static_cast<std::size_t>(d));
  }
  std::string extra;
  if (hs >> extra) throw FormatError("TNSR: trailing tokens in header '" + line + "'");
  std::vector<double> data(numel(shape));
  for (double& v : data) {
    char buf[8];
    if (!is.read(buf, 8)) throw FormatError("TNSR: truncated payload");
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    v = std::bit_cast<double>(detail::to_little(bits));
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tnsr(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_tnsr(os, t);
}

inline Tensor load_tnsr(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return read_tnsr(is);
}

}  // namespace atx
