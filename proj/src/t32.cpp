#include "lspst/t32.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lspst {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v & 0xff));
  out.push_back(uint8_t((v >> 8) & 0xff));
  out.push_back(uint8_t((v >> 16) & 0xff));
  out.push_back(uint8_t((v >> 24) & 0xff));
}

uint32_t get_u32(const uint8_t* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) |
         (uint32_t(p[3]) << 24);
}

}  // namespace

int64_t T32::numel() const {
  int64_t n = 1;
  for (uint32_t d : dims) n *= int64_t(d);
  return dims.empty() ? 0 : n;
}

size_t append_t32(std::vector<uint8_t>& out, const T32& t) {
  if (int64_t(t.values.size()) != t.numel())
    throw std::invalid_argument("t32: value count does not match dims");
  const size_t start = out.size();
  out.push_back('T');
  out.push_back('3');
  out.push_back('2');
  out.push_back(0);
  put_u32(out, uint32_t(t.dims.size()));
  for (uint32_t d : t.dims) put_u32(out, d);
  for (float v : t.values) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
  }
  return out.size() - start;
}

T32 parse_t32(const uint8_t* bytes, size_t len) {
  if (len < 8 || bytes[0] != 'T' || bytes[1] != '3' || bytes[2] != '2' ||
      bytes[3] != 0)
    throw std::runtime_error("t32: bad magic");
  const uint32_t rank = get_u32(bytes + 4);
  if (len < 8 + size_t(rank) * 4) throw std::runtime_error("t32: truncated");
  T32 t;
  t.dims.resize(rank);
  int64_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    t.dims[i] = get_u32(bytes + 8 + 4 * i);
    n *= int64_t(t.dims[i]);
  }
  const size_t payload = 8 + size_t(rank) * 4;
  if (len < payload + size_t(n) * 4)
    throw std::runtime_error("t32: truncated payload");
  t.values.resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    uint32_t bits = get_u32(bytes + payload + 4 * i);
    std::memcpy(&t.values[i], &bits, 4);
  }
  return t;
}

void write_t32(const std::string& path, const T32& t) {
  std::vector<uint8_t> buf;
  append_t32(buf, t);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("t32: cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(buf.data()),
          std::streamsize(buf.size()));
  if (!f) throw std::runtime_error("t32: write failed: " + path);
}

T32 read_t32(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("t32: cannot open: " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
  return parse_t32(buf.data(), buf.size());
}

void write_pgm(const std::string& path, const std::vector<double>& values,
               int h, int w) {
  if (int64_t(values.size()) != int64_t(h) * w)
    throw std::invalid_argument("pgm: size mismatch");
  double lo = values.empty() ? 0 : values[0], hi = lo;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("pgm: cannot open for write: " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  for (double v : values) {
    int g = int((v - lo) * scale + 0.5);
    f.put(char(std::clamp(g, 0, 255)));
  }
  if (!f) throw std::runtime_error("pgm: write failed: " + path);
}

}  // namespace lspst
