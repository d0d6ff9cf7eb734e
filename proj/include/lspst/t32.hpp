#ifndef LSPST_T32_HPP
#define LSPST_T32_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace lspst {

// "T32" tensor container: magic `T32\0`, u32 LE rank, rank x u32 LE dims,
// then product(dims) 32-bit LE IEEE-754 reals, row-major.
struct T32 {
  std::vector<uint32_t> dims;
  std::vector<float> values;

  int64_t numel() const;
};

void write_t32(const std::string& path, const T32& t);
T32 read_t32(const std::string& path);

// Appends the record to a byte buffer instead of a file (checkpoint blobs);
// returns the byte length written.
size_t append_t32(std::vector<uint8_t>& out, const T32& t);
T32 parse_t32(const uint8_t* bytes, size_t len);

// 8-bit binary PGM (P5), min-max scaled.
void write_pgm(const std::string& path, const std::vector<double>& values,
               int h, int w);

}  // namespace lspst

#endif
