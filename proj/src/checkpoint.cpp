#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "lspst/net.hpp"
#include "lspst/t32.hpp"

namespace lspst {

namespace fs = std::filesystem;

void save_checkpoint(const std::string& dir, const ParamList<float>& params) {
  fs::create_directories(dir);
  std::vector<uint8_t> blob;
  std::ostringstream idx;
  for (const auto& p : params) {
    const Shape s = p.tensor.shape();
    T32 rec{{uint32_t(s.n), uint32_t(s.c), uint32_t(s.h), uint32_t(s.w)},
            {p.tensor.data().begin(), p.tensor.data().end()}};
    const size_t offset = blob.size();
    const size_t length = append_t32(blob, rec);
    idx << p.name << " " << offset << " " << length << " "
        << (p.trainable ? 1 : 0) << "\n";
  }
  {
    std::ofstream f(fs::path(dir) / "ckpt.idx");
    if (!f) throw std::runtime_error("cannot write checkpoint index in " + dir);
    f << idx.str();
  }
  {
    std::ofstream f(fs::path(dir) / "ckpt.t32blob", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint blob in " + dir);
    f.write(reinterpret_cast<const char*>(blob.data()),
            std::streamsize(blob.size()));
  }
}

void load_checkpoint(const std::string& dir, ParamList<float>& params) {
  const std::string idx_path = (fs::path(dir) / "ckpt.idx").string();
  const std::string blob_path = (fs::path(dir) / "ckpt.t32blob").string();
  std::ifstream fi(idx_path);
  if (!fi) throw std::runtime_error("missing checkpoint index: " + idx_path);
  std::ifstream fb(blob_path, std::ios::binary);
  if (!fb) throw std::runtime_error("missing checkpoint blob: " + blob_path);
  std::vector<uint8_t> blob((std::istreambuf_iterator<char>(fb)),
                            std::istreambuf_iterator<char>());

  size_t next = 0;
  std::string line;
  while (std::getline(fi, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string name;
    size_t offset = 0, length = 0;
    int trainable = 0;
    if (!(is >> name >> offset >> length >> trainable))
      throw std::runtime_error("bad checkpoint index line: " + line);
    if (next >= params.size())
      throw std::runtime_error("checkpoint has more tensors than the model");
    ParamEntry<float>& p = params[next++];
    if (p.name != name)
      throw std::runtime_error("checkpoint tensor order mismatch: expected " +
                               p.name + ", found " + name);
    if (offset + length > blob.size())
      throw std::runtime_error("checkpoint blob truncated at " + name);
    T32 rec = parse_t32(blob.data() + offset, length);
    const Shape s = p.tensor.shape();
    const std::vector<uint32_t> want{uint32_t(s.n), uint32_t(s.c),
                                     uint32_t(s.h), uint32_t(s.w)};
    if (rec.dims != want)
      throw std::runtime_error("checkpoint shape mismatch for " + name +
                               ": model expects " + s.str());
    std::copy(rec.values.begin(), rec.values.end(), p.tensor.data().begin());
  }
  if (next != params.size())
    throw std::runtime_error("checkpoint is missing tensors (got " +
                             std::to_string(next) + " of " +
                             std::to_string(params.size()) + ")");
}

}  // namespace lspst
