// Weight checkpoint format, bit-exact round trip:
//   magic "RPLK1", then per parameter:
//     u32 LE name length, name bytes, u32 LE rank, u64 LE dims,
//     row-major float64 LE payload.
// Entries run until EOF.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "augdet/tensor.hpp"

namespace augdet {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

constexpr char kCheckpointMagic[5] = {'R', 'P', 'L', 'K', '1'};

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;
  bool eof() const { return pos >= buf.size(); }
  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size())
      throw IoError(std::string("checkpoint: truncated ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= std::uint64_t(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  double f64(const char* what) {
    const std::uint64_t bits = u64(what);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

}  // namespace detail

// Atomic write: temp file in the target directory, then rename.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<Parameter*>& params) {
  std::string out(detail::kCheckpointMagic, 5);
  for (const Parameter* p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p->name.size()));
    out += p->name;
    detail::put_u32(out, static_cast<std::uint32_t>(p->tensor.rank()));
    for (int i = 0; i < p->tensor.rank(); ++i)
      detail::put_u64(out, static_cast<std::uint64_t>(p->tensor.dim(i)));
    for (double v : p->tensor.value()) detail::put_f64(out, v);
  }
  write_file_atomic(path, out);
}

inline std::map<std::string, Tensor> load_checkpoint(
    const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 5 ||
      std::memcmp(bytes.data(), detail::kCheckpointMagic, 5) != 0)
    throw IoError("checkpoint: bad magic in " + path.string());
  detail::ByteReader r{bytes, 5};
  std::map<std::string, Tensor> out;
  while (!r.eof()) {
    const std::uint32_t name_len = r.u32("name length");
    r.need(name_len, "name");
    std::string name = bytes.substr(r.pos, name_len);
    r.pos += name_len;
    const std::uint32_t rank = r.u32("rank");
    std::vector<int> shape;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.u64("dim");
      shape.push_back(static_cast<int>(d));
      n *= static_cast<std::size_t>(d);
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = r.f64("payload");
    if (out.count(name))
      throw IoError("checkpoint: duplicate parameter '" + name + "'");
    out.emplace(name, Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

// Loads into an existing parameter set; names and shapes must match exactly.
inline void restore_params(const std::filesystem::path& path,
                           const std::vector<Parameter*>& params) {
  auto loaded = load_checkpoint(path);
  for (Parameter* p : params) {
    auto it = loaded.find(p->name);
    if (it == loaded.end())
      throw IoError("checkpoint: missing parameter '" + p->name + "'");
    if (it->second.shape() != p->tensor.shape())
      throw IoError("checkpoint: shape mismatch for '" + p->name + "'");
    p->tensor.value_mut() = it->second.value();
    p->momentum.clear();
    loaded.erase(it);
  }
  if (!loaded.empty())
    throw IoError("checkpoint: unexpected parameter '" +
                  loaded.begin()->first + "'");
}

}  // namespace augdet
