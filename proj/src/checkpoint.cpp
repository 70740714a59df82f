#include "genloop/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <vector>

namespace genloop::nn {

namespace {

constexpr char kMagic[8] = {'G', 'L', 'C', 'K', 'P', 'T', '0', '1'};

void put_u32(std::vector<char>& buf, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.insert(buf.end(), b, b + 4);
}

void put_u64(std::vector<char>& buf, uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  buf.insert(buf.end(), b, b + 8);
}

void put_str(std::vector<char>& buf, const std::string& s) {
  put_u32(buf, static_cast<uint32_t>(s.size()));
  buf.insert(buf.end(), s.begin(), s.end());
}

struct Reader {
  const char* p;
  const char* end;
  const std::string& path;

  void need(size_t n) const {
    if (static_cast<size_t>(end - p) < n)
      throw DataError("checkpoint truncated: " + path);
  }
  uint32_t u32() {
    need(4);
    uint32_t v;
    std::memcpy(&v, p, 4);
    p += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v;
    std::memcpy(&v, p, 8);
    p += 8;
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(p, p + n);
    p += n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const std::string& arch,
                     const ParamSet& params) {
  std::vector<char> buf;
  buf.insert(buf.end(), kMagic, kMagic + 8);
  put_u32(buf, 1);
  put_str(buf, arch);
  put_u64(buf, static_cast<uint64_t>(params.step));
  put_u32(buf, static_cast<uint32_t>(params.entries.size()));
  for (const auto& e : params.entries) {
    put_str(buf, e.name);
    put_u32(buf, static_cast<uint32_t>(e.value.rows()));
    put_u32(buf, static_cast<uint32_t>(e.value.cols()));
    // row-major on disk
    for (Eigen::Index r = 0; r < e.value.rows(); ++r)
      for (Eigen::Index c = 0; c < e.value.cols(); ++c) {
        float v = e.value(r, c);
        char b[4];
        std::memcpy(b, &v, 4);
        buf.insert(buf.end(), b, b + 4);
      }
  }
  uint32_t crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  put_u32(buf, crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("short write on checkpoint: " + path);
}

CheckpointMeta load_checkpoint(const std::string& path, ParamSet& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  if (buf.size() < 12) throw DataError("checkpoint too small: " + path);

  uint32_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
  uint32_t actual = static_cast<uint32_t>(crc32(
      0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
  if (stored != actual)
    throw IntegrityError("checkpoint checksum mismatch: " + path);

  Reader r{buf.data(), buf.data() + buf.size() - 4, path};
  r.need(8);
  if (std::memcmp(r.p, kMagic, 8) != 0)
    throw DataError("bad checkpoint magic: " + path);
  r.p += 8;
  uint32_t version = r.u32();
  if (version != 1)
    throw DataError("unsupported checkpoint version " + std::to_string(version));

  CheckpointMeta meta;
  meta.arch = r.str();
  meta.step = static_cast<long long>(r.u64());
  uint32_t n = r.u32();

  params = ParamSet{};
  params.step = meta.step;
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    uint32_t rows = r.u32();
    uint32_t cols = r.u32();
    Mat& m = params.add(name, rows, cols);
    r.need(static_cast<size_t>(rows) * cols * 4);
    for (uint32_t rr = 0; rr < rows; ++rr)
      for (uint32_t cc = 0; cc < cols; ++cc) {
        float v;
        std::memcpy(&v, r.p, 4);
        r.p += 4;
        m(rr, cc) = v;
      }
  }
  return meta;
}

uint32_t string_crc32(const std::string& text) {
  return static_cast<uint32_t>(crc32(
      0, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size())));
}

uint32_t file_crc32(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open for checksum: " + path);
  uint32_t crc = 0;
  char chunk[65536];
  while (in) {
    in.read(chunk, sizeof(chunk));
    std::streamsize got = in.gcount();
    if (got > 0)
      crc = static_cast<uint32_t>(
          crc32(crc, reinterpret_cast<const Bytef*>(chunk), static_cast<uInt>(got)));
  }
  return crc;
}

}  // namespace genloop::nn
