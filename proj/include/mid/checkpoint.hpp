#pragma once

// Checkpoint container. Layout:
//   8 bytes magic "MIDCKPT1"
//   per tensor, in registry order:
//     u32 name length, name bytes (UTF-8, no terminator)
//     u32 rank, u32 dims[rank]
//     float32 values, row-major
// All integers and floats little-endian.

#include <cstdio>
#include <string>

#include "mid/optim.hpp"
#include "mid/tensor.hpp"

namespace mid {

namespace detail {

constexpr char kCkptMagic[8] = {'M', 'I', 'D', 'C', 'K', 'P', 'T', '1'};

inline void write_u32(std::FILE* f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  MID_CHECK(std::fwrite(b, 1, 4, f) == 4, "checkpoint write failed");
}

inline uint32_t read_u32(std::FILE* f) {
  unsigned char b[4];
  MID_CHECK(std::fread(b, 1, 4, f) == 4, "checkpoint truncated");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

inline void write_f32(std::FILE* f, const float* p, size_t n) {
  static_assert(sizeof(float) == 4);
  // this code only targets little-endian hosts; fail loudly otherwise
  const uint32_t probe = 1;
  MID_CHECK(*reinterpret_cast<const unsigned char*>(&probe) == 1,
            "checkpoint io requires a little-endian host");
  MID_CHECK(std::fwrite(p, 4, n, f) == n, "checkpoint write failed");
}

inline void read_f32(std::FILE* f, float* p, size_t n) {
  const uint32_t probe = 1;
  MID_CHECK(*reinterpret_cast<const unsigned char*>(&probe) == 1,
            "checkpoint io requires a little-endian host");
  MID_CHECK(std::fread(p, 4, n, f) == n, "checkpoint truncated");
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<const ParamStore*>& stores) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  MID_CHECK(f != nullptr, "cannot open '" << path << "' for writing");
  MID_CHECK(std::fwrite(detail::kCkptMagic, 1, 8, f) == 8, "checkpoint write failed");
  for (const ParamStore* store : stores) {
    for (const auto& e : store->entries()) {
      detail::write_u32(f, uint32_t(e.name.size()));
      MID_CHECK(std::fwrite(e.name.data(), 1, e.name.size(), f) == e.name.size(),
                "checkpoint write failed");
      detail::write_u32(f, uint32_t(e.tensor.rank()));
      for (int d = 0; d < e.tensor.rank(); ++d) detail::write_u32(f, uint32_t(e.tensor.dim(d)));
      detail::write_f32(f, e.tensor.data(), size_t(e.tensor.numel()));
    }
  }
  MID_CHECK(std::fclose(f) == 0, "checkpoint close failed");
}

inline void save_checkpoint(const std::string& path, const ParamStore& store) {
  save_checkpoint(path, std::vector<const ParamStore*>{&store});
}

// Loads values into already-constructed stores. Every stored tensor must
// match an entry by name and shape, and every entry must be present.
inline void load_checkpoint(const std::string& path, const std::vector<ParamStore*>& stores) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  MID_CHECK(f != nullptr, "cannot open '" << path << "' for reading");
  char magic[8];
  MID_CHECK(std::fread(magic, 1, 8, f) == 8 && std::memcmp(magic, detail::kCkptMagic, 8) == 0,
            "'" << path << "' is not a MIDCKPT1 checkpoint");
  size_t loaded = 0, expected = 0;
  for (const ParamStore* s : stores) expected += s->entries().size();
  while (true) {
    unsigned char peek;
    const size_t got = std::fread(&peek, 1, 1, f);
    if (got == 0) break;
    MID_CHECK(std::fseek(f, -1, SEEK_CUR) == 0, "checkpoint seek failed");
    const uint32_t name_len = detail::read_u32(f);
    MID_CHECK(name_len > 0 && name_len < 4096, "checkpoint has implausible name length " << name_len);
    std::string name(name_len, '\0');
    MID_CHECK(std::fread(name.data(), 1, name_len, f) == name_len, "checkpoint truncated");
    const uint32_t rank = detail::read_u32(f);
    MID_CHECK(rank <= 8, "checkpoint has implausible rank " << rank);
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = int(detail::read_u32(f));
    ParamStore* home = nullptr;
    for (ParamStore* s : stores)
      if (s->contains(name)) {
        home = s;
        break;
      }
    MID_CHECK(home != nullptr, "checkpoint tensor '" << name << "' has no matching entry");
    Tensor t = home->get(name);
    MID_CHECK(t.shape() == shape, "checkpoint tensor '" << name << "' has shape "
                                                        << shape_str(shape) << ", expected "
                                                        << shape_str(t.shape()));
    detail::read_f32(f, t.data(), size_t(t.numel()));
    check_finite(t, "checkpoint load");
    ++loaded;
  }
  std::fclose(f);
  MID_CHECK(loaded == expected,
            "checkpoint holds " << loaded << " tensors, stores expect " << expected);
}

inline void load_checkpoint(const std::string& path, ParamStore& store) {
  load_checkpoint(path, std::vector<ParamStore*>{&store});
}

}  // namespace mid
