#include "ssmavs/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace ssmavs {

namespace {

constexpr char kMagic[8] = {'N', 'S', 'T', 'E', 'N', 'S', '0', '1'};

void put_u64_le(std::string& out, u64 v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}

u64 get_u64_le(const unsigned char* p) {
  u64 v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

void save_tensor(const Tensor& t, const std::string& path) {
  check(t.defined(), "save_tensor: undefined tensor");
  check(t.rank() <= 255, "save_tensor: rank exceeds format limit");
  std::string header(kMagic, sizeof(kMagic));
  header.push_back(static_cast<char>(t.dtype()));
  header.push_back(static_cast<char>(t.rank()));
  for (i64 d : t.shape()) put_u64_le(header, static_cast<u64>(d));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(f.good(), "save_tensor: cannot open " + path);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));

  const i64 esz = dtype_size(t.dtype());
  std::string payload(static_cast<size_t>(t.numel() * esz), '\0');
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* src = t.data<T>();
    for (i64 i = 0; i < t.numel(); ++i) {
      u64 bits;
      if constexpr (sizeof(T) == 4) {
        std::uint32_t b32;
        std::memcpy(&b32, &src[i], 4);
        bits = b32;
      } else {
        std::memcpy(&bits, &src[i], 8);
      }
      for (i64 b = 0; b < esz; ++b) {
        payload[static_cast<size_t>(i * esz + b)] =
            static_cast<char>(bits >> (8 * b));
      }
    }
  });
  f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  check(f.good(), "save_tensor: write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "load_tensor: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());

  check(bytes.size() >= 10, "load_tensor: " + path + " truncated header");
  check(std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0,
        "load_tensor: " + path + " has bad magic");
  const unsigned dtype_code = bytes[8];
  check(dtype_code <= 1, "load_tensor: " + path + " unknown dtype code " +
                             std::to_string(dtype_code));
  const Dtype dt = static_cast<Dtype>(dtype_code);
  const unsigned rank = bytes[9];
  size_t off = 10;
  check(bytes.size() >= off + 8ull * rank,
        "load_tensor: " + path + " truncated shape");
  Shape shape(rank);
  for (unsigned i = 0; i < rank; ++i) {
    shape[i] = static_cast<i64>(get_u64_le(bytes.data() + off));
    check(shape[i] >= 0, "load_tensor: " + path + " extent overflow");
    off += 8;
  }
  const i64 numel = shape_numel(shape);
  const i64 esz = dtype_size(dt);
  check(bytes.size() == off + static_cast<size_t>(numel * esz),
        "load_tensor: " + path + " payload size mismatch (" +
            std::to_string(bytes.size() - off) + " bytes for " +
            std::to_string(numel) + " elements)");

  Tensor t = Tensor::empty(std::move(shape), dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    T* dst = t.mut<T>();
    const unsigned char* p = bytes.data() + off;
    for (i64 i = 0; i < numel; ++i) {
      u64 bits = 0;
      for (i64 b = esz - 1; b >= 0; --b) bits = (bits << 8) | p[i * esz + b];
      if constexpr (sizeof(T) == 4) {
        std::uint32_t b32 = static_cast<std::uint32_t>(bits);
        std::memcpy(&dst[i], &b32, 4);
      } else {
        std::memcpy(&dst[i], &bits, 8);
      }
    }
  });
  return t;
}

}  // namespace ssmavs
