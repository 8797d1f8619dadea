#pragma once

#include <string>

#include "ssmavs/tensor.hpp"

namespace ssmavs {

// .nst tensor file: the 8 magic bytes "NSTENS01", one dtype byte
// (0 = f32, 1 = f64), one rank byte, rank little-endian u64 extents, then
// the row-major payload as little-endian IEEE-754 values. Load rejects bad
// magic, unknown dtype codes, and truncated or oversized payloads.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

}  // namespace ssmavs
