#pragma once

#include <string>

#include "wdfq/tensor.hpp"

namespace wdfq {

// Binary layout: magic "WDFQTNSR", u32 rank, rank x u64 extents, then the
// payload as little-endian f64, row-major.
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

}  // namespace wdfq
