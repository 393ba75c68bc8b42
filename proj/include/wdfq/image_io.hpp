#pragma once

#include <string>

#include "wdfq/tensor.hpp"

namespace wdfq {

// Binary PGM (P5) or PPM (P6) with maxval 1..255. Pixels are scaled to [0,1];
// grayscale is replicated across three channels so both modalities present
// the same arity to the shared backbone. Result is [1,3,H,W].
Tensor read_image(const std::string& path);

struct LoadedPair {
  Tensor rgb, ir;  // each [1,3,H,W]
};

// Reads both images and enforces the pairing contract: equal extents
// (pairing error) and extents divisible by 64 (divisibility error).
LoadedPair load_pair(const std::string& rgb_path, const std::string& ir_path);

// gray: [H,W] in [0,1], clamped and rounded to bytes. rgb: [3,H,W] likewise.
void write_pgm(const std::string& path, const Tensor& gray);
void write_ppm(const std::string& path, const Tensor& rgb);

// Channel mean of batch 0 of [N,C,H,W], min-max scaled to 0..255 and written
// as binary PGM. A constant map (degenerate range) writes all zeros.
void export_heatmap(const Tensor& feature, const std::string& path);

}  // namespace wdfq
