#pragma once

// Binary PPM (P6) and PGM (P5) image files, 8-bit, maxval 255.  Floats are
// clamped to [0,1] and rounded on write; reads scale back to [0,1].

#include <string>

#include "mos/tensor.hpp"

namespace mos {

void write_ppm(const std::string& path, const Tensor& image);  // [H,W,3]
Tensor read_ppm(const std::string& path);

void write_pgm(const std::string& path, const Tensor& image);  // [H,W]
Tensor read_pgm(const std::string& path);

}  // namespace mos
