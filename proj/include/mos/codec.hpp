#pragma once

// Invertible image <-> latent codec.  The 32x32x3 image is cut into 2x2
// patches; each 12-dim patch vector is rotated by a fixed orthogonal matrix
// into a 16x16x12 latent.  No compression, so decode(encode(x)) == x up to
// float rounding.  The rotation is frozen (seeded once, independent of run
// configuration) so latents mean the same thing across every run.

#include "mos/tensor.hpp"

namespace mos {

constexpr int kLatentSize = 16;
constexpr int kLatentChannels = 12;
constexpr int kCodecPatch = 2;

// [32,32,3] -> [16,16,12]
Tensor encode_latent(const Tensor& image);
// [16,16,12] -> [32,32,3]
Tensor decode_latent(const Tensor& latent);

// The fixed 12x12 orthogonal rotation, row-major (for tests).
const std::vector<float>& codec_matrix();

}  // namespace mos
