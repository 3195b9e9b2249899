#include "mos/codec.hpp"

#include <cmath>
#include <stdexcept>

#include "mos/rng.hpp"
#include "mos/scene.hpp"

namespace mos {

namespace {

constexpr int kD = kLatentChannels;  // 12 = patch * patch * 3

// Gram-Schmidt over seeded gaussian columns, done in double so the rotation
// is orthogonal well below float precision.
std::vector<float> build_rotation() {
  Pcg32 rng(0x51ab12cdu, 9);
  std::vector<double> q(kD * kD);
  for (auto& x : q) x = rng.normal();
  for (int c = 0; c < kD; ++c) {
    for (int prev = 0; prev < c; ++prev) {
      double dot = 0.0;
      for (int r = 0; r < kD; ++r) dot += q[r * kD + c] * q[r * kD + prev];
      for (int r = 0; r < kD; ++r) q[r * kD + c] -= dot * q[r * kD + prev];
    }
    double norm = 0.0;
    for (int r = 0; r < kD; ++r) norm += q[r * kD + c] * q[r * kD + c];
    norm = std::sqrt(norm);
    for (int r = 0; r < kD; ++r) q[r * kD + c] /= norm;
  }
  std::vector<float> out(kD * kD);
  for (int i = 0; i < kD * kD; ++i) out[static_cast<size_t>(i)] = static_cast<float>(q[static_cast<size_t>(i)]);
  return out;
}

}  // namespace

const std::vector<float>& codec_matrix() {
  static const std::vector<float> rot = build_rotation();
  return rot;
}

Tensor encode_latent(const Tensor& image) {
  if (image.shape() != std::vector<int>{kImageSize, kImageSize, 3}) {
    throw std::invalid_argument("encode_latent: image shape " + shape_str(image.shape()) +
                                ", expected [32 32 3]");
  }
  const std::vector<float>& q = codec_matrix();
  Tensor latent = Tensor::zeros({kLatentSize, kLatentSize, kLatentChannels});
  const float* src = image.data();
  float* dst = latent.data();
  float patch[kD];
  for (int i = 0; i < kLatentSize; ++i) {
    for (int j = 0; j < kLatentSize; ++j) {
      for (int dy = 0; dy < kCodecPatch; ++dy)
        for (int dx = 0; dx < kCodecPatch; ++dx)
          for (int c = 0; c < 3; ++c) {
            patch[(dy * kCodecPatch + dx) * 3 + c] =
                src[((i * kCodecPatch + dy) * kImageSize + (j * kCodecPatch + dx)) * 3 + c];
          }
      float* out = dst + (i * kLatentSize + j) * kD;
      for (int r = 0; r < kD; ++r) {
        double s = 0.0;
        for (int m = 0; m < kD; ++m) s += static_cast<double>(q[r * kD + m]) * patch[m];
        out[r] = static_cast<float>(s);
      }
    }
  }
  return latent;
}

Tensor decode_latent(const Tensor& latent) {
  if (latent.shape() != std::vector<int>{kLatentSize, kLatentSize, kLatentChannels}) {
    throw std::invalid_argument("decode_latent: latent shape " + shape_str(latent.shape()) +
                                ", expected [16 16 12]");
  }
  const std::vector<float>& q = codec_matrix();
  Tensor image = Tensor::zeros({kImageSize, kImageSize, 3});
  const float* src = latent.data();
  float* dst = image.data();
  float patch[kD];
  for (int i = 0; i < kLatentSize; ++i) {
    for (int j = 0; j < kLatentSize; ++j) {
      const float* in = src + (i * kLatentSize + j) * kD;
      for (int m = 0; m < kD; ++m) {
        double s = 0.0;
        for (int r = 0; r < kD; ++r) s += static_cast<double>(q[r * kD + m]) * in[r];
        patch[m] = static_cast<float>(s);
      }
      for (int dy = 0; dy < kCodecPatch; ++dy)
        for (int dx = 0; dx < kCodecPatch; ++dx)
          for (int c = 0; c < 3; ++c) {
            dst[((i * kCodecPatch + dy) * kImageSize + (j * kCodecPatch + dx)) * 3 + c] =
                patch[(dy * kCodecPatch + dx) * 3 + c];
          }
    }
  }
  return image;
}

}  // namespace mos
