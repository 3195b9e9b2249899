#pragma once

// Dataset construction and the binary cache format.
//
// Cache layout (little-endian): 16-byte header = magic "MOSDSET1" (8 bytes),
// version u32 (1), sample count u32; then per sample: caption length u32,
// caption ids i32[], entity count u32, entities as (shape u8, color u8,
// row u8, col u8), latent floats f32[16*16*12].  Loading rebuilds the samples
// bit-identically.

#include <string>
#include <vector>

#include "mos/scene.hpp"
#include "mos/tensor.hpp"

namespace mos {

struct Sample {
  SceneSpec scene;
  std::vector<int> caption;
  Tensor latent;  // [16,16,12]
};

struct EditSample {
  SceneSpec source;
  SceneSpec target;
  std::vector<int> instruction;
  Tensor source_latent;  // [16,16,12]
  Tensor target_latent;  // [16,16,12]
};

// Uniform scenes; sample i depends only on (seed, i).
std::vector<Sample> make_dataset(int size, uint64_t seed);

// Uniform source scenes with uniformly drawn applicable edits.
std::vector<EditSample> make_edit_dataset(int size, uint64_t seed);

void save_dataset(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> load_dataset(const std::string& path);

}  // namespace mos
