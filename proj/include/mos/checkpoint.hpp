#pragma once

// Binary checkpoint: magic + version, the run config snapshot as text, the
// training step, every named parameter tensor (frozen tower included), the
// optimizer moments, and a trailing FNV-1a checksum over everything before
// it.  Little-endian, float data stored raw, so save/load round-trips
// bit-exactly.  See docs/FORMATS.md for the byte layout.

#include <cstdint>
#include <string>
#include <vector>

#include "mos/config.hpp"
#include "mos/model.hpp"
#include "mos/tensor.hpp"

namespace mos {

struct Checkpoint {
  RunConfig config;
  uint64_t step = 0;
  std::vector<NamedTensor> tensors;     // model.named_params() order
  int64_t opt_step_count = 0;           // optimizer moments, trainable order
  std::vector<std::vector<float>> opt_m;
  std::vector<std::vector<float>> opt_v;
};

// Serializes config + model parameters + optimizer state and writes the file
// atomically (temp file + rename).  Throws std::runtime_error on I/O failure.
void save_checkpoint(const std::string& path, const RunConfig& cfg, uint64_t step,
                     const MosModel& model, const OptimizerState& opt);

// Verifies magic, version, and checksum; throws std::runtime_error on a
// missing, truncated, or corrupt file.
Checkpoint load_checkpoint(const std::string& path);

// Copies the checkpoint's tensors into an already-built model (names and
// shapes must match exactly) and rebuilds the optimizer state.  Throws
// std::runtime_error on any mismatch.
void restore_checkpoint(const Checkpoint& ckpt, MosModel& model, OptimizerState& opt);

// Builds the model described by the checkpoint's config and restores into it.
MosModel model_from_checkpoint(const Checkpoint& ckpt, OptimizerState* opt = nullptr);

}  // namespace mos
