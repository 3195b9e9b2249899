#pragma once

// The full model bundle: frozen understanding tower, trainable generation
// tower, router, the shared d_u -> d_g projection, and the learned null
// context used for the unconditional branch of classifier-free guidance.

#include <string>
#include <vector>

#include "mos/router.hpp"
#include "mos/tensor.hpp"
#include "mos/towers.hpp"

namespace mos {

struct ModelConfig {
  TowerConfig understanding;   // vocab_size required
  TowerConfig generation;      // patch_size / register_tokens required
  RouterConfig router;
  std::vector<int> latent_shape{16, 16, 12};
  int max_positions = 128;

  static ModelConfig desk_default();
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

class MosModel {
 public:
  MosModel(const ModelConfig& cfg, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  UnderstandingTower& understanding() { return u_; }
  const UnderstandingTower& understanding() const { return u_; }
  GenerationTower& generation() { return g_; }
  const GenerationTower& generation() const { return g_; }
  Router& router() { return router_; }
  const Router& router() const { return router_; }
  const Tensor& shared_projection() const { return shared_proj_; }
  const Tensor& null_context() const { return null_context_; }

  // Bank whose every layer is the same learned null token (length-1 context).
  HiddenStateBank null_bank() const;

  // Everything the optimizer updates, in a stable order.
  std::vector<Tensor> trainable_params() const;
  // Every tensor in the bundle, named for the checkpoint (includes frozen u.*).
  std::vector<NamedTensor> named_params() const;

  uint64_t understanding_checksum() const { return params_checksum(u_.params()); }

 private:
  ModelConfig cfg_;
  UnderstandingTower u_;
  GenerationTower g_;
  Router router_;
  Tensor shared_proj_;   // [d_u, d_g]
  Tensor null_context_;  // [1, d_u]
};

}  // namespace mos
