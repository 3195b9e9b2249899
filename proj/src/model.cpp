#include "mos/model.hpp"

#include <stdexcept>

#include "mos/codec.hpp"
#include "mos/scene.hpp"

namespace mos {

ModelConfig ModelConfig::desk_default() {
  ModelConfig cfg;
  cfg.understanding.depth = 8;
  cfg.understanding.hidden_dim = 128;
  cfg.understanding.heads = 4;
  cfg.understanding.vocab_size = kTokenCount;
  cfg.generation.depth = 4;
  cfg.generation.hidden_dim = 96;
  cfg.generation.heads = 4;
  cfg.generation.patch_size = 2;
  cfg.generation.register_tokens = 4;
  cfg.router = RouterConfig{};
  cfg.latent_shape = {kLatentSize, kLatentSize, kLatentChannels};
  cfg.max_positions = 128;
  return cfg;
}

void ModelConfig::validate() const {
  understanding.validate();
  generation.validate();
  router.validate();
  if (understanding.vocab_size < 1) {
    throw std::invalid_argument("model config: understanding vocab_size must be >= 1");
  }
  if (latent_shape.size() != 3) {
    throw std::invalid_argument("model config: latent shape must be rank 3, got " +
                                shape_str(latent_shape));
  }
  if (router.k > understanding.depth) {
    throw std::invalid_argument("model config: router k " + std::to_string(router.k) +
                                " exceeds understanding depth " +
                                std::to_string(understanding.depth));
  }
  if (max_positions < 1) throw std::invalid_argument("model config: max_positions must be >= 1");
}

namespace {

UnderstandingTower make_understanding(const ModelConfig& cfg, uint64_t seed) {
  Pcg32 rng = derive_rng(seed, rng_tag::kInit, 1);
  return UnderstandingTower(cfg.understanding, cfg.max_positions, cfg.generation.patch_size,
                            cfg.latent_shape[2], rng);
}

GenerationTower make_generation(const ModelConfig& cfg, uint64_t seed) {
  Pcg32 rng = derive_rng(seed, rng_tag::kInit, 2);
  return GenerationTower(cfg.generation, cfg.latent_shape, rng);
}

Router make_router(const ModelConfig& cfg, uint64_t seed) {
  Pcg32 rng = derive_rng(seed, rng_tag::kInit, 3);
  return Router(cfg.router, cfg.understanding.depth, cfg.generation.depth,
                cfg.understanding.hidden_dim, cfg.latent_shape, cfg.generation.patch_size, rng);
}

}  // namespace

MosModel::MosModel(const ModelConfig& cfg, uint64_t init_seed)
    : cfg_((cfg.validate(), cfg)),
      u_(make_understanding(cfg, init_seed)),
      g_(make_generation(cfg, init_seed)),
      router_(make_router(cfg, init_seed)) {
  Pcg32 rng = derive_rng(init_seed, rng_tag::kInit, 4);
  shared_proj_ = Tensor::randn({cfg_.understanding.hidden_dim, cfg_.generation.hidden_dim}, rng,
                               0.02f, true);
  null_context_ = Tensor::randn({1, cfg_.understanding.hidden_dim}, rng, 0.02f, true);
}

HiddenStateBank MosModel::null_bank() const {
  HiddenStateBank bank;
  bank.states.assign(static_cast<size_t>(cfg_.understanding.depth), null_context_);
  return bank;
}

std::vector<Tensor> MosModel::trainable_params() const {
  std::vector<Tensor> out = g_.params();
  for (Tensor& p : router_.params()) out.push_back(p);
  out.push_back(shared_proj_);
  out.push_back(null_context_);
  return out;
}

std::vector<NamedTensor> MosModel::named_params() const {
  std::vector<NamedTensor> out = u_.named_params();
  for (auto& p : g_.named_params()) out.push_back(p);
  for (auto& p : router_.named_params()) out.push_back(p);
  out.push_back({"proj.shared", shared_proj_});
  out.push_back({"null.context", null_context_});
  return out;
}

}  // namespace mos
