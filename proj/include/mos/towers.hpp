#pragma once

// The two transformer stacks: a frozen understanding tower that exposes every
// block's output as a hidden-state bank, and a trainable generation tower
// whose blocks consume routed context states as in-context tokens.
//
// Both use pre-norm RMS blocks with bidirectional attention, per-head QK-norm
// gains, and a SiLU feed-forward (4x expansion).  All linears are bias-free
// except the generation head, whose weight and bias start at zero so the
// initial velocity prediction is zero.  Generation blocks carry separate
// pre-attention norm gains for context and visual tokens; context tokens are
// consumed as keys/values only and discarded after each block, which leaves
// the returned visual slice identical to running the full concatenated
// sequence.  The generation tower receives no timestep input.

#include <string>
#include <vector>

#include "mos/rng.hpp"
#include "mos/tensor.hpp"

namespace mos {

struct TowerConfig {
  int depth = 1;
  int hidden_dim = 8;
  int heads = 1;
  int vocab_size = 0;      // understanding towers only
  int patch_size = 1;      // generation towers only
  int register_tokens = 0; // generation towers only
  void validate() const;   // throws std::invalid_argument
  bool operator==(const TowerConfig&) const = default;
};

// Output of every understanding block (post-residual), in layer order.
struct HiddenStateBank {
  std::vector<Tensor> states;  // depth entries, each [L_c, d_u]
  int context_length() const { return states.empty() ? 0 : states.front().dim(0); }
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

// One transformer block.  norm1_ctx is defined only on generation blocks: the
// pre-attention gain applied to context rows (norm1 covers visual rows).
struct BlockParams {
  Tensor norm1, wq, wk, wv, wo, q_gain, k_gain, norm2, w1, w2;
  Tensor norm1_ctx;
};

BlockParams make_block(int dim, bool modality_norms, Pcg32& rng);
void append_block_params(const std::string& prefix, const BlockParams& p,
                         std::vector<NamedTensor>& out);

// Plain pre-norm block over one sequence.
Tensor block_forward(const BlockParams& p, const Tensor& x, int heads);

// Generation block: visual rows query over [context | visual]; each modality
// is normalized with its own gain; only the visual slice is produced.
// An undefined or zero-row context degenerates to block_forward.
Tensor generation_block_forward(const BlockParams& p, const Tensor& visual,
                                const Tensor& context, int heads);

// ---- patch layout ---------------------------------------------------------

// [H,W,C] -> [(H/p)(W/p), p*p*C]; patches row-major over the patch grid,
// elements row-major over (dy, dx, c).  Exact inverse below.
Tensor patchify(const Tensor& latent, int p);
Tensor unpatchify(const Tensor& tokens, int p, const std::vector<int>& latent_shape);

// ---- understanding tower ----------------------------------------------------

class UnderstandingTower {
 public:
  // ref_patch > 0 enables editing contexts: forward_edit patchifies a
  // reference latent of ref_channels channels with that patch size and embeds
  // it through a frozen linear.  All parameters are frozen at construction.
  UnderstandingTower(const TowerConfig& cfg, int max_positions, int ref_patch,
                     int ref_channels, Pcg32& rng);

  HiddenStateBank forward(const std::vector<int>& token_ids) const;
  // Context = instruction tokens followed by patch-embedded reference tokens.
  HiddenStateBank forward_edit(const std::vector<int>& instruction,
                               const Tensor& reference_latent) const;

  const TowerConfig& config() const { return cfg_; }
  int max_positions() const { return max_positions_; }
  std::vector<NamedTensor> named_params() const;  // names prefixed "u."
  std::vector<Tensor> params() const;

 private:
  HiddenStateBank run_blocks(const Tensor& x0) const;
  TowerConfig cfg_;
  int max_positions_;
  int ref_patch_;
  int ref_channels_;
  Tensor embed_, pos_, ref_embed_;
  std::vector<BlockParams> blocks_;
};

// ---- generation tower -------------------------------------------------------

class GenerationTower {
 public:
  GenerationTower(const TowerConfig& cfg, const std::vector<int>& latent_shape, Pcg32& rng);

  // routed_contexts: one [L_c, d_g] tensor per block; an undefined entry means
  // no context for that block.  Returns the predicted velocity, same shape as
  // z_t.
  Tensor forward(const Tensor& z_t, const std::vector<Tensor>& routed_contexts) const;
  // Editing: visual sequence [registers | noise tokens | clean reference
  // tokens]; only the noise slice is decoded and returned.
  Tensor forward_edit(const Tensor& z_t, const Tensor& reference_latent,
                      const std::vector<Tensor>& routed_contexts) const;

  const TowerConfig& config() const { return cfg_; }
  const std::vector<int>& latent_shape() const { return latent_shape_; }
  int latent_tokens() const { return latent_tokens_; }
  std::vector<NamedTensor> named_params() const;  // names prefixed "g."
  std::vector<Tensor> params() const;
  const Tensor& patch_embed() const { return patch_embed_; }

 private:
  Tensor run(const Tensor& z_t, const Tensor& reference_latent,
             const std::vector<Tensor>& routed_contexts) const;
  TowerConfig cfg_;
  std::vector<int> latent_shape_;
  int latent_tokens_;
  Tensor patch_embed_, pos_, pos_ref_, registers_, head_w_, head_b_;
  std::vector<BlockParams> blocks_;
};

// FNV-1a over the raw bytes of every tensor's data, in list order.
uint64_t params_checksum(const std::vector<Tensor>& params);

}  // namespace mos
