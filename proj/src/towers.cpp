#include "mos/towers.hpp"

#include <cstring>
#include <stdexcept>
#include <vector>

#include "mos/kernels.hpp"

namespace mos {

void TowerConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("tower depth must be >= 1, got " + std::to_string(depth));
  if (hidden_dim < 1 || heads < 1) {
    throw std::invalid_argument("tower hidden_dim and heads must be positive");
  }
  if (hidden_dim % heads != 0) {
    throw std::invalid_argument("hidden_dim " + std::to_string(hidden_dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (patch_size < 1) throw std::invalid_argument("patch_size must be >= 1");
  if (register_tokens < 0) throw std::invalid_argument("register_tokens must be >= 0");
}

// ---- blocks -----------------------------------------------------------------

namespace {
constexpr float kInitStd = 0.02f;
constexpr int kFfnExpansion = 4;
}  // namespace

BlockParams make_block(int dim, bool modality_norms, Pcg32& rng) {
  BlockParams p;
  p.norm1 = Tensor::full({dim}, 1.0f);
  if (modality_norms) p.norm1_ctx = Tensor::full({dim}, 1.0f);
  p.wq = Tensor::randn({dim, dim}, rng, kInitStd);
  p.wk = Tensor::randn({dim, dim}, rng, kInitStd);
  p.wv = Tensor::randn({dim, dim}, rng, kInitStd);
  p.wo = Tensor::randn({dim, dim}, rng, kInitStd);
  p.q_gain = Tensor::full({dim}, 1.0f);
  p.k_gain = Tensor::full({dim}, 1.0f);
  p.norm2 = Tensor::full({dim}, 1.0f);
  p.w1 = Tensor::randn({dim, kFfnExpansion * dim}, rng, kInitStd);
  p.w2 = Tensor::randn({kFfnExpansion * dim, dim}, rng, kInitStd);
  return p;
}

void append_block_params(const std::string& prefix, const BlockParams& p,
                         std::vector<NamedTensor>& out) {
  out.push_back({prefix + ".norm1", p.norm1});
  if (p.norm1_ctx.defined()) out.push_back({prefix + ".norm1_ctx", p.norm1_ctx});
  out.push_back({prefix + ".wq", p.wq});
  out.push_back({prefix + ".wk", p.wk});
  out.push_back({prefix + ".wv", p.wv});
  out.push_back({prefix + ".wo", p.wo});
  out.push_back({prefix + ".q_gain", p.q_gain});
  out.push_back({prefix + ".k_gain", p.k_gain});
  out.push_back({prefix + ".norm2", p.norm2});
  out.push_back({prefix + ".w1", p.w1});
  out.push_back({prefix + ".w2", p.w2});
}

namespace {

Tensor ffn(const BlockParams& p, const Tensor& x) {
  return matmul(silu(matmul(x, p.w1)), p.w2);
}

Tensor attend(const BlockParams& p, const Tensor& q_rows, const Tensor& kv_rows, int heads) {
  Tensor q = matmul(q_rows, p.wq);
  Tensor k = matmul(kv_rows, p.wk);
  Tensor v = matmul(kv_rows, p.wv);
  Tensor mixed = multi_head_attention(q, k, v, heads, /*qk_norm=*/true,
                                      /*bidirectional=*/true, p.q_gain, p.k_gain);
  return matmul(mixed, p.wo);
}

}  // namespace

// True when no gradient can flow through this block application, so the
// forward may skip the op graph entirely.
static bool block_untracked(const BlockParams& p, const Tensor& x) {
  Tape* tp = Tape::active();
  if (tp == nullptr) return true;
  const Tensor* parts[] = {&x,        &p.norm1, &p.norm1_ctx, &p.wq, &p.wk, &p.wv,
                           &p.wo,     &p.q_gain, &p.k_gain,   &p.norm2, &p.w1, &p.w2};
  for (const Tensor* t : parts) {
    if (t->defined() && tp->tracks(*t)) return false;
  }
  return true;
}

// Whole-block fast path on reused scratch: the same kernel calls in the same
// order as the op-graph path below, so the output is bit-identical.
static Tensor block_forward_fused(const BlockParams& p, const Tensor& x, int heads) {
  int rows = x.dim(0);
  int d = x.dim(1);
  int hidden = p.w1.dim(1);
  const auto& kt = kernels::active();
  static thread_local std::vector<float> normed, q, k, v, mixed, ff;
  normed.resize(static_cast<size_t>(rows) * d);
  q.resize(static_cast<size_t>(rows) * d);
  k.resize(static_cast<size_t>(rows) * d);
  v.resize(static_cast<size_t>(rows) * d);
  mixed.resize(static_cast<size_t>(rows) * d);
  ff.resize(static_cast<size_t>(rows) * hidden);
  const float* px = x.data();

  detail::rms_rows(px, normed.data(), rows, d, p.norm1.data());
  kt.matmul_nn(normed.data(), p.wq.data(), q.data(), rows, d, d, false);
  kt.matmul_nn(normed.data(), p.wk.data(), k.data(), rows, d, d, false);
  kt.matmul_nn(normed.data(), p.wv.data(), v.data(), rows, d, d, false);
  detail::attention_rows(q.data(), k.data(), v.data(), rows, rows, heads, d / heads,
                         /*qk_norm=*/true, /*bidirectional=*/true,
                         p.q_gain.defined() ? p.q_gain.data() : nullptr,
                         p.k_gain.defined() ? p.k_gain.data() : nullptr, mixed.data());
  Tensor out = Tensor::zeros({rows, d});
  float* po = out.data();
  kt.matmul_nn(mixed.data(), p.wo.data(), q.data(), rows, d, d, false);
  for (int64_t i = 0; i < static_cast<int64_t>(rows) * d; ++i) po[i] = px[i] + q[i];

  detail::rms_rows(po, normed.data(), rows, d, p.norm2.data());
  kt.matmul_nn(normed.data(), p.w1.data(), ff.data(), rows, d, hidden, false);
  kt.silu(ff.data(), ff.data(), rows * hidden);
  kt.matmul_nn(ff.data(), p.w2.data(), q.data(), rows, hidden, d, false);
  for (int64_t i = 0; i < static_cast<int64_t>(rows) * d; ++i) po[i] = po[i] + q[i];
  return out;
}

// The fused path assumes a consistently shaped block; anything else falls
// back to the op-graph path, whose ops throw the canonical errors.
static bool block_shapes_ok(const BlockParams& p, int d) {
  return p.norm1.dim(0) == d && p.wq.dim(0) == d && p.wq.dim(1) == d && p.wk.dim(0) == d &&
         p.wk.dim(1) == d && p.wv.dim(0) == d && p.wv.dim(1) == d && p.wo.dim(0) == d &&
         p.wo.dim(1) == d && p.norm2.dim(0) == d && p.w1.dim(0) == d && p.w2.dim(1) == d &&
         p.w2.dim(0) == p.w1.dim(1);
}

Tensor block_forward(const BlockParams& p, const Tensor& x, int heads) {
  if (x.ndim() == 2 && heads > 0 && x.dim(1) % heads == 0 && block_shapes_ok(p, x.dim(1)) &&
      block_untracked(p, x)) {
    return block_forward_fused(p, x, heads);
  }
  Tensor normed = rms_norm(x, p.norm1);
  Tensor h = add(x, attend(p, normed, normed, heads));
  return add(h, ffn(p, rms_norm(h, p.norm2)));
}

Tensor generation_block_forward(const BlockParams& p, const Tensor& visual,
                                const Tensor& context, int heads) {
  bool has_ctx = context.defined() && context.dim(0) > 0;
  if (!has_ctx) return block_forward(p, visual, heads);
  if (!p.norm1_ctx.defined()) {
    throw std::invalid_argument("generation_block_forward: block has no context norm gain");
  }
  if (context.dim(1) != visual.dim(1)) {
    throw std::invalid_argument("context width " + std::to_string(context.dim(1)) +
                                " != visual width " + std::to_string(visual.dim(1)));
  }
  Tensor normed_vis = rms_norm(visual, p.norm1);
  Tensor kv = concat_rows({rms_norm(context, p.norm1_ctx), normed_vis});
  Tensor h = add(visual, attend(p, normed_vis, kv, heads));
  return add(h, ffn(p, rms_norm(h, p.norm2)));
}

// ---- patch layout -----------------------------------------------------------

namespace {

void check_patch_shape(const std::vector<int>& shape, int p, const char* what) {
  if (shape.size() != 3) {
    throw std::invalid_argument(std::string(what) + ": latent must be rank 3, got " +
                                shape_str(shape));
  }
  if (p < 1 || shape[0] % p != 0 || shape[1] % p != 0) {
    throw std::invalid_argument(std::string(what) + ": extents " + shape_str(shape) +
                                " not divisible by patch size " + std::to_string(p));
  }
}

std::vector<int64_t> patch_map(int h, int w, int c, int p) {
  std::vector<int64_t> map(static_cast<size_t>(h) * w * c);
  int64_t o = 0;
  for (int py = 0; py < h / p; ++py) {
    for (int px = 0; px < w / p; ++px) {
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          for (int ch = 0; ch < c; ++ch) {
            map[static_cast<size_t>(o++)] =
                (static_cast<int64_t>(py * p + dy) * w + (px * p + dx)) * c + ch;
          }
        }
      }
    }
  }
  return map;
}

}  // namespace

Tensor patchify(const Tensor& latent, int p) {
  check_patch_shape(latent.shape(), p, "patchify");
  int h = latent.dim(0), w = latent.dim(1), c = latent.dim(2);
  return gather_linear(latent, patch_map(h, w, c, p), {(h / p) * (w / p), p * p * c});
}

Tensor unpatchify(const Tensor& tokens, int p, const std::vector<int>& latent_shape) {
  check_patch_shape(latent_shape, p, "unpatchify");
  int h = latent_shape[0], w = latent_shape[1], c = latent_shape[2];
  std::vector<int> want{(h / p) * (w / p), p * p * c};
  if (tokens.shape() != want) {
    throw std::invalid_argument("unpatchify: tokens " + shape_str(tokens.shape()) +
                                " do not match " + shape_str(want));
  }
  std::vector<int64_t> fwd = patch_map(h, w, c, p);
  std::vector<int64_t> inv(fwd.size());
  for (size_t i = 0; i < fwd.size(); ++i) inv[static_cast<size_t>(fwd[i])] = static_cast<int64_t>(i);
  return gather_linear(tokens, std::move(inv), latent_shape);
}

// ---- understanding tower ------------------------------------------------------

UnderstandingTower::UnderstandingTower(const TowerConfig& cfg, int max_positions, int ref_patch,
                                       int ref_channels, Pcg32& rng)
    : cfg_(cfg), max_positions_(max_positions), ref_patch_(ref_patch), ref_channels_(ref_channels) {
  cfg_.validate();
  if (cfg_.vocab_size < 1) {
    throw std::invalid_argument("understanding tower needs vocab_size >= 1");
  }
  if (max_positions_ < 1) throw std::invalid_argument("max_positions must be >= 1");
  embed_ = Tensor::randn({cfg_.vocab_size, cfg_.hidden_dim}, rng, kInitStd);
  pos_ = Tensor::randn({max_positions_, cfg_.hidden_dim}, rng, kInitStd);
  if (ref_patch_ > 0) {
    ref_embed_ = Tensor::randn({ref_patch_ * ref_patch_ * ref_channels_, cfg_.hidden_dim}, rng,
                               kInitStd);
  }
  blocks_.reserve(static_cast<size_t>(cfg_.depth));
  for (int i = 0; i < cfg_.depth; ++i) {
    blocks_.push_back(make_block(cfg_.hidden_dim, /*modality_norms=*/false, rng));
  }
  // Frozen by construction: requires_grad stays false on every tensor, so the
  // tape never records into this tower and no optimizer can touch it.
}

HiddenStateBank UnderstandingTower::run_blocks(const Tensor& x0) const {
  HiddenStateBank bank;
  bank.states.reserve(blocks_.size());
  Tensor x = x0;
  for (const BlockParams& b : blocks_) {
    x = block_forward(b, x, cfg_.heads);
    bank.states.push_back(x);
  }
  return bank;
}

HiddenStateBank UnderstandingTower::forward(const std::vector<int>& token_ids) const {
  if (token_ids.empty()) throw std::invalid_argument("understanding forward: empty token sequence");
  if (static_cast<int>(token_ids.size()) > max_positions_) {
    throw std::invalid_argument("sequence length " + std::to_string(token_ids.size()) +
                                " exceeds max positions " + std::to_string(max_positions_));
  }
  Tensor x = embedding(embed_, token_ids);
  return run_blocks(add(x, slice_rows(pos_, 0, static_cast<int>(token_ids.size()))));
}

HiddenStateBank UnderstandingTower::forward_edit(const std::vector<int>& instruction,
                                                 const Tensor& reference_latent) const {
  if (ref_patch_ <= 0) {
    throw std::invalid_argument("understanding tower was built without reference support");
  }
  if (instruction.empty()) throw std::invalid_argument("understanding edit: empty instruction");
  Tensor ref_tokens = matmul(patchify(reference_latent, ref_patch_), ref_embed_);
  int li = static_cast<int>(instruction.size());
  int total = li + ref_tokens.dim(0);
  if (total > max_positions_) {
    throw std::invalid_argument("edit context length " + std::to_string(total) +
                                " exceeds max positions " + std::to_string(max_positions_));
  }
  Tensor text = add(embedding(embed_, instruction), slice_rows(pos_, 0, li));
  Tensor ref = add(ref_tokens, slice_rows(pos_, li, total));
  return run_blocks(concat_rows({text, ref}));
}

std::vector<NamedTensor> UnderstandingTower::named_params() const {
  std::vector<NamedTensor> out;
  out.push_back({"u.embed", embed_});
  out.push_back({"u.pos", pos_});
  if (ref_embed_.defined()) out.push_back({"u.ref_embed", ref_embed_});
  for (size_t i = 0; i < blocks_.size(); ++i) {
    append_block_params("u.block" + std::to_string(i), blocks_[i], out);
  }
  return out;
}

std::vector<Tensor> UnderstandingTower::params() const {
  std::vector<Tensor> out;
  for (auto& [name, value] : named_params()) out.push_back(value);
  return out;
}

// ---- generation tower ---------------------------------------------------------

GenerationTower::GenerationTower(const TowerConfig& cfg, const std::vector<int>& latent_shape,
                                 Pcg32& rng)
    : cfg_(cfg), latent_shape_(latent_shape) {
  cfg_.validate();
  check_patch_shape(latent_shape_, cfg_.patch_size, "generation tower");
  int p = cfg_.patch_size;
  int patch_dim = p * p * latent_shape_[2];
  latent_tokens_ = (latent_shape_[0] / p) * (latent_shape_[1] / p);

  patch_embed_ = Tensor::randn({patch_dim, cfg_.hidden_dim}, rng, kInitStd, true);
  pos_ = Tensor::randn({latent_tokens_, cfg_.hidden_dim}, rng, kInitStd, true);
  pos_ref_ = Tensor::randn({latent_tokens_, cfg_.hidden_dim}, rng, kInitStd, true);
  registers_ = Tensor::randn({cfg_.register_tokens, cfg_.hidden_dim}, rng, kInitStd, true);
  head_w_ = Tensor::zeros({cfg_.hidden_dim, patch_dim}, true);
  head_b_ = Tensor::zeros({patch_dim}, true);
  blocks_.reserve(static_cast<size_t>(cfg_.depth));
  for (int j = 0; j < cfg_.depth; ++j) {
    BlockParams b = make_block(cfg_.hidden_dim, /*modality_norms=*/true, rng);
    for (auto* t : {&b.norm1, &b.norm1_ctx, &b.wq, &b.wk, &b.wv, &b.wo, &b.q_gain, &b.k_gain,
                    &b.norm2, &b.w1, &b.w2}) {
      t->set_requires_grad(true);
    }
    blocks_.push_back(std::move(b));
  }
}

Tensor GenerationTower::run(const Tensor& z_t, const Tensor& reference_latent,
                            const std::vector<Tensor>& routed_contexts) const {
  if (z_t.shape() != latent_shape_) {
    throw std::invalid_argument("latent " + shape_str(z_t.shape()) + " does not match tower shape " +
                                shape_str(latent_shape_));
  }
  if (static_cast<int>(routed_contexts.size()) != cfg_.depth) {
    throw std::invalid_argument("expected " + std::to_string(cfg_.depth) +
                                " routed contexts, got " + std::to_string(routed_contexts.size()));
  }
  std::vector<Tensor> seq;
  if (cfg_.register_tokens > 0) seq.push_back(registers_);
  seq.push_back(add(matmul(patchify(z_t, cfg_.patch_size), patch_embed_), pos_));
  if (reference_latent.defined()) {
    if (reference_latent.shape() != latent_shape_) {
      throw std::invalid_argument("reference latent " + shape_str(reference_latent.shape()) +
                                  " does not match tower shape " + shape_str(latent_shape_));
    }
    seq.push_back(add(matmul(patchify(reference_latent, cfg_.patch_size), patch_embed_), pos_ref_));
  }
  Tensor x = seq.size() == 1 ? seq[0] : concat_rows(seq);
  for (int j = 0; j < cfg_.depth; ++j) {
    x = generation_block_forward(blocks_[static_cast<size_t>(j)], x,
                                 routed_contexts[static_cast<size_t>(j)], cfg_.heads);
  }
  int begin = cfg_.register_tokens;
  Tensor latent_slice = slice_rows(x, begin, begin + latent_tokens_);
  Tensor v_tokens = add_row(matmul(latent_slice, head_w_), head_b_);
  return unpatchify(v_tokens, cfg_.patch_size, latent_shape_);
}

Tensor GenerationTower::forward(const Tensor& z_t,
                                const std::vector<Tensor>& routed_contexts) const {
  return run(z_t, Tensor(), routed_contexts);
}

Tensor GenerationTower::forward_edit(const Tensor& z_t, const Tensor& reference_latent,
                                     const std::vector<Tensor>& routed_contexts) const {
  if (!reference_latent.defined()) {
    throw std::invalid_argument("forward_edit requires a reference latent");
  }
  return run(z_t, reference_latent, routed_contexts);
}

std::vector<NamedTensor> GenerationTower::named_params() const {
  std::vector<NamedTensor> out;
  out.push_back({"g.patch_embed", patch_embed_});
  out.push_back({"g.pos", pos_});
  out.push_back({"g.pos_ref", pos_ref_});
  out.push_back({"g.registers", registers_});
  out.push_back({"g.head_w", head_w_});
  out.push_back({"g.head_b", head_b_});
  for (size_t j = 0; j < blocks_.size(); ++j) {
    append_block_params("g.block" + std::to_string(j), blocks_[j], out);
  }
  return out;
}

std::vector<Tensor> GenerationTower::params() const {
  std::vector<Tensor> out;
  for (auto& [name, value] : named_params()) out.push_back(value);
  return out;
}

// ---- checksum -----------------------------------------------------------------

uint64_t params_checksum(const std::vector<Tensor>& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const Tensor& t : params) {
    for (float f : t.data_vec()) {
      uint32_t bits;
      std::memcpy(&bits, &f, sizeof(bits));
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 0x100000001b3ull;
      }
    }
  }
  return h;
}

}  // namespace mos
