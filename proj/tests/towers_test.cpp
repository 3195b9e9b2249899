// Tower semantics: banks, patch layout, generation blocks, full forward.

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "mos/rng.hpp"
#include "mos/tensor.hpp"
#include "mos/towers.hpp"

using mos::BlockParams;
using mos::GenerationTower;
using mos::HiddenStateBank;
using mos::Pcg32;
using mos::Tensor;
using mos::TowerConfig;
using mos::UnderstandingTower;

namespace {

using dvec = std::vector<double>;

dvec to_d(const Tensor& t) {
  dvec out(t.data_vec().begin(), t.data_vec().end());
  return out;
}

Tensor find_param(const std::vector<mos::NamedTensor>& params, const std::string& name) {
  for (const auto& p : params) {
    if (p.name == name) return p.value;
  }
  throw std::runtime_error("param not found: " + name);
}

void fill(Tensor t, float v) {
  for (auto& x : t.data_vec()) x = v;
}

// ---- double-precision oracle for a generation block, heads=1 ---------------

dvec rms_rows(const dvec& x, int rows, int d, const dvec& gain) {
  dvec y(x.size());
  for (int r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (int c = 0; c < d; ++c) ms += x[r * d + c] * x[r * d + c];
    double inv = 1.0 / std::sqrt(ms / d + 1e-6);
    for (int c = 0; c < d; ++c) y[r * d + c] = x[r * d + c] * inv * gain[c];
  }
  return y;
}

dvec matmul_o(const dvec& a, const dvec& b, int m, int k, int n) {
  dvec c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      for (int j = 0; j < n; ++j) c[i * n + j] += a[i * k + p] * b[p * n + j];
    }
  }
  return c;
}

// Full-sequence reading of the block: concatenate [context | visual], attend
// and feed-forward over everything, return the visual slice.
dvec dense_block_oracle(const BlockParams& bp, const dvec& vis, int lv, const dvec& ctx, int lc,
                        int d) {
  dvec nc = rms_rows(ctx, lc, d, to_d(bp.norm1_ctx));
  dvec nv = rms_rows(vis, lv, d, to_d(bp.norm1));
  int l = lc + lv;
  dvec seq(static_cast<size_t>(l) * d);
  std::copy(nc.begin(), nc.end(), seq.begin());
  std::copy(nv.begin(), nv.end(), seq.begin() + static_cast<int64_t>(lc) * d);

  dvec q = rms_rows(matmul_o(seq, to_d(bp.wq), l, d, d), l, d, to_d(bp.q_gain));
  dvec k = rms_rows(matmul_o(seq, to_d(bp.wk), l, d, d), l, d, to_d(bp.k_gain));
  dvec v = matmul_o(seq, to_d(bp.wv), l, d, d);
  dvec attn(static_cast<size_t>(l) * d, 0.0);
  for (int i = 0; i < l; ++i) {
    dvec s(l);
    double mx = -1e300;
    for (int j = 0; j < l; ++j) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += q[i * d + c] * k[j * d + c];
      s[j] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (int j = 0; j < l; ++j) z += std::exp(s[j] - mx);
    for (int j = 0; j < l; ++j) {
      double w = std::exp(s[j] - mx) / z;
      for (int c = 0; c < d; ++c) attn[i * d + c] += w * v[j * d + c];
    }
  }
  dvec mixed = matmul_o(attn, to_d(bp.wo), l, d, d);

  // Residual over the original (pre-norm) tokens; context rows use ctx.
  dvec h(static_cast<size_t>(l) * d);
  for (int i = 0; i < lc * d; ++i) h[i] = ctx[i] + mixed[i];
  for (int i = 0; i < lv * d; ++i) h[lc * d + i] = vis[i] + mixed[lc * d + i];

  dvec n2 = rms_rows(h, l, d, to_d(bp.norm2));
  dvec f1 = matmul_o(n2, to_d(bp.w1), l, d, 4 * d);
  for (auto& x : f1) x = x / (1.0 + std::exp(-x));
  dvec f2 = matmul_o(f1, to_d(bp.w2), l, 4 * d, d);
  dvec out(static_cast<size_t>(lv) * d);
  for (int i = 0; i < lv * d; ++i) out[i] = h[lc * d + i] + f2[lc * d + i];
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  TowerConfig bad;
  bad.depth = 0;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = TowerConfig{};
  bad.hidden_dim = 10;
  bad.heads = 4;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("understanding: bank shape, determinism, vocab errors") {
  TowerConfig cfg;
  cfg.depth = 1;
  cfg.hidden_dim = 8;
  cfg.heads = 2;
  cfg.vocab_size = 23;
  Pcg32 rng(11);
  UnderstandingTower u(cfg, 32, 0, 0, rng);

  HiddenStateBank bank = u.forward({1, 2, 3});
  REQUIRE(bank.states.size() == 1);
  REQUIRE(bank.states[0].shape() == std::vector<int>{3, 8});
  REQUIRE(bank.context_length() == 3);

  HiddenStateBank again = u.forward({1, 2, 3});
  REQUIRE(bank.states[0].data_vec() == again.states[0].data_vec());

  REQUIRE_THROWS_AS(u.forward({23}), std::out_of_range);
  REQUIRE_THROWS_AS(u.forward({}), std::invalid_argument);
  REQUIRE_THROWS_AS(u.forward(std::vector<int>(33, 1)), std::invalid_argument);

  // Frozen contract: nothing in the tower asks for gradients.
  for (const Tensor& p : u.params()) REQUIRE(!p.requires_grad());
}

TEST_CASE("understanding: residual-only oracle with zeroed block weights") {
  TowerConfig cfg;
  cfg.depth = 3;
  cfg.hidden_dim = 16;
  cfg.heads = 4;
  cfg.vocab_size = 23;
  Pcg32 rng(12);
  UnderstandingTower u(cfg, 32, 0, 0, rng);
  auto named = u.named_params();
  for (const char* w : {".wq", ".wk", ".wv", ".wo", ".w1", ".w2"}) {
    for (int b = 0; b < 3; ++b) fill(find_param(named, "u.block" + std::to_string(b) + w), 0.0f);
  }

  std::vector<int> ids{4, 0, 7, 2};
  HiddenStateBank bank = u.forward(ids);
  Tensor embed = find_param(named, "u.embed");
  Tensor pos = find_param(named, "u.pos");
  std::vector<float> expect;
  for (size_t i = 0; i < ids.size(); ++i) {
    for (int c = 0; c < 16; ++c) {
      expect.push_back(embed.data()[ids[i] * 16 + c] + pos.data()[i * 16 + c]);
    }
  }
  for (const Tensor& s : bank.states) REQUIRE(s.data_vec() == expect);
}

TEST_CASE("understanding: edit context appends patch-embedded reference tokens") {
  TowerConfig cfg;
  cfg.depth = 2;
  cfg.hidden_dim = 8;
  cfg.heads = 2;
  cfg.vocab_size = 23;
  Pcg32 rng(13);
  UnderstandingTower u(cfg, 32, 2, 3, rng);
  Pcg32 data_rng(14);
  Tensor ref = Tensor::randn({4, 4, 3}, data_rng);

  HiddenStateBank bank = u.forward_edit({18, 14, 15, 1}, ref);
  REQUIRE(bank.context_length() == 4 + 4);  // instruction + 2x2 patch grid
  HiddenStateBank again = u.forward_edit({18, 14, 15, 1}, ref);
  REQUIRE(bank.states[1].data_vec() == again.states[1].data_vec());

  UnderstandingTower plain(cfg, 32, 0, 0, rng);
  REQUIRE_THROWS_AS(plain.forward_edit({18}, ref), std::invalid_argument);
}

TEST_CASE("patchify: layout, round trips, errors") {
  // p=1 is a pure reshape.
  Pcg32 rng(15);
  Tensor x = Tensor::randn({3, 5, 2}, rng);
  Tensor t1 = mos::patchify(x, 1);
  REQUIRE(t1.shape() == std::vector<int>{15, 2});
  REQUIRE(t1.data_vec() == x.data_vec());
  REQUIRE(mos::unpatchify(t1, 1, {3, 5, 2}).data_vec() == x.data_vec());

  // 4x4x1, p=2: first token is the top-left 2x2 block, row-major.
  std::vector<float> vals(16);
  for (int i = 0; i < 16; ++i) vals[static_cast<size_t>(i)] = static_cast<float>(i);
  Tensor grid = Tensor::from_data({4, 4, 1}, vals);
  Tensor tok = mos::patchify(grid, 2);
  REQUIRE(tok.shape() == std::vector<int>{4, 4});
  REQUIRE(tok.data_vec() ==
          std::vector<float>{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15});

  // Random 8x8x3 round trip, bit-exact.
  Tensor y = Tensor::randn({8, 8, 3}, rng);
  REQUIRE(mos::unpatchify(mos::patchify(y, 2), 2, {8, 8, 3}).data_vec() == y.data_vec());

  REQUIRE_THROWS_AS(mos::patchify(Tensor::zeros({5, 4, 1}), 2), std::invalid_argument);
  REQUIRE_THROWS_AS(mos::patchify(Tensor::zeros({4, 4}), 2), std::invalid_argument);
  REQUIRE_THROWS_AS(mos::unpatchify(Tensor::zeros({4, 5}), 2, {4, 4, 1}), std::invalid_argument);
}

TEST_CASE("generation block: empty context degenerates to plain self-attention") {
  Pcg32 rng(16);
  BlockParams bp = mos::make_block(8, true, rng);
  Tensor vis = Tensor::randn({5, 8}, rng);
  Tensor out_none = mos::generation_block_forward(bp, vis, Tensor(), 2);
  Tensor out_zero_rows = mos::generation_block_forward(bp, vis, Tensor::zeros({0, 8}), 2);
  Tensor plain = mos::block_forward(bp, vis, 2);
  REQUIRE(out_none.data_vec() == plain.data_vec());
  REQUIRE(out_zero_rows.data_vec() == plain.data_vec());
}

TEST_CASE("generation block: zero context gain makes output context-content-independent") {
  Pcg32 rng(17);
  BlockParams bp = mos::make_block(8, true, rng);
  fill(bp.norm1_ctx, 0.0f);
  Tensor vis = Tensor::randn({4, 8}, rng);
  Tensor ctx_a = Tensor::randn({3, 8}, rng);
  Tensor ctx_b = Tensor::randn({3, 8}, rng);
  Tensor out_a = mos::generation_block_forward(bp, vis, ctx_a, 2);
  Tensor out_b = mos::generation_block_forward(bp, vis, ctx_b, 2);
  REQUIRE(out_a.data_vec() == out_b.data_vec());
}

TEST_CASE("generation block: dense oracle over the concatenated sequence") {
  Pcg32 rng(18);
  const int d = 8;
  BlockParams bp = mos::make_block(d, true, rng);
  // Re-randomize the gains so the oracle exercises them.
  for (Tensor* g : {&bp.norm1, &bp.norm1_ctx, &bp.norm2, &bp.q_gain, &bp.k_gain}) {
    Tensor fresh = Tensor::randn({d}, rng, 1.0f);
    g->data_vec() = fresh.data_vec();
  }
  Tensor vis = Tensor::randn({2, d}, rng);
  Tensor ctx = Tensor::randn({1, d}, rng);
  Tensor out = mos::generation_block_forward(bp, vis, ctx, 1);

  dvec expect = dense_block_oracle(bp, to_d(vis), 2, to_d(ctx), 1, d);
  REQUIRE(out.numel() == static_cast<int64_t>(expect.size()));
  for (int i = 0; i < out.numel(); ++i) {
    REQUIRE(std::abs(out.data()[i] - expect[static_cast<size_t>(i)]) <=
            1e-5 + 1e-4 * std::abs(expect[static_cast<size_t>(i)]));
  }

  REQUIRE_THROWS_AS(mos::generation_block_forward(bp, vis, Tensor::zeros({2, 4}), 1),
                    std::invalid_argument);
}

TEST_CASE("generation block: permuting context rows leaves output unchanged") {
  Pcg32 rng(19);
  BlockParams bp = mos::make_block(8, true, rng);
  Tensor vis = Tensor::randn({4, 8}, rng);
  Tensor ctx = Tensor::randn({3, 8}, rng);
  std::vector<float> perm_vals(ctx.data_vec());
  // Rotate rows 0<-1<-2<-0.
  for (int c = 0; c < 8; ++c) {
    perm_vals[0 * 8 + c] = ctx.data()[1 * 8 + c];
    perm_vals[1 * 8 + c] = ctx.data()[2 * 8 + c];
    perm_vals[2 * 8 + c] = ctx.data()[0 * 8 + c];
  }
  Tensor out_a = mos::generation_block_forward(bp, vis, ctx, 2);
  Tensor out_b = mos::generation_block_forward(bp, vis, Tensor::from_data({3, 8}, perm_vals), 2);
  for (int i = 0; i < out_a.numel(); ++i) {
    REQUIRE(std::abs(out_a.data()[i] - out_b.data()[i]) <= 1e-6f);
  }
}

TEST_CASE("generation forward: shape, zero head, context count errors") {
  TowerConfig cfg;
  cfg.depth = 2;
  cfg.hidden_dim = 12;
  cfg.heads = 3;
  cfg.patch_size = 2;
  cfg.register_tokens = 4;
  Pcg32 rng(20);
  GenerationTower g(cfg, {4, 4, 3}, rng);
  REQUIRE(g.latent_tokens() == 4);

  Pcg32 data_rng(21);
  Tensor z = Tensor::randn({4, 4, 3}, data_rng);
  std::vector<Tensor> ctxs(2);
  ctxs[0] = Tensor::randn({3, 12}, data_rng);
  ctxs[1] = Tensor::randn({3, 12}, data_rng);
  Tensor v = g.forward(z, ctxs);
  REQUIRE(v.shape() == z.shape());
  // Head weight and bias start at zero, so a fresh tower predicts zero.
  for (int i = 0; i < v.numel(); ++i) REQUIRE(v.data()[i] == 0.0f);

  REQUIRE_THROWS_AS(g.forward(z, {ctxs[0]}), std::invalid_argument);
  REQUIRE_THROWS_AS(g.forward(Tensor::zeros({4, 4, 2}), ctxs), std::invalid_argument);

  for (const Tensor& p : g.params()) REQUIRE(p.requires_grad());
}

TEST_CASE("generation forward: compositional oracle for a single block") {
  TowerConfig cfg;
  cfg.depth = 1;
  cfg.hidden_dim = 8;
  cfg.heads = 2;
  cfg.patch_size = 2;
  cfg.register_tokens = 2;
  Pcg32 rng(22);
  GenerationTower g(cfg, {4, 4, 3}, rng);
  auto named = g.named_params();
  // A nonzero head so the composition is informative.
  Tensor head_w = find_param(named, "g.head_w");
  Tensor fresh = Tensor::randn({8, 12}, rng, 0.1f);
  head_w.data_vec() = fresh.data_vec();

  Pcg32 data_rng(23);
  Tensor z = Tensor::randn({4, 4, 3}, data_rng);
  Tensor ctx = Tensor::randn({3, 8}, data_rng);
  Tensor out = g.forward(z, {ctx});

  // Same computation composed from the public pieces, using the same tensors.
  BlockParams bp;
  bp.norm1 = find_param(named, "g.block0.norm1");
  bp.norm1_ctx = find_param(named, "g.block0.norm1_ctx");
  bp.wq = find_param(named, "g.block0.wq");
  bp.wk = find_param(named, "g.block0.wk");
  bp.wv = find_param(named, "g.block0.wv");
  bp.wo = find_param(named, "g.block0.wo");
  bp.q_gain = find_param(named, "g.block0.q_gain");
  bp.k_gain = find_param(named, "g.block0.k_gain");
  bp.norm2 = find_param(named, "g.block0.norm2");
  bp.w1 = find_param(named, "g.block0.w1");
  bp.w2 = find_param(named, "g.block0.w2");
  Tensor tokens = mos::add(mos::matmul(mos::patchify(z, 2), find_param(named, "g.patch_embed")),
                           find_param(named, "g.pos"));
  Tensor x = mos::concat_rows({find_param(named, "g.registers"), tokens});
  x = mos::generation_block_forward(bp, x, ctx, 2);
  Tensor latent_slice = mos::slice_rows(x, 2, 2 + 4);
  Tensor v_tokens = mos::add_row(mos::matmul(latent_slice, head_w), find_param(named, "g.head_b"));
  Tensor expect = mos::unpatchify(v_tokens, 2, {4, 4, 3});
  REQUIRE(out.data_vec() == expect.data_vec());
}

TEST_CASE("generation forward: asymmetric desk shape and gradient flow") {
  TowerConfig ucfg;
  ucfg.depth = 8;
  ucfg.hidden_dim = 128;
  ucfg.heads = 4;
  ucfg.vocab_size = 23;
  TowerConfig gcfg;
  gcfg.depth = 4;
  gcfg.hidden_dim = 96;
  gcfg.heads = 4;
  gcfg.patch_size = 2;
  gcfg.register_tokens = 4;
  Pcg32 rng(24);
  UnderstandingTower u(ucfg, 128, 2, 12, rng);
  GenerationTower g(gcfg, {16, 16, 12}, rng);

  HiddenStateBank bank = u.forward({1, 9, 13, 14, 14});
  REQUIRE(bank.states.size() == 8);
  REQUIRE(bank.states[7].shape() == std::vector<int>{5, 128});

  Pcg32 data_rng(25);
  Tensor z = Tensor::randn({16, 16, 12}, data_rng);
  std::vector<Tensor> ctxs;
  for (int j = 0; j < 4; ++j) ctxs.push_back(Tensor::randn({5, 96}, data_rng));

  mos::Tape tape;
  Tensor v = g.forward(z, ctxs);
  Tensor loss = mos::mean_squared_error(v, Tensor::full({16, 16, 12}, 1.0f));
  tape.backward(loss);
  // Zero-init head blocks value gradients upstream, but the head itself and
  // the bias must receive gradient.
  auto named = g.named_params();
  Tensor head_w = find_param(named, "g.head_w");
  REQUIRE(head_w.has_grad());
  bool any_nonzero = false;
  for (float gv : head_w.grad_vec()) any_nonzero = any_nonzero || gv != 0.0f;
  // z is random so the pre-head activations are generically nonzero.
  REQUIRE(any_nonzero);
  for (const Tensor& p : u.params()) REQUIRE(!p.has_grad());
}

TEST_CASE("generation forward_edit: reference slots extend the visual sequence") {
  TowerConfig cfg;
  cfg.depth = 2;
  cfg.hidden_dim = 8;
  cfg.heads = 2;
  cfg.patch_size = 2;
  cfg.register_tokens = 2;
  Pcg32 rng(26);
  GenerationTower g(cfg, {4, 4, 3}, rng);
  auto named = g.named_params();
  Tensor head_w = find_param(named, "g.head_w");
  Tensor fresh = Tensor::randn({8, 12}, rng, 0.1f);
  head_w.data_vec() = fresh.data_vec();

  Pcg32 data_rng(27);
  Tensor z = Tensor::randn({4, 4, 3}, data_rng);
  Tensor ref = Tensor::randn({4, 4, 3}, data_rng);
  std::vector<Tensor> ctxs{Tensor::randn({2, 8}, data_rng), Tensor::randn({2, 8}, data_rng)};

  Tensor with_ref = g.forward_edit(z, ref, ctxs);
  REQUIRE(with_ref.shape() == z.shape());
  Tensor again = g.forward_edit(z, ref, ctxs);
  REQUIRE(with_ref.data_vec() == again.data_vec());

  Tensor without = g.forward(z, ctxs);
  REQUIRE(with_ref.data_vec() != without.data_vec());

  REQUIRE_THROWS_AS(g.forward_edit(z, Tensor(), ctxs), std::invalid_argument);
  REQUIRE_THROWS_AS(g.forward_edit(z, Tensor::zeros({4, 4, 2}), ctxs), std::invalid_argument);
}

TEST_CASE("params checksum: deterministic and sensitive") {
  TowerConfig cfg;
  cfg.depth = 2;
  cfg.hidden_dim = 8;
  cfg.heads = 2;
  cfg.vocab_size = 23;
  Pcg32 rng_a(30);
  Pcg32 rng_b(30);
  UnderstandingTower a(cfg, 32, 0, 0, rng_a);
  UnderstandingTower b(cfg, 32, 0, 0, rng_b);
  uint64_t ca = mos::params_checksum(a.params());
  REQUIRE(ca == mos::params_checksum(b.params()));
  a.params()[0].data()[0] += 1.0f;
  REQUIRE(mos::params_checksum(a.params()) != ca);
}

TEST_CASE("block forward off the tape matches the op-graph path bit for bit") {
  struct Case {
    int rows, d, heads;
  };
  const Case cases[] = {{7, 32, 4}, {13, 96, 4}, {5, 16, 2}, {1, 8, 1}, {78, 32, 4}};
  for (const Case& c : cases) {
    CAPTURE(c.rows);
    CAPTURE(c.d);
    Pcg32 rng(400 + c.rows, 9);
    BlockParams p = mos::make_block(c.d, false, rng);
    Tensor x = Tensor::randn({c.rows, c.d}, rng);
    Tensor fused = mos::block_forward(p, x, c.heads);  // no tape: fused path
    Tensor taped;
    {
      Tensor xt = x.clone();
      xt.set_requires_grad(true);  // tracked input forces the op-graph path
      mos::Tape tape;
      taped = mos::block_forward(p, xt, c.heads);
    }
    REQUIRE(fused.numel() == taped.numel());
    CHECK(std::memcmp(fused.data(), taped.data(),
                      static_cast<size_t>(fused.numel()) * sizeof(float)) == 0);
  }
}

TEST_CASE("frozen tower under an active tape records nothing and matches the untaped bank") {
  TowerConfig cfg;
  cfg.depth = 3;
  cfg.hidden_dim = 16;
  cfg.heads = 2;
  cfg.vocab_size = 23;
  Pcg32 rng(51);
  UnderstandingTower tower(cfg, 32, 0, 0, rng);
  std::vector<int> tokens = {1, 9, 13, 14, 15};
  HiddenStateBank plain = tower.forward(tokens);
  mos::Tape tape;
  HiddenStateBank under_tape = tower.forward(tokens);
  CHECK(tape.node_count() == 0);
  REQUIRE(plain.states.size() == under_tape.states.size());
  for (size_t i = 0; i < plain.states.size(); ++i) {
    CHECK(plain.states[i].data_vec() == under_tape.states[i].data_vec());
  }
}
