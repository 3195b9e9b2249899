#include "mos/reference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "mos/flow.hpp"
#include "mos/model.hpp"
#include "mos/router.hpp"
#include "mos/scene.hpp"
#include "mos/tensor.hpp"

namespace mos {

namespace {

// ---- double-precision mirror ------------------------------------------------

using Vec = std::vector<double>;

struct DoubleParams {
  std::unordered_map<std::string, Vec> values;
  const Vec& at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw std::logic_error("mirror: missing param " + name);
    return it->second;
  }
};

Vec matmul_d(const Vec& a, int ar, int ac, const Vec& b, int bc) {
  Vec out(static_cast<size_t>(ar) * bc, 0.0);
  for (int i = 0; i < ar; ++i) {
    for (int l = 0; l < ac; ++l) {
      double av = a[static_cast<size_t>(i) * ac + l];
      if (av == 0.0) continue;
      const double* brow = b.data() + static_cast<size_t>(l) * bc;
      double* orow = out.data() + static_cast<size_t>(i) * bc;
      for (int j = 0; j < bc; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Vec rms_d(const Vec& x, int rows, int d, const Vec& gain) {
  Vec out(x.size());
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.data() + static_cast<size_t>(r) * d;
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += xr[j] * xr[j];
    double rinv = 1.0 / std::sqrt(ss / d + 1e-6);
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(r) * d + j] = xr[j] * rinv * gain[j];
  }
  return out;
}

void softmax_row_d(double* row, int n) {
  double mx = row[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    row[i] = std::exp(row[i] - mx);
    sum += row[i];
  }
  for (int i = 0; i < n; ++i) row[i] /= sum;
}

Vec silu_d(const Vec& x) {
  Vec out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
  return out;
}

void add_rows_inplace(Vec& a, const Vec& b) {
  for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// Bidirectional attention with per-head QK RMS norm, mirroring the float op:
// the [d] gain vectors are sliced per head into [hd] gains.
Vec mha_d(const Vec& q, int qr, const Vec& k, const Vec& v, int kr, int d, int heads,
          const Vec& q_gain, const Vec& k_gain) {
  int hd = d / heads;
  double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  Vec out(static_cast<size_t>(qr) * d, 0.0);
  Vec qh(static_cast<size_t>(qr) * hd), kh(static_cast<size_t>(kr) * hd);
  for (int h = 0; h < heads; ++h) {
    for (int r = 0; r < qr; ++r) {
      for (int j = 0; j < hd; ++j) {
        qh[static_cast<size_t>(r) * hd + j] = q[static_cast<size_t>(r) * d + h * hd + j];
      }
    }
    for (int r = 0; r < kr; ++r) {
      for (int j = 0; j < hd; ++j) {
        kh[static_cast<size_t>(r) * hd + j] = k[static_cast<size_t>(r) * d + h * hd + j];
      }
    }
    Vec qg(q_gain.begin() + h * hd, q_gain.begin() + (h + 1) * hd);
    Vec kg(k_gain.begin() + h * hd, k_gain.begin() + (h + 1) * hd);
    Vec qn = rms_d(qh, qr, hd, qg);
    Vec kn = rms_d(kh, kr, hd, kg);
    for (int r = 0; r < qr; ++r) {
      Vec scores(static_cast<size_t>(kr));
      for (int c = 0; c < kr; ++c) {
        double dot = 0.0;
        for (int j = 0; j < hd; ++j) {
          dot += qn[static_cast<size_t>(r) * hd + j] * kn[static_cast<size_t>(c) * hd + j];
        }
        scores[static_cast<size_t>(c)] = dot * sc;
      }
      softmax_row_d(scores.data(), kr);
      for (int c = 0; c < kr; ++c) {
        double w = scores[static_cast<size_t>(c)];
        for (int j = 0; j < hd; ++j) {
          out[static_cast<size_t>(r) * d + h * hd + j] +=
              w * v[static_cast<size_t>(c) * d + h * hd + j];
        }
      }
    }
  }
  return out;
}

struct BlockRef {
  const Vec* norm1 = nullptr;
  const Vec* norm1_ctx = nullptr;
  const Vec* wq = nullptr;
  const Vec* wk = nullptr;
  const Vec* wv = nullptr;
  const Vec* wo = nullptr;
  const Vec* q_gain = nullptr;
  const Vec* k_gain = nullptr;
  const Vec* norm2 = nullptr;
  const Vec* w1 = nullptr;
  const Vec* w2 = nullptr;
};

BlockRef block_ref(const DoubleParams& p, const std::string& prefix, bool ctx_norm) {
  BlockRef b;
  b.norm1 = &p.at(prefix + ".norm1");
  if (ctx_norm) b.norm1_ctx = &p.at(prefix + ".norm1_ctx");
  b.wq = &p.at(prefix + ".wq");
  b.wk = &p.at(prefix + ".wk");
  b.wv = &p.at(prefix + ".wv");
  b.wo = &p.at(prefix + ".wo");
  b.q_gain = &p.at(prefix + ".q_gain");
  b.k_gain = &p.at(prefix + ".k_gain");
  b.norm2 = &p.at(prefix + ".norm2");
  b.w1 = &p.at(prefix + ".w1");
  b.w2 = &p.at(prefix + ".w2");
  return b;
}

Vec ffn_d(const BlockRef& b, const Vec& x, int rows, int d) {
  int h = static_cast<int>(b.w1->size()) / d;
  Vec a = matmul_d(x, rows, d, *b.w1, h);
  return matmul_d(silu_d(a), rows, h, *b.w2, d);
}

Vec attend_d(const BlockRef& b, const Vec& q_rows, int qr, const Vec& kv_rows, int kr, int d,
             int heads) {
  Vec q = matmul_d(q_rows, qr, d, *b.wq, d);
  Vec k = matmul_d(kv_rows, kr, d, *b.wk, d);
  Vec v = matmul_d(kv_rows, kr, d, *b.wv, d);
  Vec mixed = mha_d(q, qr, k, v, kr, d, heads, *b.q_gain, *b.k_gain);
  return matmul_d(mixed, qr, d, *b.wo, d);
}

Vec block_fwd_d(const BlockRef& b, const Vec& x, int rows, int d, int heads) {
  Vec normed = rms_d(x, rows, d, *b.norm1);
  Vec h = x;
  add_rows_inplace(h, attend_d(b, normed, rows, normed, rows, d, heads));
  Vec out = h;
  add_rows_inplace(out, ffn_d(b, rms_d(h, rows, d, *b.norm2), rows, d));
  return out;
}

Vec gen_block_fwd_d(const BlockRef& b, const Vec& visual, int vr, const Vec& ctx, int cr, int d,
                    int heads) {
  Vec normed_vis = rms_d(visual, vr, d, *b.norm1);
  Vec kv = rms_d(ctx, cr, d, *b.norm1_ctx);
  kv.insert(kv.end(), normed_vis.begin(), normed_vis.end());
  Vec h = visual;
  add_rows_inplace(h, attend_d(b, normed_vis, vr, kv, cr + vr, d, heads));
  Vec out = h;
  add_rows_inplace(out, ffn_d(b, rms_d(h, vr, d, *b.norm2), vr, d));
  return out;
}

// Row-major (py, px, dy, dx, c) patch flattening of an [h,w,c] latent.
Vec patchify_d(const Vec& latent, int h, int w, int c, int p) {
  Vec out(latent.size());
  size_t o = 0;
  for (int py = 0; py < h / p; ++py) {
    for (int px = 0; px < w / p; ++px) {
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          for (int ch = 0; ch < c; ++ch) {
            out[o++] = latent[(static_cast<size_t>(py * p + dy) * w + (px * p + dx)) * c + ch];
          }
        }
      }
    }
  }
  return out;
}

Vec sinusoid_d(double t) {
  constexpr int kFreqs = kTimestepFeatures / 2;
  Vec out(kTimestepFeatures);
  for (int f = 0; f < kFreqs; ++f) {
    double period = std::pow(10.0, 4.0 * f / (kFreqs - 1));
    double angle = 2.0 * 3.14159265358979323846 * t / period;
    out[static_cast<size_t>(f)] = std::sin(angle);
    out[static_cast<size_t>(kFreqs + f)] = std::cos(angle);
  }
  return out;
}

// ---- mirror of the full training-loss forward --------------------------------

struct MirrorDims {
  int m, n, k, d_u, d_g, d_r, heads_u, heads_g, heads_r, r_blocks, registers, patch;
  int lat_h, lat_w, lat_c;
  int gen_tokens() const { return (lat_h / patch) * (lat_w / patch); }
  int patch_dim() const { return patch * patch * lat_c; }
};

// One per-sample loss: router -> aggregation (frozen selection) -> generation
// tower -> flow MSE.  The bank is m states of [L_c, d_u].
double mirror_sample_loss(const DoubleParams& P, const MirrorDims& D,
                          const std::vector<Vec>& bank, int lc, const Vec& z0, const Vec& z1,
                          double t, const std::vector<int>& selected) {
  size_t zn = z0.size();
  Vec z_t(zn), target(zn);
  for (size_t i = 0; i < zn; ++i) {
    z_t[i] = (1.0 - t) * z0[i] + t * z1[i];
    target[i] = z1[i] - z0[i];
  }

  // Router input: [timestep | latent patches | context rows].
  Vec t_tok = rms_d(matmul_d(sinusoid_d(t), 1, kTimestepFeatures, P.at("r.w_t"), D.d_r), 1, D.d_r,
                    P.at("r.norm_t"));
  Vec z_patches = patchify_d(z_t, D.lat_h, D.lat_w, D.lat_c, D.patch);
  Vec z_tok = rms_d(matmul_d(z_patches, D.gen_tokens(), D.patch_dim(), P.at("r.w_z"), D.d_r),
                    D.gen_tokens(), D.d_r, P.at("r.norm_z"));
  Vec c_tok = rms_d(matmul_d(bank.back(), lc, D.d_u, P.at("r.w_c"), D.d_r), lc, D.d_r,
                    P.at("r.norm_c"));
  Vec x = t_tok;
  x.insert(x.end(), z_tok.begin(), z_tok.end());
  x.insert(x.end(), c_tok.begin(), c_tok.end());
  int rows = 1 + D.gen_tokens() + lc;
  for (int b = 0; b < D.r_blocks; ++b) {
    x = block_fwd_d(block_ref(P, "r.block" + std::to_string(b), false), x, rows, D.d_r,
                    D.heads_r);
  }
  Vec ctx_states(x.end() - static_cast<size_t>(lc) * D.d_r, x.end());
  Vec logits = matmul_d(ctx_states, lc, D.d_r, P.at("r.head"), D.m * D.n);  // [lc, m*n]

  // Column softmax over the m axis.
  Vec weights(static_cast<size_t>(lc) * D.m * D.n);
  for (int token = 0; token < lc; ++token) {
    for (int j = 0; j < D.n; ++j) {
      Vec col(static_cast<size_t>(D.m));
      for (int i = 0; i < D.m; ++i) {
        col[static_cast<size_t>(i)] = logits[(static_cast<size_t>(token) * D.m + i) * D.n + j];
      }
      softmax_row_d(col.data(), D.m);
      for (int i = 0; i < D.m; ++i) {
        weights[(static_cast<size_t>(token) * D.m + i) * D.n + j] = col[static_cast<size_t>(i)];
      }
    }
  }

  // Aggregation with the frozen selection, then the shared projection.
  const Vec& proj = P.at("proj.shared");
  std::vector<Vec> contexts;
  contexts.reserve(static_cast<size_t>(D.n));
  for (int j = 0; j < D.n; ++j) {
    Vec mixed(static_cast<size_t>(lc) * D.d_u, 0.0);
    for (int token = 0; token < lc; ++token) {
      const int* sel = selected.data() + (static_cast<size_t>(token) * D.n + j) * D.k;
      for (int s = 0; s < D.k; ++s) {
        int i = sel[s];
        double w = weights[(static_cast<size_t>(token) * D.m + i) * D.n + j];
        const double* src = bank[static_cast<size_t>(i)].data() + static_cast<size_t>(token) * D.d_u;
        double* dst = mixed.data() + static_cast<size_t>(token) * D.d_u;
        for (int e = 0; e < D.d_u; ++e) dst[e] += w * src[e];
      }
    }
    contexts.push_back(matmul_d(mixed, lc, D.d_u, proj, D.d_g));
  }

  // Generation tower: registers, embedded patches with positions, blocks with
  // in-context rows, zeroed-out... head, patch-space MSE (a permutation of the
  // latent-space MSE, so the value is identical).
  Vec vis = P.at("g.registers");
  Vec embedded = matmul_d(z_patches, D.gen_tokens(), D.patch_dim(), P.at("g.patch_embed"), D.d_g);
  add_rows_inplace(embedded, P.at("g.pos"));
  vis.insert(vis.end(), embedded.begin(), embedded.end());
  int vr = D.registers + D.gen_tokens();
  for (int j = 0; j < D.n; ++j) {
    vis = gen_block_fwd_d(block_ref(P, "g.block" + std::to_string(j), true), vis, vr,
                          contexts[static_cast<size_t>(j)], lc, D.d_g, D.heads_g);
  }
  Vec latent_slice(vis.begin() + static_cast<size_t>(D.registers) * D.d_g, vis.end());
  Vec v_tokens = matmul_d(latent_slice, D.gen_tokens(), D.d_g, P.at("g.head_w"), D.patch_dim());
  const Vec& head_b = P.at("g.head_b");
  Vec target_patches = patchify_d(target, D.lat_h, D.lat_w, D.lat_c, D.patch);
  double mse = 0.0;
  for (int r = 0; r < D.gen_tokens(); ++r) {
    for (int cdim = 0; cdim < D.patch_dim(); ++cdim) {
      double diff = v_tokens[static_cast<size_t>(r) * D.patch_dim() + cdim] +
                    head_b[static_cast<size_t>(cdim)] -
                    target_patches[static_cast<size_t>(r) * D.patch_dim() + cdim];
      mse += diff * diff;
    }
  }
  return mse / (static_cast<double>(D.gen_tokens()) * D.patch_dim());
}

// Frozen understanding tower forward in double: per-layer post-residual bank.
std::vector<Vec> mirror_understanding_bank(const DoubleParams& P, const MirrorDims& D,
                                           const std::vector<int>& tokens, int u_depth) {
  int lc = static_cast<int>(tokens.size());
  const Vec& embed = P.at("u.embed");
  const Vec& pos = P.at("u.pos");
  Vec x(static_cast<size_t>(lc) * D.d_u);
  for (int i = 0; i < lc; ++i) {
    for (int j = 0; j < D.d_u; ++j) {
      x[static_cast<size_t>(i) * D.d_u + j] =
          embed[static_cast<size_t>(tokens[static_cast<size_t>(i)]) * D.d_u + j] +
          pos[static_cast<size_t>(i) * D.d_u + j];
    }
  }
  std::vector<Vec> bank;
  for (int b = 0; b < u_depth; ++b) {
    x = block_fwd_d(block_ref(P, "u.block" + std::to_string(b), false), x, lc, D.d_u, D.heads_u);
    bank.push_back(x);
  }
  return bank;
}

Vec to_double(const Tensor& t) {
  Vec out(static_cast<size_t>(t.numel()));
  const float* p = t.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = p[i];
  return out;
}

}  // namespace

// ---- finite-difference driver ---------------------------------------------------

GradCheckReport grad_check(uint64_t seed) {
  ModelConfig cfg;
  cfg.understanding.depth = 2;
  cfg.understanding.hidden_dim = 8;
  cfg.understanding.heads = 2;
  cfg.understanding.vocab_size = kTokenCount;
  cfg.generation.depth = 2;
  cfg.generation.hidden_dim = 8;
  cfg.generation.heads = 2;
  cfg.generation.patch_size = 2;
  cfg.generation.register_tokens = 1;
  cfg.router.hidden_dim = 8;
  cfg.router.heads = 2;
  cfg.router.blocks = 1;
  cfg.router.k = 1;  // exercises the sparse gather, not the dense k=m case
  cfg.latent_shape = {4, 4, 4};
  cfg.max_positions = 16;

  MosModel model(cfg, seed);

  // The head starts at zero, which would zero out most of the graph's
  // gradients; give it generic weights first.
  Pcg32 head_rng = derive_rng(seed, rng_tag::kInit, 99);
  for (NamedTensor p : model.named_params()) {
    if (p.name == "g.head_w" || p.name == "g.head_b") {
      Tensor filler = Tensor::randn(p.value.shape(), head_rng, 0.02f);
      std::copy(filler.data(), filler.data() + filler.numel(), p.value.data());
    }
  }

  // Scenario: one conditional sample and one null-context sample.
  const std::vector<int> tokens = {3, 10};
  const float ta = 0.7f, tb = 0.3f;
  Pcg32 data_rng = derive_rng(seed, rng_tag::kEval, 0);
  Tensor z0a = Tensor::randn(cfg.latent_shape, data_rng);
  Tensor z1a = Tensor::randn(cfg.latent_shape, data_rng);
  Tensor z0b = Tensor::randn(cfg.latent_shape, data_rng);
  Tensor z1b = Tensor::randn(cfg.latent_shape, data_rng);

  HiddenStateBank bank_c = model.understanding().forward(tokens);
  HiddenStateBank bank_n = model.null_bank();

  // Tape pass; selections are recorded and handed to the mirror as constants.
  RoutingPlan plan_a, plan_b;
  GradCheckReport report;
  {
    Tape tape;
    Tensor z_ta = interpolate_latent(z0a, z1a, ta);
    plan_a = model.router().route(ta, z_ta, bank_c.states.back(), 0.0f, 1);
    Tensor va = model.generation().forward(
        z_ta, aggregate_states(bank_c, plan_a, model.shared_projection()));
    Tensor la = flow_loss(va, z0a, z1a);

    Tensor z_tb = interpolate_latent(z0b, z1b, tb);
    plan_b = model.router().route(tb, z_tb, bank_n.states.back(), 0.0f, 2);
    Tensor vb = model.generation().forward(
        z_tb, aggregate_states(bank_n, plan_b, model.shared_projection()));
    Tensor lb = flow_loss(vb, z0b, z1b);

    Tensor loss = scale(add(la, lb), 0.5f);
    report.loss_float = loss.item();
    tape.backward(loss);
  }

  // Frozen contract: no gradient buffer may appear on the understanding tower.
  report.frozen_clean = true;
  for (const NamedTensor& p : model.understanding().named_params()) {
    if (p.value.has_grad() || p.value.requires_grad()) report.frozen_clean = false;
  }

  // Double mirror of every parameter.
  DoubleParams P;
  for (NamedTensor p : model.named_params()) P.values[p.name] = to_double(p.value);

  MirrorDims D;
  D.m = cfg.understanding.depth;
  D.n = cfg.generation.depth;
  D.k = cfg.router.k;
  D.d_u = cfg.understanding.hidden_dim;
  D.d_g = cfg.generation.hidden_dim;
  D.d_r = cfg.router.hidden_dim;
  D.heads_u = cfg.understanding.heads;
  D.heads_g = cfg.generation.heads;
  D.heads_r = cfg.router.heads;
  D.r_blocks = cfg.router.blocks;
  D.registers = cfg.generation.register_tokens;
  D.patch = cfg.generation.patch_size;
  D.lat_h = cfg.latent_shape[0];
  D.lat_w = cfg.latent_shape[1];
  D.lat_c = cfg.latent_shape[2];

  Vec z0a_d = to_double(z0a), z1a_d = to_double(z1a);
  Vec z0b_d = to_double(z0b), z1b_d = to_double(z1b);

  auto eval_loss = [&](const DoubleParams& params) {
    std::vector<Vec> bank_a =
        mirror_understanding_bank(params, D, tokens, cfg.understanding.depth);
    std::vector<Vec> bank_b(static_cast<size_t>(D.m), params.at("null.context"));
    double la = mirror_sample_loss(params, D, bank_a, static_cast<int>(tokens.size()), z0a_d,
                                   z1a_d, ta, plan_a.selected);
    double lb = mirror_sample_loss(params, D, bank_b, 1, z0b_d, z1b_d, tb, plan_b.selected);
    return 0.5 * (la + lb);
  };
  report.loss_double = eval_loss(P);

  // Central differences per trainable parameter.
  const double h = 1e-4;
  for (NamedTensor p : model.named_params()) {
    if (!p.value.requires_grad()) continue;  // frozen tower is asserted above instead
    Vec& theta = P.values[p.name];
    const std::vector<float>* ad = nullptr;
    std::vector<float> zeros;
    if (p.value.has_grad()) {
      ad = &p.value.grad_vec();
    } else {
      zeros.assign(static_cast<size_t>(p.value.numel()), 0.0f);
      ad = &zeros;
    }
    double max_diff = 0.0, max_fd = 0.0, max_ad = 0.0;
    for (size_t i = 0; i < theta.size(); ++i) {
      double keep = theta[i];
      theta[i] = keep + h;
      double lp = eval_loss(P);
      theta[i] = keep - h;
      double lm = eval_loss(P);
      theta[i] = keep;
      double fd = (lp - lm) / (2.0 * h);
      double adv = static_cast<double>((*ad)[i]);
      max_diff = std::max(max_diff, std::abs(adv - fd));
      max_fd = std::max(max_fd, std::abs(fd));
      max_ad = std::max(max_ad, std::abs(adv));
    }
    GradCheckEntry e;
    e.name = p.name;
    e.ad_norm = max_ad;
    e.fd_norm = max_fd;
    e.rel_error = max_diff / (max_fd + 1e-8);
    report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
    report.entries.push_back(std::move(e));
  }
  std::sort(report.entries.begin(), report.entries.end(),
            [](const GradCheckEntry& a, const GradCheckEntry& b) {
              return a.rel_error > b.rel_error;
            });
  return report;
}

}  // namespace mos
