#include "mos/router.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "mos/kernels.hpp"

namespace mos {

void RouterConfig::validate() const {
  if (hidden_dim < 1 || heads < 1 || hidden_dim % heads != 0) {
    throw std::invalid_argument("router hidden_dim " + std::to_string(hidden_dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (blocks < 1) throw std::invalid_argument("router needs at least one block");
  if (k < 1) throw std::invalid_argument("router k must be >= 1");
  if (epsilon < 0.0f || epsilon > 1.0f) {
    throw std::invalid_argument("router epsilon must lie in [0,1], got " + std::to_string(epsilon));
  }
}

// ---- building blocks ----------------------------------------------------------

Tensor sinusoidal_timestep(float t) {
  constexpr int kFreqs = kTimestepFeatures / 2;
  Tensor out = Tensor::zeros({kTimestepFeatures});
  float* p = out.data();
  for (int f = 0; f < kFreqs; ++f) {
    // Periods 10^(4f/63): geometric from 1 to 10^4.
    double period = std::pow(10.0, 4.0 * f / (kFreqs - 1));
    double angle = 2.0 * 3.14159265358979323846 * static_cast<double>(t) / period;
    p[f] = static_cast<float>(std::sin(angle));
    p[kFreqs + f] = static_cast<float>(std::cos(angle));
  }
  return out;
}

Tensor normalize_columns(const Tensor& logits) {
  if (logits.ndim() != 3) {
    throw std::invalid_argument("normalize_columns expects [L_c,m,n], got " +
                                shape_str(logits.shape()));
  }
  return softmax(logits, 1);
}

std::vector<int> select_topk_epsilon(const float* column, int m, int k, float epsilon, Pcg32& rng,
                                     bool* explored) {
  if (k > m) {
    throw std::invalid_argument("top-k selection with k " + std::to_string(k) + " > m " +
                                std::to_string(m));
  }
  bool explore = epsilon > 0.0f && rng.next_float() < epsilon;
  if (explored != nullptr) *explored = explore;
  if (!explore && m <= 64) {
    // Greedy on a stack array: k largest weights, ties toward the lower
    // index, result ascending — the same outputs as the general branch.
    int top[64];
    int count = 0;
    for (int i = 0; i < m; ++i) {
      int pos = count;
      while (pos > 0 && column[top[pos - 1]] < column[i]) --pos;
      if (pos >= k) continue;
      int stop = count < k ? count : k - 1;
      for (int s = stop; s > pos; --s) top[s] = top[s - 1];
      top[pos] = i;
      if (count < k) ++count;
    }
    std::sort(top, top + count);
    return std::vector<int>(top, top + count);
  }
  std::vector<int> idx(static_cast<size_t>(m));
  std::iota(idx.begin(), idx.end(), 0);
  if (explore) {
    // k distinct uniform indices via partial Fisher-Yates.
    for (int s = 0; s < k; ++s) {
      int r = s + static_cast<int>(rng.next_below(static_cast<uint32_t>(m - s)));
      std::swap(idx[static_cast<size_t>(s)], idx[static_cast<size_t>(r)]);
    }
    idx.resize(static_cast<size_t>(k));
  } else {
    // Greedy: k largest weights, ties broken toward the lower index.
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return column[a] > column[b]; });
    idx.resize(static_cast<size_t>(k));
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Weighted sum of the selected bank entries for one target block.  The custom
// backward sends dL/dW[token,i,j] = <dout[token], bank_i[token]> for selected
// entries and w * dout into any trainable bank state.
static Tensor routed_mix(const Tensor& weights, const std::vector<Tensor>& bank,
                         const std::vector<int>& selected, int k, int block, int n) {
  int lc = weights.dim(0);
  int m = weights.dim(1);
  int d = bank[0].dim(1);
  const auto& kt = kernels::active();
  Tensor out = Tensor::zeros({lc, d});
  for (int token = 0; token < lc; ++token) {
    const int* sel = selected.data() + (static_cast<size_t>(token) * n + block) * k;
    for (int s = 0; s < k; ++s) {
      int i = sel[s];
      float w = weights.data()[(static_cast<int64_t>(token) * m + i) * n + block];
      kt.axpy(w, bank[static_cast<size_t>(i)].data() + static_cast<int64_t>(token) * d,
              out.data() + static_cast<int64_t>(token) * d, d);
    }
  }

  Tape* tape = Tape::active();
  if (tape == nullptr) return out;
  bool tracked = tape->tracks(weights);
  for (const Tensor& b : bank) tracked = tracked || tape->tracks(b);
  if (!tracked) return out;
  out.impl()->producer_tape = tape->id();
  std::vector<int> sel_copy(selected);
  std::vector<Tensor> bank_copy(bank);
  tape->record([weights, bank_copy, sel_copy = std::move(sel_copy), out, k, block, n, lc, m,
                d](Tape& tp) {
    const float* dout = tp.adjoint_or_null(out);
    if (dout == nullptr) return;
    const auto& kb = kernels::active();
    float* dw = tp.tracks(weights) ? tp.adjoint(weights) : nullptr;
    for (int token = 0; token < lc; ++token) {
      const int* sel = sel_copy.data() + (static_cast<size_t>(token) * n + block) * k;
      for (int s = 0; s < k; ++s) {
        int i = sel[s];
        const Tensor& src = bank_copy[static_cast<size_t>(i)];
        if (dw != nullptr) {
          dw[(static_cast<int64_t>(token) * m + i) * n + block] += static_cast<float>(
              kb.dot(dout + static_cast<int64_t>(token) * d,
                     src.data() + static_cast<int64_t>(token) * d, d));
        }
        if (tp.tracks(src)) {
          float w = weights.data()[(static_cast<int64_t>(token) * m + i) * n + block];
          kb.axpy(w, dout + static_cast<int64_t>(token) * d,
                  tp.adjoint(src) + static_cast<int64_t>(token) * d, d);
        }
      }
    }
  });
  return out;
}

std::vector<Tensor> aggregate_states(const HiddenStateBank& bank, const RoutingPlan& plan,
                                     const Tensor& shared_projection) {
  int m = static_cast<int>(bank.states.size());
  if (m != plan.m) {
    throw std::invalid_argument("bank depth " + std::to_string(m) + " does not match plan m " +
                                std::to_string(plan.m));
  }
  if (bank.context_length() != plan.context_length) {
    throw std::invalid_argument("bank context length " + std::to_string(bank.context_length()) +
                                " does not match plan " + std::to_string(plan.context_length));
  }
  if (shared_projection.dim(0) != bank.states[0].dim(1)) {
    throw std::invalid_argument("shared projection rows " +
                                std::to_string(shared_projection.dim(0)) +
                                " do not match bank width " +
                                std::to_string(bank.states[0].dim(1)));
  }
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(plan.n));
  Tape* tp = Tape::active();
  bool tracked = tp != nullptr && (tp->tracks(plan.weights) || tp->tracks(shared_projection));
  if (tp != nullptr) {
    for (const Tensor& b : bank.states) tracked = tracked || tp->tracks(b);
  }
  if (!tracked) {
    // Fast path: all blocks' weighted sums in one scratch, one batched
    // projection (row results match the per-block path bit-for-bit).
    int lc = plan.context_length;
    int d = bank.states[0].dim(1);
    int dg = shared_projection.dim(1);
    const auto& kt = kernels::active();
    static thread_local std::vector<float> mixed, proj;
    mixed.assign(static_cast<size_t>(plan.n) * lc * d, 0.0f);
    proj.resize(static_cast<size_t>(plan.n) * lc * dg);
    const float* w = plan.weights.data();
    for (int j = 0; j < plan.n; ++j) {
      for (int token = 0; token < lc; ++token) {
        const int* sel = plan.selected.data() + (static_cast<size_t>(token) * plan.n + j) * plan.k;
        float* dst = mixed.data() + (static_cast<int64_t>(j) * lc + token) * d;
        for (int s = 0; s < plan.k; ++s) {
          int i = sel[s];
          kt.axpy(w[(static_cast<int64_t>(token) * plan.m + i) * plan.n + j],
                  bank.states[static_cast<size_t>(i)].data() + static_cast<int64_t>(token) * d,
                  dst, d);
        }
      }
    }
    kt.matmul_nn(mixed.data(), shared_projection.data(), proj.data(), plan.n * lc, d, dg, false);
    for (int j = 0; j < plan.n; ++j) {
      Tensor o = Tensor::zeros({lc, dg});
      std::memcpy(o.data(), proj.data() + static_cast<int64_t>(j) * lc * dg,
                  static_cast<size_t>(lc) * dg * sizeof(float));
      out.push_back(o);
    }
    return out;
  }
  for (int j = 0; j < plan.n; ++j) {
    Tensor mixed = routed_mix(plan.weights, bank.states, plan.selected, plan.k, j, plan.n);
    out.push_back(matmul(mixed, shared_projection));
  }
  return out;
}

void export_plan_csv_header(std::ostream& os) {
  os << "timestep,token_index,source_layer,target_block,weight\n";
}

void export_plan_csv(std::ostream& os, float t, const RoutingPlan& plan) {
  const float* w = plan.weights.data();
  for (int token = 0; token < plan.context_length; ++token) {
    for (int i = 0; i < plan.m; ++i) {
      for (int j = 0; j < plan.n; ++j) {
        os << t << ',' << token << ',' << (i + 1) << ',' << (j + 1) << ','
           << w[(static_cast<int64_t>(token) * plan.m + i) * plan.n + j] << '\n';
      }
    }
  }
}

// ---- router network ---------------------------------------------------------

namespace {
constexpr float kInitStd = 0.02f;
}

Router::Router(const RouterConfig& cfg, int m, int n, int d_u,
               const std::vector<int>& latent_shape, int patch_size, Pcg32& rng)
    : cfg_(cfg), m_(m), n_(n), d_u_(d_u), patch_size_(patch_size), latent_shape_(latent_shape) {
  cfg_.validate();
  if (m_ < 1 || n_ < 1) throw std::invalid_argument("router needs m >= 1 and n >= 1");
  if (cfg_.k > m_) {
    throw std::invalid_argument("router k " + std::to_string(cfg_.k) + " exceeds m " +
                                std::to_string(m_));
  }
  if (latent_shape_.size() != 3 || latent_shape_[0] % patch_size_ != 0 ||
      latent_shape_[1] % patch_size_ != 0) {
    throw std::invalid_argument("router latent shape " + shape_str(latent_shape_) +
                                " not divisible by patch size " + std::to_string(patch_size_));
  }
  int d = cfg_.hidden_dim;
  int patch_dim = patch_size_ * patch_size_ * latent_shape_[2];
  w_t_ = Tensor::randn({kTimestepFeatures, d}, rng, kInitStd, true);
  w_z_ = Tensor::randn({patch_dim, d}, rng, kInitStd, true);
  w_c_ = Tensor::randn({d_u_, d}, rng, kInitStd, true);
  norm_t_ = Tensor::full({d}, 1.0f, true);
  norm_z_ = Tensor::full({d}, 1.0f, true);
  norm_c_ = Tensor::full({d}, 1.0f, true);
  cls_ = Tensor::randn({1, d}, rng, kInitStd, true);
  head_ = Tensor::randn({d, m_ * n_}, rng, kInitStd, true);
  blocks_.reserve(static_cast<size_t>(cfg_.blocks));
  for (int b = 0; b < cfg_.blocks; ++b) {
    BlockParams bp = make_block(d, /*modality_norms=*/false, rng);
    for (auto* tp : {&bp.norm1, &bp.wq, &bp.wk, &bp.wv, &bp.wo, &bp.q_gain, &bp.k_gain, &bp.norm2,
                     &bp.w1, &bp.w2}) {
      tp->set_requires_grad(true);
    }
    blocks_.push_back(std::move(bp));
  }
}

Tensor Router::embed_inputs(float t, const Tensor& z_t, const Tensor& context_states) const {
  if (!(t >= 0.0f && t <= 1.0f)) {
    throw std::invalid_argument("router timestep " + std::to_string(t) + " outside [0,1]");
  }
  if (z_t.shape() != latent_shape_) {
    throw std::invalid_argument("router latent " + shape_str(z_t.shape()) +
                                " does not match configured shape " + shape_str(latent_shape_));
  }
  if (context_states.ndim() != 2 || context_states.dim(1) != d_u_) {
    throw std::invalid_argument("router context " + shape_str(context_states.shape()) +
                                " does not match d_u " + std::to_string(d_u_));
  }
  Tensor t_tok = rms_norm(matmul(reshape(sinusoidal_timestep(t), {1, kTimestepFeatures}), w_t_),
                          norm_t_);
  Tensor z_tok = rms_norm(matmul(patchify(z_t, patch_size_), w_z_), norm_z_);
  Tensor c_tok = rms_norm(matmul(context_states, w_c_), norm_c_);
  return concat_rows({t_tok, z_tok, c_tok});
}

Tensor Router::predict_logits(const Tensor& input, int context_length) const {
  if (input.ndim() != 2 || input.dim(1) != cfg_.hidden_dim) {
    throw std::invalid_argument("router input " + shape_str(input.shape()) +
                                " does not match hidden dim " + std::to_string(cfg_.hidden_dim));
  }
  if (context_length < 1 || context_length > input.dim(0)) {
    throw std::invalid_argument("context length " + std::to_string(context_length) +
                                " invalid for router input " + shape_str(input.shape()));
  }
  bool sample_wise = cfg_.prediction_mode == PredictionMode::kSampleWise;
  Tensor x = sample_wise ? concat_rows({input, cls_}) : input;
  for (const BlockParams& bp : blocks_) x = block_forward(bp, x, cfg_.heads);
  if (sample_wise) {
    Tensor cls_state = slice_rows(x, x.dim(0) - 1, x.dim(0));
    Tensor one = matmul(cls_state, head_);  // [1, m*n]
    std::vector<Tensor> rows(static_cast<size_t>(context_length), one);
    return reshape(concat_rows(rows), {context_length, m_, n_});
  }
  Tensor ctx_states = slice_rows(x, x.dim(0) - context_length, x.dim(0));
  return reshape(matmul(ctx_states, head_), {context_length, m_, n_});
}

RoutingPlan Router::route(float t, const Tensor& z_t, const Tensor& context_states, float epsilon,
                          uint64_t selection_seed) const {
  RoutingPlan plan;
  plan.context_length = context_states.dim(0);
  plan.m = m_;
  plan.n = n_;
  plan.k = cfg_.k;
  plan.rng_seed = selection_seed;
  plan.logits = predict_logits(embed_inputs(t, z_t, context_states), plan.context_length);
  plan.weights = normalize_columns(plan.logits);
  plan.selected.resize(static_cast<size_t>(plan.context_length) * n_ * cfg_.k);
  Pcg32 rng = derive_rng(selection_seed, rng_tag::kRouter);
  std::vector<float> column(static_cast<size_t>(m_));
  const float* w = plan.weights.data();
  for (int token = 0; token < plan.context_length; ++token) {
    for (int j = 0; j < n_; ++j) {
      for (int i = 0; i < m_; ++i) {
        column[static_cast<size_t>(i)] = w[(static_cast<int64_t>(token) * m_ + i) * n_ + j];
      }
      bool explored = false;
      std::vector<int> sel = select_topk_epsilon(column.data(), m_, cfg_.k, epsilon, rng, &explored);
      plan.explored += explored ? 1 : 0;
      std::copy(sel.begin(), sel.end(),
                plan.selected.begin() + (static_cast<size_t>(token) * n_ + j) * cfg_.k);
    }
  }
  return plan;
}

std::vector<NamedTensor> Router::named_params() const {
  std::vector<NamedTensor> out;
  out.push_back({"r.w_t", w_t_});
  out.push_back({"r.w_z", w_z_});
  out.push_back({"r.w_c", w_c_});
  out.push_back({"r.norm_t", norm_t_});
  out.push_back({"r.norm_z", norm_z_});
  out.push_back({"r.norm_c", norm_c_});
  out.push_back({"r.cls", cls_});
  out.push_back({"r.head", head_});
  for (size_t b = 0; b < blocks_.size(); ++b) {
    append_block_params("r.block" + std::to_string(b), blocks_[b], out);
  }
  return out;
}

std::vector<Tensor> Router::params() const {
  std::vector<Tensor> out;
  for (auto& [name, value] : named_params()) out.push_back(value);
  return out;
}

}  // namespace mos
