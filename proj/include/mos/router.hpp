#pragma once

// The routing network: a small transformer that reads [timestep token |
// latent tokens | context tokens] and emits one m x n logit matrix per
// context token (or one matrix for the whole sample from a CLS token).
// Columns are softmax-normalized over the m source layers; per (token,
// target block) an epsilon-greedy top-k picks the source layers, and the
// aggregated states pass through one shared d_u -> d_g projection.
//
// Selected weights are used as-is — no renormalization after top-k — so the
// discarded mass acts as a learned gate.  Gradients flow into the selected
// weight entries through the weighted sum; the index choice itself gets no
// estimator.  Layer and block indices are 0-based everywhere in code; the
// CSV export labels them 1-based.

#include <iosfwd>
#include <string>
#include <vector>

#include "mos/rng.hpp"
#include "mos/tensor.hpp"
#include "mos/towers.hpp"

namespace mos {

enum class PredictionMode { kTokenSpecific, kSampleWise };

struct RouterConfig {
  int hidden_dim = 32;
  int heads = 4;
  int blocks = 2;
  int k = 2;
  float epsilon = 0.05f;
  PredictionMode prediction_mode = PredictionMode::kTokenSpecific;
  void validate() const;
  bool operator==(const RouterConfig&) const = default;
};

// Everything downstream consumers need about one routing decision.
struct RoutingPlan {
  Tensor logits;   // [L_c, m, n]
  Tensor weights;  // [L_c, m, n]; each column over the m axis sums to 1
  // k selected source layers per (token, block), flat [token][block][k],
  // each entry in [0, m).
  std::vector<int> selected;
  int context_length = 0;
  int m = 0;
  int n = 0;
  int k = 0;
  uint64_t rng_seed = 0;   // seed used for the epsilon draws
  int explored = 0;        // how many (token, block) decisions took the random branch
  const int* indices(int token, int block) const {
    return selected.data() + (static_cast<size_t>(token) * n + block) * k;
  }
};

// 64 sine then 64 cosine features; frequencies geometric with periods
// 1..10^4.  t=0 gives [0,...,0,1,...,1].
constexpr int kTimestepFeatures = 128;
Tensor sinusoidal_timestep(float t);

// Column softmax over the m axis of [L_c, m, n].
Tensor normalize_columns(const Tensor& logits);

// One epsilon-greedy top-k draw over a weight column of m entries: with
// probability epsilon, k distinct uniform indices; otherwise the k largest
// weights, ties to the lower index.  Returns ascending indices; *explored
// reports which branch fired.
std::vector<int> select_topk_epsilon(const float* column, int m, int k, float epsilon, Pcg32& rng,
                                     bool* explored = nullptr);

// Per block j: S_j[token] = sum over selected i of W[token,i,j] * bank_i[token],
// then the shared d_u -> d_g projection.  Gradients reach the selected weight
// entries and (if trainable) the bank and projection.
std::vector<Tensor> aggregate_states(const HiddenStateBank& bank, const RoutingPlan& plan,
                                     const Tensor& shared_projection);

// Rows (timestep, token_index, source_layer, target_block, weight) for every
// entry of W-bar; source_layer and target_block are 1-based labels.
void export_plan_csv(std::ostream& os, float t, const RoutingPlan& plan);
void export_plan_csv_header(std::ostream& os);

class Router {
 public:
  Router(const RouterConfig& cfg, int m, int n, int d_u, const std::vector<int>& latent_shape,
         int patch_size, Pcg32& rng);

  // [1 + L_z + L_c, d_r]; throws if t is outside [0,1].
  Tensor embed_inputs(float t, const Tensor& z_t, const Tensor& context_states) const;
  // [L_c, m, n]; sample_wise broadcasts the CLS matrix over tokens.
  Tensor predict_logits(const Tensor& input, int context_length) const;
  // Full decision: logits, normalized weights, epsilon-greedy selection.
  // The epsilon draws come from a generator derived from selection_seed.
  RoutingPlan route(float t, const Tensor& z_t, const Tensor& context_states, float epsilon,
                    uint64_t selection_seed) const;

  const RouterConfig& config() const { return cfg_; }
  int source_layers() const { return m_; }
  int target_blocks() const { return n_; }
  std::vector<NamedTensor> named_params() const;  // names prefixed "r."
  std::vector<Tensor> params() const;

 private:
  RouterConfig cfg_;
  int m_, n_, d_u_, patch_size_;
  std::vector<int> latent_shape_;
  Tensor w_t_, w_z_, w_c_;           // modality projections into d_r
  Tensor norm_t_, norm_z_, norm_c_;  // modality RMS gains
  Tensor cls_;                       // [1, d_r], sample_wise only
  Tensor head_;                      // [d_r, m*n]
  std::vector<BlockParams> blocks_;
};

}  // namespace mos
