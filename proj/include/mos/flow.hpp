#pragma once

// Rectified flow matching: timestep sampling, the straight-path interpolant
// z_t = (1-t) z0 + t z1 with target velocity v = z1 - z0, the training step,
// and the Euler sampler with optional classifier-free guidance.
//
// Time runs 1 -> 0 at inference: z starts as pure noise at t=1 and the Euler
// update z <- z - dt * v integrates toward the data endpoint.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mos/dataset.hpp"
#include "mos/model.hpp"
#include "mos/rng.hpp"
#include "mos/tensor.hpp"

namespace mos {

// ---- timestep sampling ------------------------------------------------------

enum class TimestepStrategy { kUniform, kLogitNormal, kMode };

struct TimestepSampler {
  TimestepStrategy strategy = TimestepStrategy::kMode;
  float mode_scale = 0.8f;
  float mode_shift = 3.0f;
  bool operator==(const TimestepSampler&) const = default;
};

// Draws t strictly inside (0,1).  mode: u ~ U(0,1) is bent by
// t' = 1 - u - scale*(cos^2(pi u/2) - 1 + u), then shifted toward 1 by
// t = shift*t' / (1 + (shift-1)*t').
float sample_timestep(const TimestepSampler& sampler, Pcg32& rng);

// ---- sampling schedule --------------------------------------------------------

enum class ScheduleSpacing { kLinear, kLinearQuadratic };

struct SampleSchedule {
  int steps = 32;
  ScheduleSpacing spacing = ScheduleSpacing::kLinear;
  float guidance_scale = 0.0f;
  float context_dropout_p = 0.1f;  // training-side CFG dropout
  bool operator==(const SampleSchedule&) const = default;
};

// steps+1 knots, strictly decreasing from 1 to 0.  linear_quadratic spends
// the first half of the knots linearly down to t=0.5 and densifies the rest
// quadratically near t=0.
std::vector<float> schedule_timesteps(const SampleSchedule& schedule);

// ---- objective ----------------------------------------------------------------

Tensor interpolate_latent(const Tensor& z0, const Tensor& z1, float t);
// Mean squared error between the prediction and z1 - z0.
Tensor flow_loss(const Tensor& predicted_v, const Tensor& z0, const Tensor& z1);

// ---- training -------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 16;
  TimestepSampler timestep;
  float context_dropout_p = 0.1f;
  float epsilon = 0.05f;  // router exploration during training
  AdamWConfig optimizer;
  bool operator==(const TrainConfig&) const = default;
};

// Per-sample frozen-tower outputs, computed once and reused across steps
// (the understanding tower never changes).
class BankCache {
 public:
  const HiddenStateBank& get(const UnderstandingTower& u, const std::vector<int>& tokens);
  const HiddenStateBank& get_edit(const UnderstandingTower& u, const std::vector<int>& instruction,
                                  const Tensor& reference_latent);
  void clear() { cache_.clear(); }

 private:
  std::unordered_map<std::string, HiddenStateBank> cache_;
};

// Pluggable routing decision.  Null in the functions below means the model's
// learned router; the ablation baselines substitute fixed plans while the
// rest of the pipeline stays identical.
class RoutingPolicy {
 public:
  virtual ~RoutingPolicy() = default;
  virtual RoutingPlan plan(const MosModel& model, float t, const Tensor& z_t,
                           const Tensor& router_context, float epsilon,
                           uint64_t selection_seed) const = 0;
};

// One Algorithm-1 update over a uniformly drawn batch: interpolate, route
// (epsilon-greedy), generate, flow loss, backward, AdamW over the trainable
// bundle.  Context dropout swaps in the null bank.  Returns the batch loss.
// Throws if the loss is non-finite, leaving parameters untouched.
double train_step(MosModel& model, OptimizerState& opt, const std::vector<Sample>& data,
                  BankCache& banks, const TrainConfig& tc, uint64_t master_seed, int64_t step,
                  const RoutingPolicy* routing = nullptr);

// Editing variant: context is [instruction | reference] through the
// understanding tower (when use_und_context) and the clean reference extends
// the generation tower's visual sequence (when use_gen_context).
double train_edit_step(MosModel& model, OptimizerState& opt, const std::vector<EditSample>& data,
                       BankCache& banks, const TrainConfig& tc, uint64_t master_seed, int64_t step,
                       bool use_und_context = true, bool use_gen_context = true);

// Mean flow loss over a dataset at fixed timesteps (deterministic, no
// exploration, no dropout, no parameter updates).
double validation_loss(const MosModel& model, const std::vector<Sample>& data, BankCache& banks,
                       uint64_t seed, const RoutingPolicy* routing = nullptr);
double validation_edit_loss(const MosModel& model, const std::vector<EditSample>& data,
                            BankCache& banks, uint64_t seed, bool use_und_context = true,
                            bool use_gen_context = true);

// ---- inference --------------------------------------------------------------------

// Algorithm 2: Euler integration from noise at t=1 to the data endpoint,
// epsilon=0 routing, optional classifier-free guidance
// (v = v_uncond + g*(v_cond - v_uncond) when guidance_scale > 0; the
// unconditional branch is skipped entirely at g=0).
Tensor sample(const MosModel& model, const HiddenStateBank& context_bank,
              const SampleSchedule& schedule, uint64_t seed,
              const RoutingPolicy* routing = nullptr);

// Editing inference: reference enters the understanding context
// (use_und_context) and/or the generation tower's visual sequence
// (use_gen_context); only the denoised noise slice is returned.
Tensor edit_sample(const MosModel& model, const Tensor& reference_latent,
                   const std::vector<int>& instruction, const SampleSchedule& schedule,
                   uint64_t seed, bool use_und_context = true, bool use_gen_context = true);

}  // namespace mos
