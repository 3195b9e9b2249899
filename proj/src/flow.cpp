#include "mos/flow.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mos {

// ---- timestep sampling --------------------------------------------------------

float sample_timestep(const TimestepSampler& sampler, Pcg32& rng) {
  for (;;) {
    float t = 0.0f;
    switch (sampler.strategy) {
      case TimestepStrategy::kUniform:
        t = rng.next_float();
        break;
      case TimestepStrategy::kLogitNormal: {
        float x = rng.normal();
        t = 1.0f / (1.0f + std::exp(-x));
        break;
      }
      case TimestepStrategy::kMode: {
        float u = rng.next_float();
        double c = std::cos(3.14159265358979323846 * 0.5 * u);
        double bent = 1.0 - u - sampler.mode_scale * (c * c - 1.0 + u);
        double a = sampler.mode_shift;
        t = static_cast<float>(a * bent / (1.0 + (a - 1.0) * bent));
        break;
      }
    }
    if (t > 0.0f && t < 1.0f) return t;
  }
}

// ---- schedule -------------------------------------------------------------------

std::vector<float> schedule_timesteps(const SampleSchedule& schedule) {
  if (schedule.steps < 1) {
    throw std::invalid_argument("schedule needs steps >= 1, got " +
                                std::to_string(schedule.steps));
  }
  int s = schedule.steps;
  std::vector<float> ts(static_cast<size_t>(s) + 1);
  for (int i = 0; i <= s; ++i) {
    double u = static_cast<double>(i) / s;
    double t;
    if (schedule.spacing == ScheduleSpacing::kLinear) {
      t = 1.0 - u;
    } else {
      // Linear to t=0.5 over the first half, then quadratic densification.
      t = u <= 0.5 ? 1.0 - u : 2.0 * (1.0 - u) * (1.0 - u);
    }
    ts[static_cast<size_t>(i)] = static_cast<float>(t);
  }
  ts.front() = 1.0f;
  ts.back() = 0.0f;
  return ts;
}

// ---- objective --------------------------------------------------------------------

Tensor interpolate_latent(const Tensor& z0, const Tensor& z1, float t) {
  if (z0.shape() != z1.shape()) {
    throw std::invalid_argument("interpolate_latent: shapes differ, z0 " + shape_str(z0.shape()) +
                                " z1 " + shape_str(z1.shape()));
  }
  if (!(t >= 0.0f && t <= 1.0f)) {
    throw std::invalid_argument("interpolate_latent: t " + std::to_string(t) + " outside [0,1]");
  }
  return add(scale(z0, 1.0f - t), scale(z1, t));
}

Tensor flow_loss(const Tensor& predicted_v, const Tensor& z0, const Tensor& z1) {
  return mean_squared_error(predicted_v, sub(z1, z0));
}

// ---- bank cache ----------------------------------------------------------------------

namespace {

std::string token_key(const std::vector<int>& tokens) {
  std::string key;
  for (int id : tokens) {
    key += std::to_string(id);
    key += ',';
  }
  return key;
}

}  // namespace

const HiddenStateBank& BankCache::get(const UnderstandingTower& u, const std::vector<int>& tokens) {
  std::string key = token_key(tokens);
  auto it = cache_.find(key);
  if (it == cache_.end()) it = cache_.emplace(std::move(key), u.forward(tokens)).first;
  return it->second;
}

const HiddenStateBank& BankCache::get_edit(const UnderstandingTower& u,
                                           const std::vector<int>& instruction,
                                           const Tensor& reference_latent) {
  std::string key = token_key(instruction) + '|' +
                    std::to_string(params_checksum({reference_latent}));
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    it = cache_.emplace(std::move(key), u.forward_edit(instruction, reference_latent)).first;
  }
  return it->second;
}

// ---- training -------------------------------------------------------------------------

namespace {

uint64_t draw_seed(Pcg32& rng) {
  uint64_t hi = rng.next_u32();
  return (hi << 32) | rng.next_u32();
}

Tensor routed_velocity(const MosModel& model, const HiddenStateBank& bank, const Tensor& z_t,
                       float t, float epsilon, uint64_t sel_seed, const Tensor& gen_reference,
                       const RoutingPolicy* routing) {
  RoutingPlan plan = routing
                         ? routing->plan(model, t, z_t, bank.states.back(), epsilon, sel_seed)
                         : model.router().route(t, z_t, bank.states.back(), epsilon, sel_seed);
  std::vector<Tensor> ctxs = aggregate_states(bank, plan, model.shared_projection());
  return gen_reference.defined() ? model.generation().forward_edit(z_t, gen_reference, ctxs)
                                 : model.generation().forward(z_t, ctxs);
}

Tensor sample_loss(const MosModel& model, const HiddenStateBank& bank, const Tensor& z0,
                   const Tensor& z1, float t, float epsilon, uint64_t sel_seed,
                   const Tensor& gen_reference, const RoutingPolicy* routing = nullptr) {
  Tensor z_t = interpolate_latent(z0, z1, t);
  Tensor v = routed_velocity(model, bank, z_t, t, epsilon, sel_seed, gen_reference, routing);
  return flow_loss(v, z0, z1);
}

struct DrawnSample {
  float t = 0.0f;
  Tensor z1;
  bool dropped = false;
  uint64_t sel_seed = 0;
  int index = 0;
};

DrawnSample draw_sample(const TrainConfig& tc, const std::vector<int>& latent_shape,
                        size_t data_size, Pcg32& step_rng, uint64_t master_seed, int64_t step,
                        int slot) {
  DrawnSample d;
  d.index = static_cast<int>(step_rng.next_below(static_cast<uint32_t>(data_size)));
  Pcg32 srng = derive_rng(master_seed, rng_tag::kTrainStep, static_cast<uint64_t>(step),
                          static_cast<uint64_t>(slot) + 1);
  d.t = sample_timestep(tc.timestep, srng);
  d.z1 = Tensor::randn(latent_shape, srng);
  d.dropped = srng.next_float() < tc.context_dropout_p;
  d.sel_seed = draw_seed(srng);
  return d;
}

double apply_update(MosModel& model, OptimizerState& opt, const TrainConfig& tc, Tape& tape,
                    const std::vector<Tensor>& losses) {
  Tensor total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  Tensor loss = scale(total, 1.0f / static_cast<float>(losses.size()));
  double value = loss.item();
  if (!std::isfinite(value)) {
    throw std::runtime_error("training step aborted: non-finite loss " + std::to_string(value));
  }
  tape.backward(loss);
  std::vector<Tensor> params = model.trainable_params();
  if (!opt.initialized()) opt.init(params, tc.optimizer);
  adamw_step(params, opt);
  zero_grads(params);
  return value;
}

}  // namespace

double train_step(MosModel& model, OptimizerState& opt, const std::vector<Sample>& data,
                  BankCache& banks, const TrainConfig& tc, uint64_t master_seed, int64_t step,
                  const RoutingPolicy* routing) {
  if (data.empty()) throw std::invalid_argument("train_step: empty dataset");
  if (tc.batch_size < 1) throw std::invalid_argument("train_step: batch_size must be >= 1");
  Pcg32 step_rng = derive_rng(master_seed, rng_tag::kTrainStep, static_cast<uint64_t>(step));
  HiddenStateBank null_bank = model.null_bank();
  Tape tape;
  std::vector<Tensor> losses;
  losses.reserve(static_cast<size_t>(tc.batch_size));
  for (int b = 0; b < tc.batch_size; ++b) {
    DrawnSample d = draw_sample(tc, model.config().latent_shape, data.size(), step_rng,
                                master_seed, step, b);
    const Sample& s = data[static_cast<size_t>(d.index)];
    const HiddenStateBank& bank =
        d.dropped ? null_bank : banks.get(model.understanding(), s.caption);
    losses.push_back(
        sample_loss(model, bank, s.latent, d.z1, d.t, tc.epsilon, d.sel_seed, Tensor(), routing));
  }
  return apply_update(model, opt, tc, tape, losses);
}

double train_edit_step(MosModel& model, OptimizerState& opt, const std::vector<EditSample>& data,
                       BankCache& banks, const TrainConfig& tc, uint64_t master_seed, int64_t step,
                       bool use_und_context, bool use_gen_context) {
  if (data.empty()) throw std::invalid_argument("train_edit_step: empty dataset");
  if (tc.batch_size < 1) throw std::invalid_argument("train_edit_step: batch_size must be >= 1");
  Pcg32 step_rng = derive_rng(master_seed, rng_tag::kTrainStep, static_cast<uint64_t>(step));
  HiddenStateBank null_bank = model.null_bank();
  Tape tape;
  std::vector<Tensor> losses;
  losses.reserve(static_cast<size_t>(tc.batch_size));
  for (int b = 0; b < tc.batch_size; ++b) {
    DrawnSample d = draw_sample(tc, model.config().latent_shape, data.size(), step_rng,
                                master_seed, step, b);
    const EditSample& s = data[static_cast<size_t>(d.index)];
    const HiddenStateBank& bank =
        d.dropped ? null_bank
        : use_und_context
            ? banks.get_edit(model.understanding(), s.instruction, s.source_latent)
            : banks.get(model.understanding(), s.instruction);
    losses.push_back(sample_loss(model, bank, s.target_latent, d.z1, d.t, tc.epsilon, d.sel_seed,
                                 use_gen_context ? s.source_latent : Tensor()));
  }
  return apply_update(model, opt, tc, tape, losses);
}

// ---- validation -----------------------------------------------------------------------

namespace {

constexpr float kValTimesteps[] = {0.1f, 0.3f, 0.5f, 0.7f, 0.9f};

}  // namespace

double validation_loss(const MosModel& model, const std::vector<Sample>& data, BankCache& banks,
                       uint64_t seed, const RoutingPolicy* routing) {
  if (data.empty()) throw std::invalid_argument("validation_loss: empty dataset");
  double total = 0.0;
  int count = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    const HiddenStateBank& bank = banks.get(model.understanding(), data[i].caption);
    for (size_t g = 0; g < std::size(kValTimesteps); ++g) {
      Pcg32 rng = derive_rng(seed, rng_tag::kEval, i, g);
      Tensor z1 = Tensor::randn(model.config().latent_shape, rng);
      Tensor loss = sample_loss(model, bank, data[i].latent, z1, kValTimesteps[g], 0.0f,
                                draw_seed(rng), Tensor(), routing);
      total += loss.item();
      ++count;
    }
  }
  return total / count;
}

double validation_edit_loss(const MosModel& model, const std::vector<EditSample>& data,
                            BankCache& banks, uint64_t seed, bool use_und_context,
                            bool use_gen_context) {
  if (data.empty()) throw std::invalid_argument("validation_edit_loss: empty dataset");
  double total = 0.0;
  int count = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    const HiddenStateBank& bank =
        use_und_context ? banks.get_edit(model.understanding(), data[i].instruction,
                                         data[i].source_latent)
                        : banks.get(model.understanding(), data[i].instruction);
    for (size_t g = 0; g < std::size(kValTimesteps); ++g) {
      Pcg32 rng = derive_rng(seed, rng_tag::kEval, i, g);
      Tensor z1 = Tensor::randn(model.config().latent_shape, rng);
      Tensor loss = sample_loss(model, bank, data[i].target_latent, z1, kValTimesteps[g], 0.0f,
                                draw_seed(rng),
                                use_gen_context ? data[i].source_latent : Tensor());
      total += loss.item();
      ++count;
    }
  }
  return total / count;
}

// ---- inference ---------------------------------------------------------------------------

namespace {

Tensor euler_integrate(const MosModel& model, const HiddenStateBank& bank,
                       const SampleSchedule& schedule, uint64_t seed, const Tensor& gen_reference,
                       const RoutingPolicy* routing = nullptr) {
  std::vector<float> ts = schedule_timesteps(schedule);
  Pcg32 rng = derive_rng(seed, rng_tag::kSample);
  Tensor z = Tensor::randn(model.config().latent_shape, rng);
  float g = schedule.guidance_scale;
  HiddenStateBank null_bank;
  if (g > 0.0f) null_bank = model.null_bank();
  for (size_t s = 0; s + 1 < ts.size(); ++s) {
    float t = ts[s];
    float dt = ts[s] - ts[s + 1];
    Tensor v = routed_velocity(model, bank, z, t, 0.0f, s, gen_reference, routing);
    if (g > 0.0f) {
      Tensor vu = routed_velocity(model, null_bank, z, t, 0.0f, s, gen_reference, routing);
      v = add(vu, scale(sub(v, vu), g));
    }
    z = sub(z, scale(v, dt));
  }
  return z;
}

}  // namespace

Tensor sample(const MosModel& model, const HiddenStateBank& context_bank,
              const SampleSchedule& schedule, uint64_t seed, const RoutingPolicy* routing) {
  return euler_integrate(model, context_bank, schedule, seed, Tensor(), routing);
}

Tensor edit_sample(const MosModel& model, const Tensor& reference_latent,
                   const std::vector<int>& instruction, const SampleSchedule& schedule,
                   uint64_t seed, bool use_und_context, bool use_gen_context) {
  if (reference_latent.shape() != model.config().latent_shape) {
    throw std::invalid_argument("edit_sample: reference latent " +
                                shape_str(reference_latent.shape()) + " does not match model " +
                                shape_str(model.config().latent_shape));
  }
  HiddenStateBank bank = use_und_context
                             ? model.understanding().forward_edit(instruction, reference_latent)
                             : model.understanding().forward(instruction);
  return euler_integrate(model, bank, schedule, seed,
                         use_gen_context ? reference_latent : Tensor());
}

}  // namespace mos
