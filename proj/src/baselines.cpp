#include "mos/baselines.hpp"

#include <chrono>
#include <cmath>
#include <memory>
#include <ostream>
#include <stdexcept>

#include "mos/codec.hpp"
#include "mos/scene.hpp"

namespace mos {

// ---- fixed plans ------------------------------------------------------------

FixedRoutingKind fixed_routing_from_string(const std::string& name) {
  if (name == "handcrafted_even") return FixedRoutingKind::kHandcraftedEven;
  if (name == "final_layer_only") return FixedRoutingKind::kFinalLayerOnly;
  if (name == "mot_one_to_one") return FixedRoutingKind::kMotOneToOne;
  throw std::invalid_argument("unknown fixed routing kind: " + name);
}

std::string fixed_routing_name(FixedRoutingKind kind) {
  switch (kind) {
    case FixedRoutingKind::kHandcraftedEven: return "handcrafted_even";
    case FixedRoutingKind::kFinalLayerOnly: return "final_layer_only";
    case FixedRoutingKind::kMotOneToOne: return "mot_one_to_one";
  }
  throw std::invalid_argument("invalid fixed routing kind");
}

namespace {

int fixed_source(FixedRoutingKind kind, int m, int n, int block) {
  switch (kind) {
    case FixedRoutingKind::kHandcraftedEven:
      // ceil((block+1) * m / n), 0-based.
      return ((block + 1) * m + n - 1) / n - 1;
    case FixedRoutingKind::kFinalLayerOnly:
      return m - 1;
    case FixedRoutingKind::kMotOneToOne:
      return block;
  }
  throw std::invalid_argument("invalid fixed routing kind");
}

}  // namespace

RoutingPlan fixed_plan(FixedRoutingKind kind, int m, int n, int context_length) {
  if (m < 1 || n < 1 || context_length < 1) {
    throw std::invalid_argument("fixed_plan: m " + std::to_string(m) + ", n " + std::to_string(n) +
                                ", context_length " + std::to_string(context_length) +
                                " must all be positive");
  }
  if (kind == FixedRoutingKind::kMotOneToOne && m != n) {
    throw std::invalid_argument("mot_one_to_one: symmetric towers required, got m=" +
                                std::to_string(m) + " n=" + std::to_string(n));
  }
  RoutingPlan plan;
  plan.context_length = context_length;
  plan.m = m;
  plan.n = n;
  plan.k = 1;
  plan.weights = Tensor::zeros({context_length, m, n});
  plan.selected.resize(static_cast<size_t>(context_length) * n);
  float* w = plan.weights.data();
  for (int token = 0; token < context_length; ++token) {
    for (int j = 0; j < n; ++j) {
      int src = fixed_source(kind, m, n, j);
      w[(static_cast<size_t>(token) * m + src) * n + j] = 1.0f;
      plan.selected[static_cast<size_t>(token) * n + j] = src;
    }
  }
  plan.logits = plan.weights;  // one-hot by construction; no softmax behind it
  return plan;
}

FixedRouting::FixedRouting(FixedRoutingKind kind, int m, int n) : kind_(kind), m_(m), n_(n) {
  fixed_plan(kind, m, n, 1);  // validates shape constraints, including m == n for MoT
}

RoutingPlan FixedRouting::plan(const MosModel& model, float t, const Tensor& z_t,
                               const Tensor& router_context, float epsilon,
                               uint64_t selection_seed) const {
  (void)model;
  (void)t;
  (void)z_t;
  (void)epsilon;
  (void)selection_seed;
  if (router_context.ndim() != 2) {
    throw std::invalid_argument("fixed routing expects [L_c, d] context, got " +
                                shape_str(router_context.shape()));
  }
  return fixed_plan(kind_, m_, n_, router_context.shape()[0]);
}

// ---- entropy probe --------------------------------------------------------------

double mean_routing_entropy(const MosModel& model, const std::vector<Sample>& data,
                            BankCache& banks, uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("mean_routing_entropy: empty dataset");
  const float probes[] = {0.1f, 0.5f, 0.9f};
  double total = 0.0;
  long columns = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    const HiddenStateBank& bank = banks.get(model.understanding(), data[i].caption);
    for (size_t p = 0; p < std::size(probes); ++p) {
      Pcg32 rng = derive_rng(seed, rng_tag::kEval, i, p);
      Tensor z_t = Tensor::randn(model.config().latent_shape, rng);
      RoutingPlan plan = model.router().route(probes[p], z_t, bank.states.back(), 0.0f, 0);
      const float* w = plan.weights.data();
      for (int token = 0; token < plan.context_length; ++token) {
        for (int j = 0; j < plan.n; ++j) {
          double h = 0.0;
          for (int l = 0; l < plan.m; ++l) {
            double v = w[(static_cast<size_t>(token) * plan.m + l) * plan.n + j];
            if (v > 1e-12) h -= v * std::log(v);
          }
          total += h;
          ++columns;
        }
      }
    }
  }
  return total / columns;
}

// ---- ablation driver ------------------------------------------------------------------

AblationResult run_ablation(const ModelConfig& cfg, const std::string& arm,
                            const std::vector<Sample>& train_data,
                            const std::vector<Sample>& eval_data,
                            const AblationProtocol& protocol) {
  if (protocol.steps < 1) throw std::invalid_argument("run_ablation: steps must be >= 1");
  if (eval_data.empty()) throw std::invalid_argument("run_ablation: empty eval set");

  std::unique_ptr<FixedRouting> fixed;
  if (arm != "learned") {
    fixed = std::make_unique<FixedRouting>(fixed_routing_from_string(arm),
                                           cfg.understanding.depth, cfg.generation.depth);
  }

  MosModel model(cfg, protocol.model_seed);
  OptimizerState opt;
  BankCache banks;

  auto start = std::chrono::steady_clock::now();
  for (int step = 0; step < protocol.steps; ++step) {
    train_step(model, opt, train_data, banks, protocol.train, protocol.train_seed, step,
               fixed.get());
  }
  auto stop = std::chrono::steady_clock::now();

  AblationResult r;
  r.arm = arm;
  r.seed = protocol.train_seed;
  r.steps = protocol.steps;
  r.wall_seconds = std::chrono::duration<double>(stop - start).count();
  r.val_loss = validation_loss(model, eval_data, banks, protocol.eval_seed, fixed.get());

  int prompts = std::min<int>(protocol.alignment_prompts, static_cast<int>(eval_data.size()));
  double align = 0.0;
  for (int i = 0; i < prompts; ++i) {
    const HiddenStateBank& bank = banks.get(model.understanding(), eval_data[i].caption);
    Tensor latent = sample(model, bank, protocol.sampling, protocol.eval_seed + i, fixed.get());
    align += alignment_score(decode_latent(latent), eval_data[i].scene);
  }
  r.alignment = prompts > 0 ? align / prompts : 0.0;
  r.entropy = fixed ? 0.0 : mean_routing_entropy(model, eval_data, banks, protocol.eval_seed);
  return r;
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationResult>& rows) {
  os << "arm,seed,steps,val_loss,alignment,wall_seconds\n";
  for (const AblationResult& r : rows) {
    os << r.arm << ',' << r.seed << ',' << r.steps << ',' << r.val_loss << ',' << r.alignment
       << ',' << r.wall_seconds << '\n';
  }
}

}  // namespace mos
