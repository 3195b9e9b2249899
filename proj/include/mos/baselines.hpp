#pragma once

// Fixed-routing comparators for the ablation axes.  Each baseline emits a
// static one-hot RoutingPlan (identical across tokens and timesteps) and
// plugs into the same aggregation, projection, and generation path as the
// learned router, so arm differences isolate the routing decision itself.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mos/dataset.hpp"
#include "mos/flow.hpp"
#include "mos/model.hpp"
#include "mos/router.hpp"

namespace mos {

// ---- fixed plans ------------------------------------------------------------

enum class FixedRoutingKind { kHandcraftedEven, kFinalLayerOnly, kMotOneToOne };

// Names used in CLI flags and CSV rows: handcrafted_even, final_layer_only,
// mot_one_to_one.  Throws on anything else.
FixedRoutingKind fixed_routing_from_string(const std::string& name);
std::string fixed_routing_name(FixedRoutingKind kind);

// Static one-hot plan with k=1.  handcrafted_even gives block j source layer
// ceil((j+1)*m/n); final_layer_only always the last layer; mot_one_to_one the
// matching layer (requires m == n).
RoutingPlan fixed_plan(FixedRoutingKind kind, int m, int n, int context_length);

class FixedRouting final : public RoutingPolicy {
 public:
  // Validates shape constraints up front: mot_one_to_one with m != n throws.
  FixedRouting(FixedRoutingKind kind, int m, int n);

  RoutingPlan plan(const MosModel& model, float t, const Tensor& z_t,
                   const Tensor& router_context, float epsilon,
                   uint64_t selection_seed) const override;

  FixedRoutingKind kind() const { return kind_; }

 private:
  FixedRoutingKind kind_;
  int m_;
  int n_;
};

// ---- ablation driver ----------------------------------------------------------

struct AblationProtocol {
  int steps = 10000;
  TrainConfig train;
  uint64_t model_seed = 1;
  uint64_t train_seed = 1;
  uint64_t eval_seed = 1;
  SampleSchedule sampling;     // schedule for the alignment evaluation
  int alignment_prompts = 16;  // how many eval scenes get sampled and scored
};

struct AblationResult {
  std::string arm;  // learned | handcrafted_even | final_layer_only | mot_one_to_one
  uint64_t seed = 0;
  int steps = 0;
  double val_loss = 0.0;
  double alignment = 0.0;
  double wall_seconds = 0.0;   // training loop only
  double entropy = 0.0;        // mean routing entropy (nats); exactly 0 for fixed arms
};

// Trains a fresh model under the shared protocol with the arm's routing and
// evaluates validation loss, alignment, and routing entropy.  All arms with
// the same protocol see identical data order, noise, and initialization.
AblationResult run_ablation(const ModelConfig& cfg, const std::string& arm,
                            const std::vector<Sample>& train_data,
                            const std::vector<Sample>& eval_data,
                            const AblationProtocol& protocol);

// Columns: arm,seed,steps,val_loss,alignment,wall_seconds.
void write_ablation_csv(std::ostream& os, const std::vector<AblationResult>& rows);

// Mean over (token, block) of the column entropy of W-bar, probed at fixed
// timesteps over the dataset with epsilon=0.
double mean_routing_entropy(const MosModel& model, const std::vector<Sample>& data,
                            BankCache& banks, uint64_t seed);

}  // namespace mos
