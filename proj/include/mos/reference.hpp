#pragma once

// End-to-end gradient verification.  Builds a micro model, assembles one
// training loss (a conditional sample plus a null-context sample), and
// compares every trainable parameter's tape gradient against central finite
// differences evaluated on an independent double-precision mirror of the
// forward pass.  The mirror takes the routing selections as fixed inputs so
// perturbations never flip the non-differentiable top-k choice.

#include <cstdint>
#include <string>
#include <vector>

namespace mos {

struct GradCheckEntry {
  std::string name;
  double rel_error = 0.0;  // max|ad-fd| / (max|fd| + 1e-8) over the tensor
  double ad_norm = 0.0;    // max|ad|
  double fd_norm = 0.0;    // max|fd|
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool frozen_clean = false;  // no gradient buffer appeared on any frozen tensor
  double loss_float = 0.0;    // tape-graph loss value
  double loss_double = 0.0;   // mirror loss value at the same point
  std::vector<GradCheckEntry> entries;  // sorted worst-first
  bool pass(double tol = 1e-3) const { return frozen_clean && max_rel_error < tol; }
};

// Deterministic in seed; finite-difference step h = 1e-4.
GradCheckReport grad_check(uint64_t seed);

}  // namespace mos
