// Tests for the finite-difference gradient verifier.  The verifier is itself
// an oracle, so the checks here pin its contract: it passes on a fresh model,
// it is deterministic, and its float/double loss evaluations agree.

#include <doctest.h>

#include <cmath>

#include "mos/reference.hpp"

using namespace mos;

TEST_CASE("grad_check passes at the pinned tolerance") {
  GradCheckReport r = grad_check(1);
  CHECK(r.pass(1e-3));
  CHECK(r.frozen_clean);
  CHECK(r.max_rel_error < 1e-3);
  CHECK(r.max_rel_error > 0.0);  // a literal-zero result would mean no gradient flowed
  CHECK(!r.entries.empty());
  // Worst offender first.
  for (size_t i = 1; i < r.entries.size(); ++i) {
    CHECK(r.entries[i - 1].rel_error >= r.entries[i].rel_error);
  }
  CHECK(r.entries.front().rel_error == doctest::Approx(r.max_rel_error));
}

TEST_CASE("grad_check float and double losses agree") {
  GradCheckReport r = grad_check(3);
  CHECK(std::abs(r.loss_float - r.loss_double) < 1e-4 * (1.0 + std::abs(r.loss_double)));
  CHECK(r.loss_double > 0.0);
}

TEST_CASE("grad_check is deterministic in its seed") {
  GradCheckReport a = grad_check(11);
  GradCheckReport b = grad_check(11);
  CHECK(a.max_rel_error == b.max_rel_error);
  CHECK(a.loss_float == b.loss_float);
  CHECK(a.loss_double == b.loss_double);
  REQUIRE(a.entries.size() == b.entries.size());
  for (size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].name == b.entries[i].name);
    CHECK(a.entries[i].rel_error == b.entries[i].rel_error);
  }
  GradCheckReport c = grad_check(12);
  CHECK(c.loss_double != a.loss_double);
}

TEST_CASE("grad_check covers every trainable tensor and no frozen one") {
  GradCheckReport r = grad_check(5);
  bool saw_router = false, saw_generation = false, saw_proj = false, saw_null = false;
  for (const GradCheckEntry& e : r.entries) {
    CHECK(e.name.rfind("u.", 0) != 0);  // frozen tower never finite-differenced
    if (e.name.rfind("r.", 0) == 0) saw_router = true;
    if (e.name.rfind("g.", 0) == 0) saw_generation = true;
    if (e.name == "proj.shared") saw_proj = true;
    if (e.name == "null.context") saw_null = true;
  }
  CHECK(saw_router);
  CHECK(saw_generation);
  CHECK(saw_proj);
  CHECK(saw_null);
}
