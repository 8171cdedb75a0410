#pragma once

// Central finite-difference oracle. It only touches parameter values and
// forward evaluations, never the tape, so it is independent of backward().

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "crtnet/model.hpp"
#include "crtnet/rng.hpp"
#include "crtnet/tensor.hpp"

namespace crtnet {

/// Central differences of f at the given flat indices of `param` (all indices
/// when `indices` is empty).
std::vector<double> numeric_grad(Tensor param, const std::function<double()>& f, double eps = 1e-5,
                                 const std::vector<std::size_t>& indices = {});

/// ||a - n|| / max(||a||, ||n||); the absolute gap when both vanish.
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

/// Relative error between backward() and central differences for `param`,
/// where `build` recomputes the scalar loss from current values. When the
/// tensor has more than `max_coords` entries a random subset is compared.
double check_gradient(Tensor param, const std::function<Tensor()>& build, Rng& rng, std::size_t max_coords = 0,
                      double eps = 1e-5);

/// Smallest config the end-to-end check runs on (S=16, D=8, 2×2 grid, one
/// layer, two heads, three classes, no dropout).
ModelConfig tiny_model_config();

struct GradCheckEntry {
  std::string name;
  std::uint64_t seed = 0;
  double error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-4;

  double max_error() const;
  std::vector<GradCheckEntry> failures() const;
  bool passed() const { return failures().empty(); }
};

/// Every differentiable op on random inputs.
void check_ops(std::uint64_t seed, GradCheckReport& report);
/// Every parameter of the tiny model under the summed three-head loss. Uses the
/// attached (no-detachment) wiring so every edge is exercised.
void check_model(std::uint64_t seed, GradCheckReport& report, std::size_t max_coords = 64);

/// Ops plus tiny model over seeds first_seed .. first_seed+seeds-1.
GradCheckReport run_gradcheck(int seeds = 20, std::uint64_t first_seed = 1, double tolerance = 1e-4);

}  // namespace crtnet
