#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "langseg/tape.hpp"

namespace langseg {

/// A scalar-valued function of a list of parameter maps, built on a tape.
/// The function receives one tape Var per parameter (in order) and returns
/// a 1x1x1 Var.
using ScalarFunction = std::function<Var(Tape<double>&, std::span<const Var>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  // Parameter list index and flat entry index of the worst entry.
  std::size_t worst_param = 0;
  Index worst_entry = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Tape gradients of `f` at `params`. Useful on its own and as the analytic
/// side of `grad_check`.
inline std::vector<DenseMapd> tape_gradients(const ScalarFunction& f, std::span<const DenseMapd> params) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  Var out = f(tape, vars);
  tape.backward(out);
  std::vector<DenseMapd> grads;
  for (Var v : vars) grads.push_back(tape.grad(v));
  return grads;
}

inline double evaluate(const ScalarFunction& f, std::span<const DenseMapd> params) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.constant(p));
  const double v = tape.value(f(tape, vars)).data()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

/// Compares `analytic` against central differences of `f` with step
/// eps * max(1, |p|). Returns the max over entries of
/// |analytic - numeric| / max(1, |analytic|, |numeric|), so a gradient off by
/// a factor of two scores 0.5 wherever it is large.
inline GradCheckResult compare_gradients(const ScalarFunction& f, std::span<const DenseMapd> params,
                                         std::span<const DenseMapd> analytic, double eps = 1e-5) {
  GradCheckResult result;
  std::vector<DenseMapd> probe(params.begin(), params.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    if (!analytic[i].same_shape(params[i])) throw ShapeError("grad_check: gradient shape mismatch");
    for (Index e = 0; e < probe[i].size(); ++e) {
      const double orig = probe[i].data()[e];
      const double h = eps * std::max(1.0, std::abs(orig));
      probe[i].data()[e] = orig + h;
      const double up = evaluate(f, probe);
      probe[i].data()[e] = orig - h;
      const double down = evaluate(f, probe);
      probe[i].data()[e] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i].data()[e];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > result.max_relative_error) {
        result = {err, i, e, a, numeric};
      }
    }
  }
  return result;
}

/// Finite-difference check of the tape gradients of `f`.
inline GradCheckResult grad_check(const ScalarFunction& f, std::span<const DenseMapd> params,
                                  double eps = 1e-5) {
  const auto analytic = tape_gradients(f, params);
  return compare_gradients(f, params, analytic, eps);
}

}  // namespace langseg
