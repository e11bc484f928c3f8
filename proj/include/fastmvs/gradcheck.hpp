#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "fastmvs/autodiff.hpp"

namespace fastmvs {

struct GradCheckOptions {
  double step = 1e-4;
  // Denominator floor for the relative error, so gradients that are zero up
  // to rounding do not blow the ratio up.
  double floor = 1e-6;
  // An entry is treated as sitting on a kink (relu, |.|, bilinear cell edge)
  // when central differences at step and step/2 disagree by more than this
  // relative amount, or when the forward and backward one-sided differences
  // disagree by more than one_sided_tolerance (a kink exactly at the entry
  // leaves the central differences symmetric); such entries are skipped and
  // counted.
  double kink_tolerance = 1e-5;
  double one_sided_tolerance = 1e-2;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
};

using ScalarFunction = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Compares the reverse-mode gradient of f at `inputs` with central finite
/// differences, entry by entry.
inline GradCheckResult gradient_check(const ScalarFunction& f, const std::vector<Tensor>& inputs,
                                      const GradCheckOptions& opt = {}) {
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& x : xs) vars.push_back(tape.constant(x));
    return f(tape, vars).value().item();
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& x : inputs) vars.push_back(tape.variable(x));
    Var out = f(tape, vars);
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(v.grad().empty() ? Tensor(v.shape()) : v.grad());
  }

  GradCheckResult result;
  const double f0 = evaluate(inputs);
  std::vector<Tensor> xs = inputs;
  for (std::size_t a = 0; a < xs.size(); ++a) {
    for (std::size_t i = 0; i < xs[a].numel(); ++i) {
      const double x0 = xs[a][i];
      double fp1 = 0.0, fm1 = 0.0;
      auto central = [&](double h, double* fp_out, double* fm_out) {
        xs[a][i] = x0 + h;
        const double fp = evaluate(xs);
        xs[a][i] = x0 - h;
        const double fm = evaluate(xs);
        xs[a][i] = x0;
        if (fp_out) *fp_out = fp;
        if (fm_out) *fm_out = fm;
        return (fp - fm) / (2.0 * h);
      };
      const double c1 = central(opt.step, &fp1, &fm1);
      const double c2 = central(0.5 * opt.step, nullptr, nullptr);
      const double scale_ref = std::max(std::abs(c1), opt.floor);
      const double forward = (fp1 - f0) / opt.step, backward = (f0 - fm1) / opt.step;
      if (std::abs(c1 - c2) > opt.kink_tolerance * scale_ref ||
          std::abs(forward - backward) > opt.one_sided_tolerance * scale_ref) {
        ++result.skipped;
        continue;
      }
      const double g = analytic[a][i];
      const double rel = std::abs(g - c1) / std::max({std::abs(g), std::abs(c1), opt.floor});
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_input = a;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace fastmvs
