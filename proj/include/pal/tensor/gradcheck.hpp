#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pal/tensor/tape.hpp"

namespace pal {

struct GradcheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // Denominator floor: |a - n| / max(|a|, |n|, floor). Keeps vanishing
  // gradients from turning round-off into large relative errors.
  double floor = 1e-4;
};

struct TensorCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t elements = 0;
};

struct GradcheckReport {
  std::vector<TensorCheck> tensors;
  double tolerance = 0.0;

  bool passed() const {
    return std::all_of(tensors.begin(), tensors.end(),
                       [&](const TensorCheck& c) { return c.max_rel_error < tolerance; });
  }

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& c : tensors) m = std::max(m, c.max_rel_error);
    return m;
  }

  std::vector<std::string> failing() const {
    std::vector<std::string> out;
    for (const auto& c : tensors)
      if (!(c.max_rel_error < tolerance)) out.push_back(c.name);
    return out;
  }
};

struct NamedTensor {
  std::string name;
  Tensor* tensor = nullptr;
};

// Builds a scalar loss on the given tape; must bind inputs with Tape::param.
using LossFn = std::function<Var(Tape&)>;

// Compares the tape's analytic gradient of `loss` with central differences for
// every element of every input.
inline GradcheckReport gradcheck(const LossFn& loss, std::span<const NamedTensor> inputs,
                                 const GradcheckOptions& opt = {}) {
  std::vector<bool> saved_flags;
  std::vector<std::vector<double>> saved_grads;
  for (const auto& in : inputs) {
    saved_flags.push_back(in.tensor->requires_grad());
    saved_grads.emplace_back(in.tensor->grad().begin(), in.tensor->grad().end());
    in.tensor->set_requires_grad(true);
    in.tensor->zero_grad();
  }

  {
    Tape tape;
    Var l = loss(tape);
    tape.backward(l);
  }

  auto eval = [&]() {
    Tape tape(false);
    const double v = loss(tape).value().item();
    if (!std::isfinite(v)) throw NonFiniteError("gradcheck: non-finite loss while probing");
    return v;
  };

  GradcheckReport report;
  report.tolerance = opt.tolerance;
  for (const auto& in : inputs) {
    Tensor& t = *in.tensor;
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    TensorCheck check;
    check.name = in.name;
    check.elements = t.size();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + opt.step;
      const double up = eval();
      t[i] = orig - opt.step;
      const double down = eval();
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opt.floor});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      if (i == 0 || rel > check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_index = i;
        check.analytic = analytic[i];
        check.numeric = numeric;
      }
    }
    report.tensors.push_back(check);
  }

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = *inputs[k].tensor;
    t.set_requires_grad(saved_flags[k]);
    if (saved_grads[k].empty()) {
      t.clear_grad();
    } else {
      std::copy(saved_grads[k].begin(), saved_grads[k].end(), t.grad_storage().begin());
    }
  }
  return report;
}

}  // namespace pal
