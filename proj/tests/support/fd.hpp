#pragma once

// Central finite differences over plain matrices, independent of the tape.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "retrograph/autodiff.hpp"

namespace oracle {

using Scalar = std::function<retrograph::ad::Var(retrograph::ad::Tape&, const std::vector<retrograph::ad::Var>&)>;

/// Max |g_a - g_n| / max(1, |g_a|, |g_n|) over every entry of every input.
inline double fd_max_error(const Scalar& f, std::vector<Eigen::MatrixXd> inputs, double step = 1e-5) {
  using retrograph::ad::Tape;
  using retrograph::ad::Var;
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& m : inputs) leaves.push_back(tape.leaf(m));
  const Var out = f(tape, leaves);
  tape.backward(out);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Eigen::MatrixXd analytic = tape.grad(leaves[i].id);
    for (Eigen::Index r = 0; r < inputs[i].rows(); ++r) {
      for (Eigen::Index c = 0; c < inputs[i].cols(); ++c) {
        auto eval = [&](double delta) {
          auto shifted = inputs;
          shifted[i](r, c) += delta;
          Tape t;
          std::vector<Var> ls;
          for (const auto& m : shifted) ls.push_back(t.constant(m));
          return f(t, ls).scalar();
        };
        const double numeric = (eval(step) - eval(-step)) / (2 * step);
        const double a = analytic(r, c);
        worst = std::max(worst, std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
      }
    }
  }
  return worst;
}

}  // namespace oracle
