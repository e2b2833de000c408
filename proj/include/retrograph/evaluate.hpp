#pragma once

#include <vector>

#include "retrograph/decision.hpp"

namespace retrograph {

struct TopkRow {
  int k = 1;
  double overall = 0.0;  ///< True reactant multiset among the k lowest-energy candidates.
  double rcp = 0.0;      ///< True bond set and hydrogen classes both within their top k.
  double lgm = 0.0;      ///< True leaving group within the top k.
  double lgc = 0.0;      ///< True gate assignment (given the true group) within the top k.
};

struct TopkReport {
  std::vector<TopkRow> rows;
  std::size_t records = 0;
  std::size_t labelled = 0;     ///< Denominator of the rcp and lgm columns.
  std::size_t with_gates = 0;   ///< Denominator of the lgc column.
  std::size_t empty_beam = 0;
};

/// Top-k accuracies over `records`; reaction classes are passed to the model
/// only when it was trained type-known. `beam.k_out` is raised to max(ks).
TopkReport evaluate_topk(const Predictor& predictor, const std::vector<ReactionRecord>& records,
                         const std::vector<int>& ks = {1, 3, 5, 10}, BeamConfig beam = {});

}  // namespace retrograph
