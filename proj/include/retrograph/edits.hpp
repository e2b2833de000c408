#pragma once

#include <vector>

#include "retrograph/molgraph.hpp"
#include "retrograph/reaction.hpp"

namespace retrograph {

struct BondChange {
  int u = 0;
  int v = 0;
  double new_order = 0.0;  ///< 0 deletes the bond.
};

/// A concrete set of retrosynthetic edits on a product graph.
struct EditSet {
  const MolGraph* leaving_group = nullptr;  ///< Wildcards mark attachment points.
  std::vector<int> gate_targets;            ///< Product atom per wildcard, in wildcard order.
  std::vector<BondChange> bond_changes;
  std::vector<int> h_delta;  ///< Per product atom; empty means no change.
};

struct SurgeryResult {
  std::vector<MolGraph> reactants;  ///< Sorted by canonical SMILES.
  bool legal = true;                ///< Every atom passes the valence check.
};

/// Attaches the leaving group, applies bond and hydrogen edits, and splits
/// the result into connected components. Throws SurgeryError for dangling
/// gates, missing bonds or negative hydrogen counts; illegal valences only
/// clear `legal`.
SurgeryResult apply_edits(const MolGraph& product, const EditSet& edits);

/// Builds the edit set described by extracted labels; `leaving_group` must
/// be the parsed canonical leaving group the labels refer to.
EditSet edits_from_labels(const MolGraph& product, const RetroLabels& labels,
                          const MolGraph* leaving_group);

/// Canonical SMILES of each molecule, sorted (multiset representation).
std::vector<std::string> canonical_multiset(const std::vector<MolGraph>& molecules);

}  // namespace retrograph
