#include "retrograph/edits.hpp"

#include <algorithm>
#include <map>

#include "retrograph/error.hpp"

namespace retrograph {

SurgeryResult apply_edits(const MolGraph& product, const EditSet& edits) {
  const int np = product.size();
  std::vector<AtomRecord> atoms;
  atoms.reserve(static_cast<std::size_t>(np));
  for (const auto& a : product.atoms()) {
    AtomRecord c = a;
    c.explicit_h = a.total_h();
    c.implicit_h = 0;
    atoms.push_back(c);
  }
  std::map<std::pair<int, int>, double> bonds;
  auto key = [](int u, int v) { return std::pair(std::min(u, v), std::max(u, v)); };
  for (const auto& b : product.bonds()) bonds[key(b.u, b.v)] = b.order;

  // 1. Attach the leaving group: each wildcard is fused onto its target atom.
  if (edits.leaving_group && !edits.leaving_group->empty()) {
    const MolGraph& lg = *edits.leaving_group;
    std::vector<int> placed(static_cast<std::size_t>(lg.size()), -1);
    for (int v = 0; v < lg.size(); ++v) {
      if (lg.atom(v).is_wildcard()) continue;
      placed[static_cast<std::size_t>(v)] = static_cast<int>(atoms.size());
      AtomRecord c = lg.atom(v);
      c.explicit_h = c.total_h();
      c.implicit_h = 0;
      c.atom_map = 0;
      atoms.push_back(c);
    }
    int gate = 0;
    for (int v = 0; v < lg.size(); ++v) {
      if (!lg.atom(v).is_wildcard()) continue;
      if (gate >= static_cast<int>(edits.gate_targets.size())) throw SurgeryError("dangling gate atom");
      const int target = edits.gate_targets[static_cast<std::size_t>(gate++)];
      if (target < 0 || target >= np) throw SurgeryError("gate target out of range");
      if (lg.heavy_degree(v) != 1) throw SurgeryError("gate atom must have exactly one neighbor");
      const int inner = lg.neighbors(v).front();
      if (lg.atom(inner).is_wildcard()) throw SurgeryError("gate atom bonded to another gate");
      const auto k = key(placed[static_cast<std::size_t>(inner)], target);
      if (bonds.count(k)) throw SurgeryError("two gates attach the same atom pair");
      bonds[k] = lg.bond_order(v, inner);
    }
    if (gate != static_cast<int>(edits.gate_targets.size())) {
      throw SurgeryError("more gate targets than gate atoms");
    }
    for (const auto& b : lg.bonds()) {
      const int pu = placed[static_cast<std::size_t>(b.u)];
      const int pv = placed[static_cast<std::size_t>(b.v)];
      if (pu >= 0 && pv >= 0) bonds[key(pu, pv)] = b.order;
    }
  } else if (!edits.gate_targets.empty()) {
    throw SurgeryError("gate targets without a leaving group");
  }

  // 2. Bond edits on product bonds.
  for (const auto& c : edits.bond_changes) {
    if (c.u < 0 || c.v < 0 || c.u >= np || c.v >= np || product.bond_order(c.u, c.v) == 0.0) {
      throw SurgeryError("bond edit on a non-existent product bond");
    }
    if (c.new_order == 0.0) {
      bonds.erase(key(c.u, c.v));
    } else {
      bonds[key(c.u, c.v)] = c.new_order;
    }
  }

  // 3. Hydrogen changes.
  if (!edits.h_delta.empty()) {
    if (static_cast<int>(edits.h_delta.size()) != np) throw SurgeryError("h_delta size mismatch");
    for (int v = 0; v < np; ++v) {
      auto& a = atoms[static_cast<std::size_t>(v)];
      a.explicit_h += edits.h_delta[static_cast<std::size_t>(v)];
      if (a.explicit_h < 0) throw SurgeryError("negative hydrogen count at atom " + std::to_string(v));
    }
  }

  std::vector<Bond> bond_list;
  bond_list.reserve(bonds.size());
  for (auto& a : atoms) a.aromatic = false;
  for (const auto& [k, order] : bonds) {
    bond_list.push_back({k.first, k.second, order});
    if (order == kAromaticOrder) {
      atoms[static_cast<std::size_t>(k.first)].aromatic = true;
      atoms[static_cast<std::size_t>(k.second)].aromatic = true;
    }
  }
  const MolGraph merged(std::move(atoms), std::move(bond_list));

  // 4. Split into reactants.
  SurgeryResult result;
  result.legal = merged.all_valences_ok();
  std::vector<std::pair<std::string, MolGraph>> parts;
  for (const auto& comp : merged.components()) {
    auto g = merged.subgraph(comp);
    parts.emplace_back(canonical_smiles(g), std::move(g));
  }
  std::stable_sort(parts.begin(), parts.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (auto& [text, g] : parts) result.reactants.push_back(std::move(g));
  return result;
}

EditSet edits_from_labels(const MolGraph& product, const RetroLabels& labels, const MolGraph* leaving_group) {
  if (static_cast<int>(labels.h_delta.size()) != product.size()) {
    throw SurgeryError("labels do not match the product");
  }
  EditSet e;
  e.leaving_group = leaving_group;
  for (const auto& b : labels.rc_bonds) e.bond_changes.push_back({b.u, b.v, b.reactant_order});
  e.h_delta = labels.h_delta;
  if (leaving_group && !leaving_group->empty()) {
    int gates = 0;
    for (const auto& a : leaving_group->atoms()) gates += a.is_wildcard() ? 1 : 0;
    e.gate_targets.assign(static_cast<std::size_t>(gates), -1);
    for (const auto& gc : labels.gate_connections) {
      if (gc.gate < 0 || gc.gate >= gates) throw SurgeryError("gate index out of range");
      e.gate_targets[static_cast<std::size_t>(gc.gate)] = gc.product_atom;
    }
  }
  return e;
}

std::vector<std::string> canonical_multiset(const std::vector<MolGraph>& molecules) {
  std::vector<std::string> out;
  out.reserve(molecules.size());
  for (const auto& m : molecules) out.push_back(canonical_smiles(m));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace retrograph
