#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace retrograph {

using IntMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;

/// Binary bond properties, one adjacency matrix each.
enum class BondSense : int { Sigma = 0, Pi, Triple, Aromatic, Conjugated, Ring };
inline constexpr int kNumSenses = 6;

/// Walk counts above this are clipped before embedding lookup.
inline constexpr int kCountClip = 8;
/// Topological distance assigned to atoms in different fragments.
inline constexpr int kDistInf = 64;
inline constexpr double kAromaticOrder = 1.5;

struct AtomRecord {
  int atomic_number = 6;  ///< 0 for the "*" wildcard.
  int formal_charge = 0;
  int isotope = 0;
  int explicit_h = 0;
  int implicit_h = 0;
  bool aromatic = false;
  int atom_map = 0;  ///< 0 when unmapped.

  bool is_wildcard() const noexcept { return atomic_number == 0; }
  int total_h() const noexcept { return explicit_h + implicit_h; }
};

struct Bond {
  int u = 0;
  int v = 0;
  double order = 1.0;  ///< 1, 1.5 (aromatic), 2 or 3.
};

/// Attributed molecular graph. Immutable once built; every derived matrix
/// is computed in the constructor.
class MolGraph {
 public:
  MolGraph() = default;
  /// Builds the graph from atoms and an undirected bond list. Hydrogen
  /// counts are taken as given (no implicit-H perception here).
  MolGraph(std::vector<AtomRecord> atoms, std::vector<Bond> bonds);

  int size() const noexcept { return static_cast<int>(atoms_.size()); }
  bool empty() const noexcept { return atoms_.empty(); }
  const std::vector<AtomRecord>& atoms() const noexcept { return atoms_; }
  const AtomRecord& atom(int v) const { return atoms_[static_cast<std::size_t>(v)]; }
  const std::vector<Bond>& bonds() const noexcept { return bonds_; }
  const std::vector<int>& neighbors(int v) const { return adjacency_[static_cast<std::size_t>(v)]; }

  double bond_order(int u, int v) const { return bond_order_(u, v); }
  const Eigen::MatrixXd& bond_order_matrix() const noexcept { return bond_order_; }
  const IntMatrix& sense_matrix(BondSense s) const {
    return senses_[static_cast<std::size_t>(s)];
  }
  bool has_sense(BondSense s, int u, int v) const { return sense_matrix(s)(u, v) != 0; }
  const IntMatrix& topo_dist() const noexcept { return topo_dist_; }

  int heavy_degree(int v) const { return static_cast<int>(neighbors(v).size()); }
  /// Neighbor count plus total hydrogen count.
  int total_degree(int v) const { return heavy_degree(v) + atom(v).total_h(); }
  bool atom_in_ring(int v) const { return atom_in_ring_[static_cast<std::size_t>(v)]; }
  bool bond_in_ring(int u, int v) const { return has_sense(BondSense::Ring, u, v); }

  /// Sum of bond orders with aromatic bonds counted as 1.
  int valence_from_bonds(int v) const;
  int aromatic_bond_count(int v) const;
  /// True when the atom's valence fits its allowed-valence table.
  bool valence_ok(int v) const;
  bool all_valences_ok() const;

  /// Atom indices grouped into connected components, each sorted.
  std::vector<std::vector<int>> components() const;
  /// Induced subgraph over `atoms` (in the given order).
  MolGraph subgraph(const std::vector<int>& atoms) const;
  /// Returns a copy with every atom-map number cleared.
  MolGraph without_maps() const;
  /// Index of the atom with the given map number, or -1.
  int find_map(int atom_map) const;

 private:
  void derive();

  std::vector<AtomRecord> atoms_;
  std::vector<Bond> bonds_;
  std::vector<std::vector<int>> adjacency_;
  Eigen::MatrixXd bond_order_;
  std::array<IntMatrix, kNumSenses> senses_;
  IntMatrix topo_dist_;
  std::vector<bool> atom_in_ring_;
};

/// Hydrogens an organic-subset atom receives when written without
/// brackets, given its bonds in `g`.
int implicit_hydrogens(const MolGraph& g, int v);
/// Same rule evaluated from raw quantities (used while parsing).
int implicit_hydrogens(int atomic_number, bool aromatic, int bond_valence, int aromatic_bonds);
/// Valence rule shared by the parser and the legality filter.
bool valence_fits(int atomic_number, int formal_charge, bool aromatic, int bond_valence,
                  int aromatic_bonds, int hydrogens);

struct ParseWarning {
  std::size_t offset;
  std::string message;
};

/// Parses the supported SMILES subset. Throws SyntaxError / ValenceError.
MolGraph parse_smiles(std::string_view text, std::vector<ParseWarning>* warnings = nullptr);

struct WriteOptions {
  bool include_maps = true;
};

/// Canonical atom ranks (0 = first). Wildcards sort before real atoms.
std::vector<int> canonical_ranks(const MolGraph& g, bool use_maps = true);

struct SmilesOutput {
  std::string text;
  std::vector<int> atom_order;  ///< Atom indices in the order they were written.
};

/// Deterministic canonical SMILES writer.
SmilesOutput write_smiles_ordered(const MolGraph& g, const WriteOptions& opts = {});
std::string write_smiles(const MolGraph& g, const WriteOptions& opts = {});
/// Canonical SMILES with map numbers stripped.
std::string canonical_smiles(const MolGraph& g);

/// Walk counts A_i^j for every sense i and hop j = 1..max_hop, unclipped.
/// Result is indexed [sense][hop - 1].
std::vector<std::vector<IntMatrix>> walk_counts(const MolGraph& g, int max_hop);
/// Walk counts clipped at kCountClip; max_hop == 0 gives an empty list.
std::vector<std::vector<IntMatrix>> adjacency_powers(const MolGraph& g, int max_hop);
/// All-pairs shortest path lengths in bonds; kDistInf between fragments.
IntMatrix topo_distances(const MolGraph& g);

/// Supplies the pairwise distance matrix the encoder's global term reads.
using DistanceProvider = std::function<Eigen::MatrixXd(const MolGraph&)>;
DistanceProvider topological_distance_provider();

}  // namespace retrograph
