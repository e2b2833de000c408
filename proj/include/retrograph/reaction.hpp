#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "retrograph/molgraph.hpp"

namespace retrograph {

/// Maximum absolute hydrogen change per atom; 2k+1 hydrogen classes.
inline constexpr int kDefaultMaxHydrogenChange = 4;
/// A reaction may shed at most this many leaving-group fragments.
inline constexpr int kMaxLeavingGroupFragments = 2;

struct ReactionRecord {
  std::string record_id;
  std::optional<int> reaction_class;  ///< 1..10 when known.
  MolGraph product;                   ///< Main product, fully atom-mapped.
  std::vector<MolGraph> reactants;    ///< One graph per dot-separated reactant.
};

enum class Split { Train, Val, Test };
std::optional<Split> split_from_string(std::string_view s);

struct CorpusStats {
  std::size_t rows = 0;
  std::size_t loaded = 0;
  std::size_t format_errors = 0;
  std::size_t mapping_errors = 0;
  std::vector<std::string> messages;
};

/// Parses "reactants>>product" (or "reactants>reagents>product").
/// Throws FormatError, MappingError, or a parser error.
ReactionRecord parse_reaction(std::string record_id, std::optional<int> reaction_class,
                              std::string_view reaction);

/// Reads a CSV corpus (id, class, reaction). Split membership comes from the
/// adjacent "<stem>.splits.csv" manifest (id, split); without a manifest
/// every row belongs to the train split. Malformed rows are counted in
/// `stats` and skipped.
std::vector<ReactionRecord> load_corpus(const std::filesystem::path& path, Split split,
                                        CorpusStats* stats = nullptr);

enum class BondEditKind { Delete, OrderChange };

struct BondEdit {
  int u = 0;  ///< Product atom indices.
  int v = 0;
  int map_u = 0;
  int map_v = 0;
  BondEditKind kind = BondEditKind::Delete;
  double reactant_order = 0.0;  ///< Order on the reactant side (0 for delete).
};

struct GateConnection {
  int product_atom = 0;
  int product_map = 0;
  int fragment = 0;  ///< Fragment index within the canonical leaving group.
  int gate = 0;      ///< Wildcard index within the canonical leaving group.
  double order = 1.0;
};

struct RetroLabels {
  std::vector<BondEdit> rc_bonds;  ///< Sorted by (map_u, map_v), map_u < map_v.
  std::vector<int> h_delta;        ///< Per product atom: reactant H - product H.
  std::string leaving_group;       ///< Canonical serialization; empty for none.
  std::vector<int> lg_ids;         ///< Vocabulary ids, filled by LeavingGroupVocab.
  std::vector<GateConnection> gate_connections;  ///< Sorted by gate index.
};

/// Derives the retrosynthetic supervision from an atom-mapped record.
/// Throws LabelError for records the edit formalism cannot represent.
RetroLabels extract_labels(const ReactionRecord& record, int max_h_change = kDefaultMaxHydrogenChange);

/// Reactants that contribute at least one atom to the product (reagents dropped).
std::vector<MolGraph> contributing_reactants(const ReactionRecord& record);

/// LGM class of a labelled record: 0 for the empty leaving group.
inline int lg_class(const RetroLabels& labels) { return labels.lg_ids.empty() ? 0 : labels.lg_ids.front(); }

struct CanonicalLeavingGroup {
  std::string text;
  /// For fragment f and atom a of the input, the gate index of that wildcard
  /// in `text` (or -1 for non-wildcard atoms).
  std::vector<std::vector<int>> gate_index;
  /// Fragment position of each input fragment in `text`.
  std::vector<int> fragment_position;
};

/// Permutation-invariant serialization of a (possibly multi-fragment)
/// leaving group. Throws GateError when a fragment has no wildcard.
CanonicalLeavingGroup canonicalize_leaving_group_detailed(const std::vector<MolGraph>& fragments);
std::string canonicalize_leaving_group(const std::vector<MolGraph>& fragments);

struct LeavingGroupEntry {
  std::string canonical;
  MolGraph graph;               ///< Parsed from `canonical`; wildcards mark gates.
  std::vector<int> gate_atoms;  ///< Wildcard atom indices in gate order.
  std::vector<double> gate_orders;
  std::size_t frequency = 0;

  int gate_count() const noexcept { return static_cast<int>(gate_atoms.size()); }
};

struct VocabStats {
  std::size_t records = 0;
  std::size_t labelled = 0;
  std::size_t skipped = 0;
  /// Distinct leaving groups (excluding the empty one) per labelled record.
  double lg_per_reaction = 0.0;
};

class LeavingGroupVocab {
 public:
  /// Index 0 is always the empty leaving group.
  LeavingGroupVocab();

  static LeavingGroupVocab build(const std::vector<ReactionRecord>& corpus,
                                 int max_h_change = kDefaultMaxHydrogenChange,
                                 VocabStats* stats = nullptr);
  static LeavingGroupVocab from_text(std::string_view text);
  static LeavingGroupVocab load(const std::filesystem::path& path);

  /// "index<TAB>frequency<TAB>canonical" per line.
  std::string to_text() const;
  void save(const std::filesystem::path& path) const;

  int size() const noexcept { return static_cast<int>(entries_.size()); }
  const LeavingGroupEntry& entry(int id) const { return entries_.at(static_cast<std::size_t>(id)); }
  std::optional<int> find(const std::string& canonical) const;
  /// Fills labels.lg_ids; returns false when the leaving group is unknown.
  bool assign_ids(RetroLabels& labels) const;
  int max_gates() const;

 private:
  void add_entry(std::string canonical, std::size_t frequency);

  std::vector<LeavingGroupEntry> entries_;
  std::map<std::string, int> index_;
};

}  // namespace retrograph
