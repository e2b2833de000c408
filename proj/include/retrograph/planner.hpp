#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "retrograph/decision.hpp"

namespace retrograph {

/// Purchasable starting materials, stored as canonical SMILES.
class BuildingBlockSet {
 public:
  BuildingBlockSet() = default;
  /// One SMILES per line; blank lines and '#' comments are skipped.
  /// Unparseable lines are counted and skipped.
  static BuildingBlockSet load(const std::filesystem::path& path, std::size_t* rejected = nullptr);

  void insert(const MolGraph& g);
  void insert_smiles(const std::string& smiles);
  bool contains(const MolGraph& g) const;
  /// Canonicalizes first, so any valid spelling matches.
  bool contains_smiles(const std::string& smiles) const;
  bool contains_canonical(const std::string& canonical) const { return set_.count(canonical) != 0; }
  std::size_t size() const noexcept { return set_.size(); }
  const std::filesystem::path& source() const noexcept { return source_; }

 private:
  std::unordered_set<std::string> set_;
  std::filesystem::path source_;
};

enum class NodeKind { Molecule, Reaction };
enum class NodeStatus { Open, Expanded, Solved, Dead };
const char* status_name(NodeStatus s);

struct RouteNode {
  int id = 0;
  NodeKind kind = NodeKind::Molecule;
  std::string smiles;  ///< Canonical; molecule nodes.
  std::optional<Candidate> candidate;  ///< Reaction nodes.
  /// Accumulated energy from the root along the cheapest path to the node.
  double g_cost = 0.0;
  NodeStatus status = NodeStatus::Open;
  int depth = 0;  ///< Reaction steps from the root (molecule nodes).
  bool in_blocks = false;
  bool expanded = false;  ///< Molecule nodes: expansion has run.
  std::vector<int> parents, children;
};

struct PlanLimits {
  int max_expansions = 100;
  int max_depth = 6;
  int topk_per_expand = 5;
  int max_routes = 1;  ///< Keep searching until this many solved routes exist.

  void validate() const;
};

/// Single-step proposals for a molecule: ranked candidates, or EmptyBeamError.
using Expander = std::function<std::vector<Candidate>(const MolGraph& product, std::optional<int> reaction_type,
                                                      int topk)>;
/// Estimated remaining cost of an unexpanded molecule; must be >= 0.
using ValueFn = std::function<double(const std::string& canonical_smiles)>;

/// Expander backed by the single-step predictor.
Expander predictor_expander(const Predictor& predictor, BeamConfig beam = {});

struct RouteStep {
  std::string product;
  std::vector<std::string> reactants;
  std::string leaving_group;
  EnergyTrace trace;
  int depth = 0;
};

/// A solved synthesis tree flattened in pre-order.
struct Route {
  double cost = 0.0;
  std::vector<RouteStep> steps;
};

/// Best-first AND-OR search in which reaction energies are costs. Molecule
/// nodes are shared by canonical SMILES, so the search space is a DAG.
/// One writer at a time; const members may run concurrently with each other.
class RouteSearch {
 public:
  RouteSearch(const MolGraph& target, const BuildingBlockSet& blocks, Expander expander, PlanLimits limits,
              ValueFn value = {});

  int root() const noexcept { return 0; }
  const RouteNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const noexcept { return nodes_.size(); }
  const PlanLimits& limits() const noexcept { return limits_; }
  int expansions() const noexcept { return expansions_; }

  /// Expands an open molecule node and returns the ids of the new nodes.
  /// Throws AlreadyExpanded, or std::out_of_range for an unknown id or a
  /// reaction node. An empty beam marks the node dead.
  std::vector<int> expand_node(int id, std::optional<int> reaction_type = std::nullopt, int topk = 0);

  /// Open molecule node with the lowest partial-route cost, if any.
  std::optional<int> select() const;
  /// Lowest cost of a partial route through the node (open leaves count at
  /// their value estimate); infinity when no route can pass through it.
  double priority(int id) const;

  /// Runs the search until the cheapest route is proven, `max_routes` are
  /// solved, or limits are hit. Returns the solved routes, cheapest first.
  std::vector<Route> run();
  bool solved() const { return node(root()).status == NodeStatus::Solved; }
  /// Cost of the cheapest fully solved route (infinity when unsolved).
  double best_cost() const;
  /// Up to `max` solved routes, cheapest first (ties by step order).
  std::vector<Route> routes(int max) const;
  /// Priorities of the nodes chosen by run(), in order.
  const std::vector<double>& pop_history() const noexcept { return pops_; }

  /// Structured dump shared with the HTTP service; carries a schema "version".
  nlohmann::json snapshot() const;
  /// One entry of the snapshot's "nodes" array.
  nlohmann::json node_json(int id) const;
  /// Indented text tree of the solved routes.
  std::string text_tree(int max_routes = 1) const;

 private:
  int add_molecule(const std::string& smiles, int parent, double g_cost, int depth);
  std::vector<int> ancestors(int id) const;
  void refresh();

  std::vector<RouteNode> nodes_;
  std::map<std::string, int> by_smiles_;
  std::vector<MolGraph> graphs_;  // parallel to nodes_ (empty for reactions)
  const BuildingBlockSet& blocks_;
  Expander expander_;
  PlanLimits limits_;
  ValueFn value_;
  int expansions_ = 0;
  std::vector<double> rn_, solved_rn_, prio_;
  std::vector<double> pops_;
  std::map<std::tuple<std::string, int, int>, std::vector<Candidate>> cache_;  // (smiles, type, topk)
};

inline constexpr int kSnapshotVersion = 1;

nlohmann::json route_json(const Route& r);
nlohmann::json trace_json(const EnergyTrace& t);

/// Convenience wrapper: throws NoRouteFound when no route is found.
std::vector<Route> plan(const MolGraph& target, const BuildingBlockSet& blocks, Expander expander,
                        const PlanLimits& limits, ValueFn value = {});

}  // namespace retrograph
