#include "retrograph/planner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "retrograph/error.hpp"

namespace retrograph {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

nlohmann::json finite_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

}  // namespace

BuildingBlockSet BuildingBlockSet::load(const std::filesystem::path& path, std::size_t* rejected) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read building blocks: " + path.string());
  BuildingBlockSet set;
  set.source_ = path;
  std::size_t bad = 0;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string smiles;
    if (!(fields >> smiles) || smiles[0] == '#') continue;
    try {
      set.insert(parse_smiles(smiles));
    } catch (const Error&) {
      ++bad;
    }
  }
  if (rejected) *rejected = bad;
  return set;
}

void BuildingBlockSet::insert(const MolGraph& g) { set_.insert(canonical_smiles(g)); }
void BuildingBlockSet::insert_smiles(const std::string& smiles) { insert(parse_smiles(smiles)); }
bool BuildingBlockSet::contains(const MolGraph& g) const { return set_.count(canonical_smiles(g)) != 0; }
bool BuildingBlockSet::contains_smiles(const std::string& smiles) const { return contains(parse_smiles(smiles)); }

const char* status_name(NodeStatus s) {
  switch (s) {
    case NodeStatus::Open: return "open";
    case NodeStatus::Expanded: return "expanded";
    case NodeStatus::Solved: return "solved";
    case NodeStatus::Dead: return "dead";
  }
  return "?";
}

void PlanLimits::validate() const {
  if (max_expansions < 0) throw ConfigError("max_expansions must be non-negative");
  if (max_depth < 1 || topk_per_expand < 1 || max_routes < 1) {
    throw ConfigError("max_depth, topk_per_expand and max_routes must be >= 1");
  }
}

Expander predictor_expander(const Predictor& predictor, BeamConfig beam) {
  return [&predictor, beam](const MolGraph& product, std::optional<int> type, int topk) {
    BeamConfig b = beam;
    b.k_out = topk;
    return predictor.predict(product, type, b);
  };
}

RouteSearch::RouteSearch(const MolGraph& target, const BuildingBlockSet& blocks, Expander expander,
                         PlanLimits limits, ValueFn value)
    : blocks_(blocks), expander_(std::move(expander)), limits_(limits), value_(std::move(value)) {
  limits_.validate();
  if (target.empty()) throw FormatError("empty target");
  add_molecule(canonical_smiles(target), -1, 0.0, 0);
  refresh();
}

int RouteSearch::add_molecule(const std::string& smiles, int parent, double g_cost, int depth) {
  RouteNode n;
  n.id = static_cast<int>(nodes_.size());
  n.kind = NodeKind::Molecule;
  n.smiles = smiles;
  n.g_cost = g_cost;
  n.depth = depth;
  n.in_blocks = blocks_.contains_canonical(smiles);
  if (parent >= 0) n.parents.push_back(parent);
  nodes_.push_back(std::move(n));
  graphs_.push_back(parse_smiles(smiles));
  by_smiles_[smiles] = nodes_.back().id;
  return nodes_.back().id;
}

std::vector<int> RouteSearch::ancestors(int id) const {
  std::vector<int> out;
  std::vector<bool> seen(nodes_.size(), false);
  std::vector<int> stack{id};
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    if (seen[static_cast<std::size_t>(v)]) continue;
    seen[static_cast<std::size_t>(v)] = true;
    if (nodes_[static_cast<std::size_t>(v)].kind == NodeKind::Molecule) out.push_back(v);
    for (int p : nodes_[static_cast<std::size_t>(v)].parents) stack.push_back(p);
  }
  return out;
}

std::vector<int> RouteSearch::expand_node(int id, std::optional<int> reaction_type, int topk) {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) throw std::out_of_range("unknown node");
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.kind != NodeKind::Molecule) throw std::out_of_range("node is a reaction node");
  if (n.expanded) throw AlreadyExpanded("node " + std::to_string(id) + " is already expanded");
  if (n.in_blocks) throw AlreadyExpanded("node " + std::to_string(id) + " is a building block");
  if (topk <= 0) topk = limits_.topk_per_expand;

  const auto key = std::make_tuple(n.smiles, reaction_type.value_or(-1), topk);
  auto hit = cache_.find(key);
  if (hit == cache_.end()) {
    std::vector<Candidate> cands;
    try {
      cands = expander_(graphs_[static_cast<std::size_t>(id)], reaction_type, topk);
    } catch (const EmptyBeamError&) {
    }
    hit = cache_.emplace(key, std::move(cands)).first;
  }
  nodes_[static_cast<std::size_t>(id)].expanded = true;
  ++expansions_;

  std::set<std::string> forbidden;
  for (int a : ancestors(id)) forbidden.insert(nodes_[static_cast<std::size_t>(a)].smiles);

  std::vector<int> created;
  for (const auto& cand : hit->second) {
    std::vector<std::string> reactants = cand.reactant_smiles;
    reactants.erase(std::unique(reactants.begin(), reactants.end()), reactants.end());
    // A step that needs one of its own descendants' products is a cycle.
    if (std::any_of(reactants.begin(), reactants.end(), [&](const std::string& s) { return forbidden.count(s); })) {
      continue;
    }
    const auto& parent = nodes_[static_cast<std::size_t>(id)];
    RouteNode r;
    r.id = static_cast<int>(nodes_.size());
    r.kind = NodeKind::Reaction;
    r.candidate = cand;
    r.g_cost = parent.g_cost + cand.trace.total();
    r.depth = parent.depth;
    r.parents.push_back(id);
    const int rid = r.id;
    const double g = r.g_cost;
    const int depth = parent.depth + 1;
    nodes_.push_back(std::move(r));
    graphs_.emplace_back();
    nodes_[static_cast<std::size_t>(id)].children.push_back(rid);
    created.push_back(rid);
    for (const auto& s : reactants) {
      int child;
      auto it = by_smiles_.find(s);
      if (it == by_smiles_.end()) {
        child = add_molecule(s, rid, g, depth);
        created.push_back(child);
      } else {
        child = it->second;
        nodes_[static_cast<std::size_t>(child)].parents.push_back(rid);
      }
      nodes_[static_cast<std::size_t>(rid)].children.push_back(child);
    }
  }
  refresh();
  return created;
}

void RouteSearch::refresh() {
  const std::size_t count = nodes_.size();
  // Post-order over the DAG from the root.
  std::vector<int> order;
  std::vector<char> state(count, 0);
  std::vector<std::pair<int, std::size_t>> stack{{root(), 0}};
  state[0] = 1;
  while (!stack.empty()) {
    auto& [v, next] = stack.back();
    const auto& kids = nodes_[static_cast<std::size_t>(v)].children;
    if (next < kids.size()) {
      const int c = kids[next++];
      if (!state[static_cast<std::size_t>(c)]) {
        state[static_cast<std::size_t>(c)] = 1;
        stack.emplace_back(c, 0);
      }
    } else {
      order.push_back(v);
      stack.pop_back();
    }
  }

  // Top-down: cheapest path cost and depth.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& n = nodes_[static_cast<std::size_t>(*it)];
    if (n.id == root()) continue;
    if (n.kind == NodeKind::Reaction) {
      const auto& p = nodes_[static_cast<std::size_t>(n.parents.front())];
      n.g_cost = p.g_cost + n.candidate->trace.total();
      n.depth = p.depth;
    } else {
      n.g_cost = kInf;
      n.depth = std::numeric_limits<int>::max();
      for (int r : n.parents) {
        n.g_cost = std::min(n.g_cost, nodes_[static_cast<std::size_t>(r)].g_cost);
        n.depth = std::min(n.depth, nodes_[static_cast<std::size_t>(r)].depth + 1);
      }
    }
  }

  // Bottom-up: status, cheapest partial cost (rn) and cheapest solved cost.
  rn_.assign(count, kInf);
  solved_rn_.assign(count, kInf);
  for (int v : order) {
    auto& n = nodes_[static_cast<std::size_t>(v)];
    const auto i = static_cast<std::size_t>(v);
    if (n.kind == NodeKind::Reaction) {
      bool dead = false, solved = true;
      double rn = n.candidate->trace.total(), srn = rn;
      for (int c : n.children) {
        const auto& m = nodes_[static_cast<std::size_t>(c)];
        dead = dead || m.status == NodeStatus::Dead;
        solved = solved && m.status == NodeStatus::Solved;
        rn += rn_[static_cast<std::size_t>(c)];
        srn += solved_rn_[static_cast<std::size_t>(c)];
      }
      n.status = dead ? NodeStatus::Dead : solved ? NodeStatus::Solved : NodeStatus::Open;
      rn_[i] = dead ? kInf : rn;
      solved_rn_[i] = solved ? srn : kInf;
      continue;
    }
    if (n.in_blocks) {
      n.status = NodeStatus::Solved;
      rn_[i] = solved_rn_[i] = 0.0;
    } else if (n.expanded) {
      bool any_solved = false, all_dead = true;
      for (int r : n.children) {
        const auto& c = nodes_[static_cast<std::size_t>(r)];
        any_solved = any_solved || c.status == NodeStatus::Solved;
        all_dead = all_dead && c.status == NodeStatus::Dead;
        rn_[i] = std::min(rn_[i], rn_[static_cast<std::size_t>(r)]);
        solved_rn_[i] = std::min(solved_rn_[i], solved_rn_[static_cast<std::size_t>(r)]);
      }
      n.status = any_solved ? NodeStatus::Solved : all_dead ? NodeStatus::Dead : NodeStatus::Expanded;
    } else if (n.depth >= limits_.max_depth) {
      n.status = NodeStatus::Dead;
    } else {
      n.status = NodeStatus::Open;
      rn_[i] = value_ ? std::max(0.0, value_(n.smiles)) : 0.0;
    }
  }

  // Top-down: cost of the cheapest partial route through each node.
  prio_.assign(count, kInf);
  prio_[0] = rn_[0];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto i = static_cast<std::size_t>(*it);
    const auto& n = nodes_[i];
    if (n.id == root()) continue;
    double best = kInf;
    for (int p : n.parents) {
      const auto pi = static_cast<std::size_t>(p);
      if (n.kind == NodeKind::Reaction) {
        if (std::isfinite(prio_[pi]) && std::isfinite(rn_[i])) best = std::min(best, prio_[pi] - rn_[pi] + rn_[i]);
      } else {
        best = std::min(best, prio_[pi]);
      }
    }
    prio_[i] = best;
  }
}

double RouteSearch::priority(int id) const { return prio_.at(static_cast<std::size_t>(id)); }

double RouteSearch::best_cost() const { return solved_rn_.at(0); }

std::optional<int> RouteSearch::select() const {
  std::optional<int> best;
  for (const auto& n : nodes_) {
    if (n.kind != NodeKind::Molecule || n.status != NodeStatus::Open) continue;
    const double p = prio_[static_cast<std::size_t>(n.id)];
    if (!std::isfinite(p)) continue;
    if (!best || p < prio_[static_cast<std::size_t>(*best)]) best = n.id;
  }
  return best;
}

std::vector<Route> RouteSearch::run() {
  while (true) {
    const auto next = select();
    if (!next) break;
    if (solved() && best_cost() <= priority(*next) &&
        routes(limits_.max_routes).size() >= static_cast<std::size_t>(limits_.max_routes)) {
      break;
    }
    if (expansions_ >= limits_.max_expansions) break;
    pops_.push_back(priority(*next));
    expand_node(*next);
  }
  return routes(limits_.max_routes);
}

std::vector<Route> RouteSearch::routes(int max) const {
  if (max <= 0) return {};
  std::map<int, std::vector<Route>> memo;
  const auto by_cost = [](const Route& a, const Route& b) { return a.cost < b.cost; };
  std::function<const std::vector<Route>&(int)> of_molecule = [&](int id) -> const std::vector<Route>& {
    auto it = memo.find(id);
    if (it != memo.end()) return it->second;
    std::vector<Route> out;
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.in_blocks) {
      out.push_back(Route{});
    } else if (n.status == NodeStatus::Solved) {
      for (int rid : n.children) {
        const auto& r = nodes_[static_cast<std::size_t>(rid)];
        if (r.status != NodeStatus::Solved) continue;
        RouteStep step;
        step.product = n.smiles;
        step.reactants = r.candidate->reactant_smiles;
        step.leaving_group = r.candidate->leaving_group;
        step.trace = r.candidate->trace;
        std::vector<Route> partial{Route{step.trace.total(), {step}}};
        for (int c : r.children) {
          const auto& sub = of_molecule(c);
          std::vector<Route> next;
          for (const auto& a : partial) {
            for (const auto& b : sub) {
              Route m = a;
              m.cost += b.cost;
              for (auto s : b.steps) {
                s.depth += 1;
                m.steps.push_back(std::move(s));
              }
              next.push_back(std::move(m));
            }
          }
          std::stable_sort(next.begin(), next.end(), by_cost);
          if (next.size() > static_cast<std::size_t>(max)) next.resize(static_cast<std::size_t>(max));
          partial = std::move(next);
        }
        out.insert(out.end(), partial.begin(), partial.end());
      }
      std::stable_sort(out.begin(), out.end(), by_cost);
      if (out.size() > static_cast<std::size_t>(max)) out.resize(static_cast<std::size_t>(max));
    }
    return memo.emplace(id, std::move(out)).first->second;
  };
  return of_molecule(root());
}

nlohmann::json trace_json(const EnergyTrace& t) {
  nlohmann::json actions = nlohmann::json::object();
  for (int a = 0; a < kNumActions; ++a) actions[action_name(static_cast<Action>(a))] = t.action[static_cast<std::size_t>(a)];
  const auto p = t.profile();
  return {{"total", t.total()},
          {"deltas", {t.delta(1), t.delta(2), t.delta(3), t.delta(4)}},
          {"actions", actions},
          {"profile", std::vector<double>(p.begin(), p.end())}};
}

nlohmann::json route_json(const Route& r) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : r.steps) {
    steps.push_back({{"product", s.product},
                     {"reactants", s.reactants},
                     {"leaving_group", s.leaving_group},
                     {"depth", s.depth},
                     {"energy", trace_json(s.trace)}});
  }
  return {{"cost", r.cost}, {"steps", steps}};
}

nlohmann::json RouteSearch::node_json(int id) const {
  const auto& n = node(id);
  nlohmann::json j = {{"id", n.id},
                      {"kind", n.kind == NodeKind::Molecule ? "molecule" : "reaction"},
                      {"status", status_name(n.status)},
                      {"g_cost", finite_or_null(n.g_cost)},
                      {"priority", finite_or_null(prio_[static_cast<std::size_t>(n.id)])},
                      {"parents", n.parents},
                      {"children", n.children}};
  if (n.kind == NodeKind::Molecule) {
    j["smiles"] = n.smiles;
    j["depth"] = n.depth;
    j["in_blocks"] = n.in_blocks;
    j["expanded"] = n.expanded;
  } else {
    j["energy"] = trace_json(n.candidate->trace);
    j["leaving_group"] = n.candidate->leaving_group;
    j["reactants"] = n.candidate->reactant_smiles;
  }
  return j;
}

nlohmann::json RouteSearch::snapshot() const {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : nodes_) nodes.push_back(node_json(n.id));
  nlohmann::json routes_j = nlohmann::json::array();
  for (const auto& r : routes(limits_.max_routes)) routes_j.push_back(route_json(r));
  return {{"version", kSnapshotVersion},
          {"target", nodes_.front().smiles},
          {"root", root()},
          {"solved", solved()},
          {"best_cost", finite_or_null(best_cost())},
          {"expansions", expansions_},
          {"limits",
           {{"max_expansions", limits_.max_expansions},
            {"max_depth", limits_.max_depth},
            {"topk_per_expand", limits_.topk_per_expand},
            {"max_routes", limits_.max_routes}}},
          {"nodes", nodes},
          {"routes", routes_j}};
}

std::string RouteSearch::text_tree(int max_routes) const {
  std::ostringstream out;
  out.precision(6);
  const auto rs = routes(max_routes);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    out << "route " << i + 1 << "  cost " << rs[i].cost << '\n';
    for (const auto& s : rs[i].steps) {
      const std::string indent(static_cast<std::size_t>(2 * s.depth + 2), ' ');
      out << indent << s.product << "  <=  ";
      for (std::size_t j = 0; j < s.reactants.size(); ++j) out << (j ? " + " : "") << s.reactants[j];
      out << "  E=" << s.trace.total() << " (";
      for (int d = 1; d <= 4; ++d) out << (d > 1 ? " " : "") << s.trace.delta(d);
      out << ")";
      if (!s.leaving_group.empty()) out << "  lg " << s.leaving_group;
      out << '\n';
      for (const auto& r : s.reactants)
        if (blocks_.contains_canonical(r)) out << indent << "  " << r << "  [block]\n";
    }
  }
  return out.str();
}

std::vector<Route> plan(const MolGraph& target, const BuildingBlockSet& blocks, Expander expander,
                        const PlanLimits& limits, ValueFn value) {
  RouteSearch search(target, blocks, std::move(expander), limits, std::move(value));
  auto routes = search.run();
  if (routes.empty()) {
    std::size_t frontier = 0;
    for (std::size_t i = 0; i < search.size(); ++i)
      frontier += search.node(static_cast<int>(i)).status == NodeStatus::Open ? 1 : 0;
    throw NoRouteFound("no route within " + std::to_string(search.expansions()) + " expansions",
                       static_cast<std::size_t>(search.expansions()), frontier);
  }
  return routes;
}

}  // namespace retrograph
