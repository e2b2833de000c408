#include "retrograph/molgraph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <utility>

#include "retrograph/elements.hpp"
#include "retrograph/error.hpp"

namespace retrograph {
namespace {

bool is_aromatic_order(double order) { return std::abs(order - kAromaticOrder) < 1e-9; }

int order_code(double order) { return static_cast<int>(std::lround(order * 2.0)); }

// Marks bonds that lie on a cycle (non-bridges).
std::vector<std::vector<bool>> ring_bonds(int n, const std::vector<std::vector<int>>& adj) {
  std::vector<std::vector<bool>> in_ring(static_cast<std::size_t>(n),
                                         std::vector<bool>(static_cast<std::size_t>(n), false));
  std::vector<int> disc(static_cast<std::size_t>(n), -1);
  std::vector<int> low(static_cast<std::size_t>(n), 0);
  std::set<std::pair<int, int>> bridges;
  int timer = 0;
  std::function<void(int, int)> dfs = [&](int v, int parent) {
    disc[v] = low[v] = timer++;
    for (int w : adj[v]) {
      if (w == parent) continue;
      if (disc[w] >= 0) {
        low[v] = std::min(low[v], disc[w]);
      } else {
        dfs(w, v);
        low[v] = std::min(low[v], low[w]);
        if (low[w] > disc[v]) bridges.emplace(std::min(v, w), std::max(v, w));
      }
    }
  };
  for (int v = 0; v < n; ++v) {
    if (disc[v] < 0) dfs(v, -1);
  }
  for (int v = 0; v < n; ++v) {
    for (int w : adj[v]) {
      if (!bridges.count({std::min(v, w), std::max(v, w)})) in_ring[v][w] = true;
    }
  }
  return in_ring;
}

}  // namespace

// ---------------------------------------------------------------------------
// Valence rules

bool valence_fits(int z, int charge, bool aromatic, int bond_valence, int aromatic_bonds,
                  int hydrogens) {
  if (z == kWildcard || base_valences(z).empty()) return true;
  const int used = bond_valence + hydrogens;
  for (int allowed : allowed_valences(z, charge)) {
    if (aromatic && aromatic_bonds > 0) {
      // One valence unit may be tied up in the delocalized system.
      if (used <= allowed && used >= allowed - 1) return true;
    } else if (used == allowed) {
      return true;
    }
  }
  return false;
}

int implicit_hydrogens(int z, bool aromatic, int bond_valence, int aromatic_bonds) {
  if (z == kWildcard || !in_organic_subset(z)) return 0;
  for (int allowed : base_valences(z)) {
    if (allowed < bond_valence) continue;
    if (aromatic && aromatic_bonds > 0) return std::max(0, allowed - 1 - bond_valence);
    return allowed - bond_valence;
  }
  return -1;
}

int implicit_hydrogens(const MolGraph& g, int v) {
  const auto& a = g.atom(v);
  return implicit_hydrogens(a.atomic_number, a.aromatic, g.valence_from_bonds(v),
                            g.aromatic_bond_count(v));
}

// ---------------------------------------------------------------------------
// MolGraph

MolGraph::MolGraph(std::vector<AtomRecord> atoms, std::vector<Bond> bonds)
    : atoms_(std::move(atoms)), bonds_(std::move(bonds)) {
  derive();
}

void MolGraph::derive() {
  const int n = size();
  adjacency_.assign(static_cast<std::size_t>(n), {});
  bond_order_ = Eigen::MatrixXd::Zero(n, n);
  for (const auto& b : bonds_) {
    if (b.u < 0 || b.v < 0 || b.u >= n || b.v >= n || b.u == b.v) {
      throw Error("bond references invalid atom pair");
    }
    if (bond_order_(b.u, b.v) != 0.0) throw Error("duplicate bond");
    if (!(b.order > 0.0)) throw Error("bond order must be positive");
    bond_order_(b.u, b.v) = bond_order_(b.v, b.u) = b.order;
    adjacency_[b.u].push_back(b.v);
    adjacency_[b.v].push_back(b.u);
  }
  for (auto& nb : adjacency_) std::sort(nb.begin(), nb.end());

  const auto in_ring = ring_bonds(n, adjacency_);
  for (auto& m : senses_) m = IntMatrix::Zero(n, n);
  auto has_pi = [&](int v, int except) {
    for (int w : adjacency_[v]) {
      if (w != except && bond_order_(v, w) > 1.0) return true;
    }
    return false;
  };
  for (const auto& b : bonds_) {
    const double o = b.order;
    const bool pi = o > 1.0;
    bool conj = false;
    if (is_aromatic_order(o)) {
      conj = true;
    } else if (pi) {
      conj = has_pi(b.u, b.v) || has_pi(b.v, b.u);
    } else {
      conj = has_pi(b.u, b.v) && has_pi(b.v, b.u);
    }
    const std::array<bool, kNumSenses> flags = {
        true, pi, o > 2.5, is_aromatic_order(o), conj,
        static_cast<bool>(in_ring[b.u][b.v])};
    for (int s = 0; s < kNumSenses; ++s) {
      if (flags[s]) senses_[s](b.u, b.v) = senses_[s](b.v, b.u) = 1;
    }
  }
  atom_in_ring_.assign(static_cast<std::size_t>(n), false);
  for (int v = 0; v < n; ++v) {
    for (int w : adjacency_[v]) {
      if (in_ring[v][w]) atom_in_ring_[v] = true;
    }
  }
  topo_dist_ = topo_distances(*this);
}

int MolGraph::valence_from_bonds(int v) const {
  int total = 0;
  for (int w : neighbors(v)) {
    const double o = bond_order_(v, w);
    total += is_aromatic_order(o) ? 1 : static_cast<int>(std::lround(o));
  }
  return total;
}

int MolGraph::aromatic_bond_count(int v) const {
  int count = 0;
  for (int w : neighbors(v)) {
    if (is_aromatic_order(bond_order_(v, w))) ++count;
  }
  return count;
}

bool MolGraph::valence_ok(int v) const {
  const auto& a = atom(v);
  if (a.total_h() < 0) return false;
  return valence_fits(a.atomic_number, a.formal_charge, a.aromatic, valence_from_bonds(v),
                      aromatic_bond_count(v), a.total_h());
}

bool MolGraph::all_valences_ok() const {
  for (int v = 0; v < size(); ++v) {
    if (!valence_ok(v)) return false;
  }
  return true;
}

std::vector<std::vector<int>> MolGraph::components() const {
  std::vector<int> comp(static_cast<std::size_t>(size()), -1);
  std::vector<std::vector<int>> out;
  for (int s = 0; s < size(); ++s) {
    if (comp[s] >= 0) continue;
    out.emplace_back();
    std::deque<int> queue{s};
    comp[s] = static_cast<int>(out.size()) - 1;
    while (!queue.empty()) {
      const int v = queue.front();
      queue.pop_front();
      out.back().push_back(v);
      for (int w : neighbors(v)) {
        if (comp[w] < 0) {
          comp[w] = comp[s];
          queue.push_back(w);
        }
      }
    }
    std::sort(out.back().begin(), out.back().end());
  }
  return out;
}

MolGraph MolGraph::subgraph(const std::vector<int>& keep) const {
  std::vector<int> remap(static_cast<std::size_t>(size()), -1);
  std::vector<AtomRecord> atoms;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    remap[keep[i]] = static_cast<int>(i);
    atoms.push_back(atom(keep[i]));
  }
  std::vector<Bond> bonds;
  for (const auto& b : bonds_) {
    if (remap[b.u] >= 0 && remap[b.v] >= 0) bonds.push_back({remap[b.u], remap[b.v], b.order});
  }
  return MolGraph(std::move(atoms), std::move(bonds));
}

MolGraph MolGraph::without_maps() const {
  auto atoms = atoms_;
  for (auto& a : atoms) a.atom_map = 0;
  return MolGraph(std::move(atoms), bonds_);
}

int MolGraph::find_map(int atom_map) const {
  for (int v = 0; v < size(); ++v) {
    if (atoms_[v].atom_map == atom_map) return v;
  }
  return -1;
}

// ---------------------------------------------------------------------------
// Structural matrices

std::vector<std::vector<IntMatrix>> walk_counts(const MolGraph& g, int max_hop) {
  std::vector<std::vector<IntMatrix>> out;
  if (max_hop <= 0) return out;
  out.resize(kNumSenses);
  for (int s = 0; s < kNumSenses; ++s) {
    const IntMatrix& a = g.sense_matrix(static_cast<BondSense>(s));
    out[s].push_back(a);
    for (int j = 2; j <= max_hop; ++j) out[s].push_back(out[s].back() * a);
  }
  return out;
}

std::vector<std::vector<IntMatrix>> adjacency_powers(const MolGraph& g, int max_hop) {
  auto counts = walk_counts(g, max_hop);
  for (auto& per_sense : counts) {
    for (auto& m : per_sense) m = m.cwiseMin(kCountClip);
  }
  return counts;
}

IntMatrix topo_distances(const MolGraph& g) {
  const int n = g.size();
  IntMatrix dist = IntMatrix::Constant(n, n, kDistInf);
  for (int s = 0; s < n; ++s) {
    dist(s, s) = 0;
    std::deque<int> queue{s};
    while (!queue.empty()) {
      const int v = queue.front();
      queue.pop_front();
      for (int w : g.neighbors(v)) {
        if (dist(s, w) == kDistInf && w != s) {
          dist(s, w) = dist(s, v) + 1;
          queue.push_back(w);
        }
      }
    }
  }
  return dist;
}

DistanceProvider topological_distance_provider() {
  return [](const MolGraph& g) { return Eigen::MatrixXd(g.topo_dist().cast<double>()); };
}

// ---------------------------------------------------------------------------
// Canonical ranking

namespace {

std::vector<int> dense_rank(const std::vector<std::vector<long>>& keys) {
  std::vector<int> idx(keys.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return keys[a] < keys[b]; });
  std::vector<int> rank(keys.size(), 0);
  int r = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (i > 0 && keys[idx[i]] != keys[idx[i - 1]]) ++r;
    rank[idx[i]] = r;
  }
  return rank;
}

int class_count(const std::vector<int>& rank) {
  return rank.empty() ? 0 : *std::max_element(rank.begin(), rank.end()) + 1;
}

std::vector<int> refine(const MolGraph& g, std::vector<int> rank) {
  for (;;) {
    std::vector<std::vector<long>> keys(rank.size());
    for (int v = 0; v < g.size(); ++v) {
      std::vector<std::pair<long, long>> nb;
      for (int w : g.neighbors(v)) nb.emplace_back(rank[w], order_code(g.bond_order(v, w)));
      std::sort(nb.begin(), nb.end());
      keys[v].push_back(rank[v]);
      for (auto [r, o] : nb) {
        keys[v].push_back(r);
        keys[v].push_back(o);
      }
    }
    auto next = dense_rank(keys);
    const bool stable = class_count(next) == class_count(rank);
    rank = std::move(next);
    if (stable) return rank;
  }
}

}  // namespace

std::vector<int> canonical_ranks(const MolGraph& g, bool use_maps) {
  const int n = g.size();
  std::vector<std::vector<long>> keys(static_cast<std::size_t>(n));
  for (int v = 0; v < n; ++v) {
    const auto& a = g.atom(v);
    keys[v] = {a.is_wildcard() ? 0L : 1L,
               a.atomic_number,
               g.heavy_degree(v),
               a.formal_charge,
               a.isotope,
               a.total_h(),
               a.aromatic ? 1L : 0L,
               g.atom_in_ring(v) ? 1L : 0L,
               use_maps ? a.atom_map : 0L};
  }
  auto rank = refine(g, dense_rank(keys));
  while (class_count(rank) < n) {
    // Break the lowest tie by individualizing its first member.
    std::vector<int> count(static_cast<std::size_t>(n), 0);
    for (int r : rank) ++count[r];
    int tied = 0;
    while (count[tied] < 2) ++tied;
    int pick = -1;
    std::vector<std::vector<long>> split(static_cast<std::size_t>(n));
    for (int v = 0; v < n; ++v) {
      long bump = 0;
      if (rank[v] == tied) {
        if (pick < 0) {
          pick = v;
        } else {
          bump = 1;
        }
      }
      split[v] = {rank[v], bump};
    }
    rank = refine(g, dense_rank(split));
  }
  return rank;
}

// ---------------------------------------------------------------------------
// Writer

namespace {

std::string atom_token(const MolGraph& g, int v, bool include_maps) {
  const auto& a = g.atom(v);
  const int map = include_maps ? a.atom_map : 0;
  if (a.is_wildcard() && map == 0 && a.isotope == 0 && a.formal_charge == 0 && a.total_h() == 0) {
    return "*";
  }
  const bool organic_ok = in_organic_subset(a.atomic_number) && a.formal_charge == 0 &&
                          a.isotope == 0 && map == 0 &&
                          (!a.aromatic || may_be_aromatic(a.atomic_number)) &&
                          implicit_hydrogens(g, v) == a.total_h();
  std::string sym(element_symbol(a.atomic_number));
  if (a.aromatic) sym[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(sym[0])));
  if (organic_ok) return sym;
  std::string out = "[";
  if (a.isotope > 0) out += std::to_string(a.isotope);
  out += sym;
  if (a.total_h() == 1) out += "H";
  if (a.total_h() > 1) out += "H" + std::to_string(a.total_h());
  if (a.formal_charge != 0) {
    out += a.formal_charge > 0 ? "+" : "-";
    if (std::abs(a.formal_charge) > 1) out += std::to_string(std::abs(a.formal_charge));
  }
  if (map > 0) out += ":" + std::to_string(map);
  out += "]";
  return out;
}

std::string bond_token(const MolGraph& g, int u, int v) {
  const double o = g.bond_order(u, v);
  const bool both_aromatic = g.atom(u).aromatic && g.atom(v).aromatic;
  if (is_aromatic_order(o)) return both_aromatic && g.bond_in_ring(u, v) ? "" : ":";
  if (o > 2.5) return "#";
  if (o > 1.5) return "=";
  return both_aromatic ? "-" : "";
}

std::string ring_label(int digit) {
  return digit < 10 ? std::to_string(digit) : "%" + std::to_string(digit);
}

struct ComponentWriter {
  const MolGraph& g;
  const std::vector<int>& rank;
  bool include_maps;

  std::vector<int> parent;
  std::vector<bool> visited;
  std::vector<std::vector<int>> children;
  std::vector<std::pair<int, int>> closures;  // (opening atom, closing atom)
  std::vector<int> order;

  void dfs(int v, int from) {
    visited[v] = true;
    parent[v] = from;
    order.push_back(v);
    auto nb = g.neighbors(v);
    std::sort(nb.begin(), nb.end(), [&](int a, int b) { return rank[a] < rank[b]; });
    for (int w : nb) {
      if (w == from) continue;
      if (visited[w]) {
        // w is an ancestor; record once, from the descendant side.
        if (std::find(closures.begin(), closures.end(), std::make_pair(v, w)) == closures.end()) {
          closures.emplace_back(w, v);
        }
        continue;
      }
      children[v].push_back(w);
      dfs(w, v);
    }
  }

  std::string emit(int start) {
    dfs(start, -1);
    std::vector<int> position(static_cast<std::size_t>(g.size()), -1);
    for (std::size_t i = 0; i < order.size(); ++i) position[order[i]] = static_cast<int>(i);
    std::map<std::pair<int, int>, int> digit_of;
    std::set<int> free_digits;
    for (int d = 1; d < 100; ++d) free_digits.insert(d);
    std::string out;
    std::function<void(int)> write = [&](int v) {
      out += atom_token(g, v, include_maps);
      std::vector<std::pair<int, int>> closing, opening;
      for (auto [a, b] : closures) {
        if (b == v) closing.emplace_back(a, b);
        if (a == v) opening.emplace_back(a, b);
      }
      std::sort(closing.begin(), closing.end(), [&](auto x, auto y) {
        return digit_of[x] < digit_of[y];
      });
      std::sort(opening.begin(), opening.end(), [&](auto x, auto y) {
        return position[x.second] < position[y.second];
      });
      std::vector<int> released;
      for (const auto& e : closing) {
        const int d = digit_of[e];
        out += ring_label(d);
        released.push_back(d);
      }
      for (const auto& e : opening) {
        const int d = *free_digits.begin();
        free_digits.erase(free_digits.begin());
        digit_of[e] = d;
        out += bond_token(g, e.first, e.second) + ring_label(d);
      }
      for (int d : released) free_digits.insert(d);
      const auto& kids = children[v];
      for (std::size_t i = 0; i < kids.size(); ++i) {
        const bool branch = i + 1 < kids.size();
        if (branch) out += "(";
        out += bond_token(g, v, kids[i]);
        write(kids[i]);
        if (branch) out += ")";
      }
    };
    write(start);
    return out;
  }
};

}  // namespace

SmilesOutput write_smiles_ordered(const MolGraph& g, const WriteOptions& opts) {
  const auto rank = canonical_ranks(g, opts.include_maps);
  std::vector<std::pair<std::string, std::vector<int>>> parts;
  for (const auto& comp : g.components()) {
    int start = comp.front();
    for (int v : comp) {
      if (rank[v] < rank[start]) start = v;
    }
    ComponentWriter w{g, rank, opts.include_maps, std::vector<int>(g.size(), -1),
                      std::vector<bool>(g.size(), false),
                      std::vector<std::vector<int>>(g.size()), {}, {}};
    std::string text = w.emit(start);
    parts.emplace_back(std::move(text), std::move(w.order));
  }
  std::sort(parts.begin(), parts.end());
  SmilesOutput out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out.text += ".";
    out.text += parts[i].first;
    out.atom_order.insert(out.atom_order.end(), parts[i].second.begin(), parts[i].second.end());
  }
  return out;
}

std::string write_smiles(const MolGraph& g, const WriteOptions& opts) {
  return write_smiles_ordered(g, opts).text;
}

std::string canonical_smiles(const MolGraph& g) {
  return write_smiles(g, WriteOptions{.include_maps = false});
}

}  // namespace retrograph
