#include "retrograph/decision.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "retrograph/error.hpp"

namespace retrograph {

const char* action_name(Action a) {
  switch (a) {
    case Action::LgMatching: return "lg_matching";
    case Action::Initializing: return "initializing";
    case Action::LgConnecting: return "lg_connecting";
    case Action::BondChanging: return "bond_changing";
    case Action::HydrogenChanging: return "hydrogen_changing";
  }
  return "?";
}

double EnergyTrace::total() const {
  double t = 0.0;
  for (double e : action) t += e;
  return t;
}

std::array<double, kNumActions> EnergyTrace::profile() const {
  std::array<double, kNumActions> p{};
  double t = 0.0;
  for (std::size_t i = 0; i < action.size(); ++i) p[i] = t += action[i];
  return p;
}

double EnergyTrace::delta(int i) const {
  static constexpr std::array<Action, 4> kDeltaActions = {Action::LgMatching, Action::LgConnecting,
                                                          Action::BondChanging, Action::HydrogenChanging};
  if (i < 1 || i > 4) throw std::out_of_range("energy delta index must be 1..4");
  return action[static_cast<std::size_t>(kDeltaActions[static_cast<std::size_t>(i - 1)])];
}

void BeamConfig::validate() const {
  if (n_lg < 1 || n_conn < 1 || n_bond < 1 || k_out < 1) throw ConfigError("beam sizes must be >= 1");
}

std::string Candidate::key() const {
  std::string k;
  for (const auto& s : reactant_smiles) {
    if (!k.empty()) k += '.';
    k += s;
  }
  return k;
}

MolGraph ensure_mapped(const MolGraph& product) {
  int next = 0;
  bool complete = true;
  for (const auto& a : product.atoms()) {
    next = std::max(next, a.atom_map);
    complete = complete && a.atom_map > 0;
  }
  if (complete) return product;
  std::vector<AtomRecord> atoms = product.atoms();
  for (auto& a : atoms)
    if (a.atom_map == 0) a.atom_map = ++next;
  return MolGraph(std::move(atoms), product.bonds());
}

namespace {

constexpr std::size_t kHydrogenVariantCap = 48;
constexpr std::size_t kKindComboCap = 27;

// -ln sigmoid(x), stable for large |x|.
double neg_log_sigmoid(double x) { return x >= 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x)); }

}  // namespace

std::vector<BondSet> ranked_bond_sets(const ProductScores& s, int cap) {
  const std::size_t m = s.bonds.size();
  std::vector<bool> seed(m);
  for (std::size_t i = 0; i < m; ++i) seed[i] = s.bond_logits(s.bonds[i].first, s.bonds[i].second) >= 0.0;
  const auto make = [&](std::size_t flip) {
    BondSet b;
    for (std::size_t i = 0; i < m; ++i) {
      const bool on = seed[i] != (i == flip);
      const double x = s.bond_logits(s.bonds[i].first, s.bonds[i].second);
      b.energy += on ? neg_log_sigmoid(x) : neg_log_sigmoid(-x);
      if (on) b.pairs.push_back(s.bonds[i]);
    }
    return b;
  };
  std::vector<BondSet> out;
  out.push_back(make(m));
  for (std::size_t i = 0; i < m; ++i) out.push_back(make(i));
  std::stable_sort(out.begin(), out.end(), [](const BondSet& a, const BondSet& b) { return a.energy < b.energy; });
  if (out.size() > static_cast<std::size_t>(cap)) out.resize(static_cast<std::size_t>(cap));
  return out;
}

// Built gate by gate, keeping the cap at every stage.
std::vector<GateAssignment> ranked_gate_assignments(const Eigen::MatrixXd& logits, int cap) {
  std::vector<GateAssignment> partial{{}};
  for (Eigen::Index g = 0; g < logits.rows(); ++g) {
    std::vector<GateAssignment> next;
    for (const auto& a : partial) {
      for (int v = 0; v < logits.cols(); ++v) {
        if (std::find(a.targets.begin(), a.targets.end(), v) != a.targets.end()) continue;
        GateAssignment b = a;
        b.targets.push_back(v);
        b.energy += neg_log_sigmoid(logits(g, v));
        next.push_back(std::move(b));
      }
    }
    std::stable_sort(next.begin(), next.end(),
                     [](const GateAssignment& a, const GateAssignment& b) { return a.energy < b.energy; });
    if (next.size() > static_cast<std::size_t>(cap)) next.resize(static_cast<std::size_t>(cap));
    partial = std::move(next);
  }
  return partial;
}

std::vector<HydrogenVariant> ranked_hydrogen_variants(const Eigen::MatrixXd& logp, const std::vector<int>& touched,
                                                      std::size_t cap) {
  const int classes = static_cast<int>(logp.cols());
  HydrogenVariant base;
  for (Eigen::Index v = 0; v < logp.rows(); ++v) {
    Eigen::Index arg = 0;
    logp.row(v).maxCoeff(&arg);
    base.cls.push_back(static_cast<int>(arg));
    base.energy -= logp(v, arg);
  }
  const auto shifted = [&](const HydrogenVariant& from, int v, int d) -> std::optional<HydrogenVariant> {
    const auto i = static_cast<std::size_t>(v);
    const int c = from.cls[i] + d;
    if (c < 0 || c >= classes) return std::nullopt;
    HydrogenVariant h = from;
    h.energy += logp(v, from.cls[i]) - logp(v, c);
    h.cls[i] = c;
    return h;
  };
  std::vector<HydrogenVariant> out{base};
  for (int v = 0; v < logp.rows(); ++v)
    for (int d : {-1, 1})
      if (auto h = shifted(base, v, d)) out.push_back(std::move(*h));
  for (std::size_t i = 0; i < touched.size(); ++i)
    for (std::size_t j = i + 1; j < touched.size(); ++j)
      for (int di : {-1, 1})
        for (int dj : {-1, 1})
          if (auto h = shifted(base, touched[i], di))
            if (auto h2 = shifted(*h, touched[j], dj)) out.push_back(std::move(*h2));
  std::stable_sort(out.begin() + 1, out.end(),
                   [](const HydrogenVariant& a, const HydrogenVariant& b) { return a.energy < b.energy; });
  if (out.size() > cap) out.resize(cap);
  return out;
}

std::vector<int> ranked_leaving_groups(const ProductScores& s, const LeavingGroupVocab& vocab) {
  std::vector<int> order;
  for (int id = 0; id < vocab.size(); ++id) {
    const auto i = static_cast<std::size_t>(id);
    if (id == 0 || (vocab.entry(id).gate_count() > 0 && i < s.conn_logits.size() && s.conn_logits[i].size() > 0)) {
      order.push_back(id);
    }
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s.lg_logp(0, a) > s.lg_logp(0, b); });
  return order;
}

namespace {

// Reactant-side orders for a changed bond, preferred first: delete, then
// one order lower, then one higher. Aromatic bonds can only be deleted.
std::vector<double> order_options(double order) {
  std::vector<double> out{0.0};
  if (order != std::floor(order)) return out;
  if (order >= 2.0) out.push_back(order - 1.0);
  if (order <= 2.0) out.push_back(order + 1.0);
  return out;
}

// Cartesian product of per-bond options in lexicographic preference order.
std::vector<std::vector<double>> kind_combos(const MolGraph& g, const std::vector<std::pair<int, int>>& pairs) {
  std::vector<std::vector<double>> out{{}};
  for (const auto& [u, v] : pairs) {
    const auto opts = order_options(g.bond_order(u, v));
    std::vector<std::vector<double>> next;
    for (const auto& prefix : out) {
      for (double o : opts) {
        if (next.size() >= kKindComboCap) break;
        auto c = prefix;
        c.push_back(o);
        next.push_back(std::move(c));
      }
    }
    out = std::move(next);
  }
  return out;
}

int valence_units(double order) { return order == kAromaticOrder ? 1 : static_cast<int>(std::lround(order)); }

// Bond valence and aromatic-bond count of each product atom after the gate
// bonds and bond-order edits, mirroring the merged-graph legality check.
struct ProductValence {
  std::vector<int> bonds, aromatic;
};

ProductValence product_valence(const MolGraph& g, const MolGraph* lg, const std::vector<int>& targets,
                               const std::vector<std::pair<int, int>>& pairs, const std::vector<double>& orders) {
  ProductValence pv;
  for (int v = 0; v < g.size(); ++v) {
    pv.bonds.push_back(g.valence_from_bonds(v));
    pv.aromatic.push_back(g.aromatic_bond_count(v));
  }
  const auto add = [&](int v, double order, int sign) {
    pv.bonds[static_cast<std::size_t>(v)] += sign * valence_units(order);
    if (order == kAromaticOrder) pv.aromatic[static_cast<std::size_t>(v)] += sign;
  };
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto [u, v] = pairs[i];
    const double old = g.bond_order(u, v);
    for (int a : {u, v}) {
      add(a, old, -1);
      if (orders[i] != 0.0) add(a, orders[i], 1);
    }
  }
  if (lg) {
    std::size_t gate = 0;
    for (int w = 0; w < lg->size() && gate < targets.size(); ++w) {
      if (!lg->atom(w).is_wildcard() || lg->heavy_degree(w) != 1) continue;
      add(targets[gate++], lg->bond_order(w, lg->neighbors(w).front()), 1);
    }
  }
  return pv;
}

bool product_atoms_fit(const MolGraph& g, const ProductValence& pv, const std::vector<int>& h_delta) {
  for (int v = 0; v < g.size(); ++v) {
    const auto i = static_cast<std::size_t>(v);
    const auto& a = g.atom(v);
    const int h = a.total_h() + h_delta[i];
    if (h < 0) return false;
    if (!valence_fits(a.atomic_number, a.formal_charge, pv.aromatic[i] > 0, pv.bonds[i], pv.aromatic[i], h)) return false;
  }
  return true;
}

}  // namespace

Predictor::Predictor(const Model& model) : model_(model) {
  const auto& c = model_.params.config;
  if (model_.vocab.size() > c.vocab_size) throw ConfigError("vocabulary larger than the model's LGM output");
  lgs_ = LeavingGroupFeatures::from_vocab(model_.vocab, c.k_r);
  ad::Tape tape;
  ParamSet ps(tape, model_.params, false);
  EncodeOptions eo;
  eo.prefix = encoder_prefix(c, Task::Lgc);
  lg_reps_.resize(lgs_.graphs.size());
  for (std::size_t id = 1; id < lgs_.graphs.size(); ++id) {
    if (lgs_.graphs[id].n > 0) lg_reps_[id] = encode(ps, lgs_.graphs[id], eo).node_reps.value();
  }
}

ProductScores Predictor::score(const MolGraph& product, std::optional<int> reaction_type) const {
  const auto& c = model_.params.config;
  if (product.empty()) throw FormatError("empty product");
  ad::Tape tape;
  ParamSet ps(tape, model_.params, false);
  const auto features = GraphFeatures::from_graph(product, c.k_r);
  std::map<std::string, EncodedGraph> enc;
  const auto encoded = [&](Task t) -> const EncodedGraph& {
    const auto p = encoder_prefix(c, t);
    auto it = enc.find(p);
    if (it == enc.end()) {
      EncodeOptions eo;
      eo.prefix = p;
      eo.reaction_type = reaction_type;
      it = enc.emplace(p, encode(ps, features, eo)).first;
    }
    return it->second;
  };
  ProductScores s;
  s.n = product.size();
  for (const auto& b : product.bonds()) s.bonds.emplace_back(std::min(b.u, b.v), std::max(b.u, b.v));
  std::sort(s.bonds.begin(), s.bonds.end());
  s.bond_logits = rcp_bond_logits(ps, encoded(Task::Rcp)).value();
  s.hydro_logp = log_softmax_rows(rcp_hydrogen_logits(ps, encoded(Task::Rcp)).value());
  const Eigen::MatrixXd lgm = lgm_logits(ps, encoded(Task::Lgm), LgmMode::Product).value();
  s.lg_logp = log_softmax_rows(lgm.leftCols(model_.vocab.size()) * (1.0 / c.tau_contrastive));
  s.conn_logits.resize(lgs_.graphs.size());
  for (std::size_t id = 1; id < lgs_.graphs.size(); ++id) {
    const auto& gates = lgs_.gate_atoms[id];
    if (gates.empty() || static_cast<int>(gates.size()) > c.max_gates) continue;
    EncodedGraph lg;
    lg.node_reps = tape.constant(lg_reps_[id]);
    lg.n = static_cast<int>(lg_reps_[id].rows());
    s.conn_logits[id] = lgc_logits(ps, encoded(Task::Lgc), lg, gates).value();
  }
  require_finite(s.bond_logits, "bond scores");
  require_finite(s.hydro_logp, "hydrogen scores");
  require_finite(s.lg_logp, "leaving-group scores");
  return s;
}

EnergyTrace Predictor::energy(const ProductScores& s, const Choice& c) const {
  if (c.lg_id < 0 || c.lg_id >= s.lg_logp.cols()) throw LabelError("leaving group id out of range");
  if (static_cast<int>(c.h_class.size()) != s.n) throw LabelError("hydrogen classes do not match the product");
  EnergyTrace t;
  auto at = [&](Action a) -> double& { return t.action[static_cast<std::size_t>(a)]; };
  at(Action::LgMatching) = -s.lg_logp(0, c.lg_id);
  at(Action::Initializing) = 0.0;

  const auto id = static_cast<std::size_t>(c.lg_id);
  if (!c.gate_targets.empty()) {
    if (id >= s.conn_logits.size() || s.conn_logits[id].rows() != static_cast<Eigen::Index>(c.gate_targets.size())) {
      throw LabelError("gate assignment does not match the leaving group");
    }
    double conn = 0.0;
    for (std::size_t g = 0; g < c.gate_targets.size(); ++g) {
      conn += neg_log_sigmoid(s.conn_logits[id](static_cast<Eigen::Index>(g), c.gate_targets[g]));
    }
    at(Action::LgConnecting) = conn;
  }

  const std::set<std::pair<int, int>> changed(c.changed_bonds.begin(), c.changed_bonds.end());
  double bond = 0.0;
  for (const auto& [u, v] : s.bonds) {
    const double x = s.bond_logits(u, v);
    bond += changed.count({u, v}) ? neg_log_sigmoid(x) : neg_log_sigmoid(-x);
  }
  at(Action::BondChanging) = bond;

  double h = 0.0;
  for (int v = 0; v < s.n; ++v) {
    const int cls = c.h_class[static_cast<std::size_t>(v)];
    if (cls < 0 || cls >= s.hydro_logp.cols()) throw LabelError("hydrogen class out of range");
    h -= s.hydro_logp(v, cls);
  }
  at(Action::HydrogenChanging) = h;
  return t;
}

std::vector<Candidate> Predictor::predict(const MolGraph& product, std::optional<int> reaction_type,
                                          const BeamConfig& beam_in) const {
  beam_in.validate();
  BeamConfig beam = beam_in;
  if (beam.greedy) beam.n_lg = beam.n_conn = beam.n_bond = 1;
  const auto& cfg = model_.params.config;
  const MolGraph mapped = ensure_mapped(product);
  const ProductScores s = score(mapped, reaction_type);

  std::vector<int> lg_order = ranked_leaving_groups(s, model_.vocab);
  if (lg_order.size() > static_cast<std::size_t>(beam.n_lg)) lg_order.resize(static_cast<std::size_t>(beam.n_lg));

  const auto bsets = ranked_bond_sets(s, beam.n_bond);
  std::map<std::string, Candidate> best;
  for (int id : lg_order) {
    const auto& entry = model_.vocab.entry(id);
    const auto assignments = id == 0 ? std::vector<GateAssignment>{{}}
                                     : ranked_gate_assignments(s.conn_logits[static_cast<std::size_t>(id)], beam.n_conn);
    for (const auto& asg : assignments) {
      for (const auto& bset : bsets) {
        std::vector<int> touched = asg.targets;
        for (const auto& [u, v] : bset.pairs) touched.insert(touched.end(), {u, v});
        std::sort(touched.begin(), touched.end());
        touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
        const auto hvars = ranked_hydrogen_variants(s.hydro_logp, touched, kHydrogenVariantCap);

        EditSet edits;
        edits.leaving_group = id == 0 ? nullptr : &entry.graph;
        edits.gate_targets = asg.targets;
        std::optional<SurgeryResult> found;
        std::vector<int> found_h;
        // Lowest hydrogen energy first; within it, bond kinds in preference order.
        const auto combos = kind_combos(mapped, bset.pairs);
        std::vector<ProductValence> valences;
        for (const auto& combo : combos)
          valences.push_back(product_valence(mapped, edits.leaving_group, asg.targets, bset.pairs, combo));
        for (const auto& hv : hvars) {
          edits.h_delta.resize(hv.cls.size());
          for (std::size_t v = 0; v < hv.cls.size(); ++v) edits.h_delta[v] = hv.cls[v] - cfg.k;
          for (std::size_t ci = 0; ci < combos.size(); ++ci) {
            // Cheap exact filter on product atoms; surgery confirms the rest.
            if (!product_atoms_fit(mapped, valences[ci], edits.h_delta)) continue;
            const auto& combo = combos[ci];
            edits.bond_changes.clear();
            for (std::size_t i = 0; i < combo.size(); ++i)
              edits.bond_changes.push_back({bset.pairs[i].first, bset.pairs[i].second, combo[i]});
            try {
              auto r = apply_edits(mapped, edits);
              if (!r.legal) continue;
              found = std::move(r);
              found_h = hv.cls;
            } catch (const SurgeryError&) {
              continue;
            }
            break;
          }
          if (found) break;
        }
        if (!found) continue;

        Candidate cand;
        cand.lg_id = id;
        cand.leaving_group = entry.canonical;
        cand.gate_targets = asg.targets;
        cand.bond_changes = edits.bond_changes;
        cand.h_delta = edits.h_delta;
        cand.reactants = std::move(found->reactants);
        WriteOptions with_maps;
        with_maps.include_maps = true;
        for (const auto& r : cand.reactants) {
          cand.reactant_smiles.push_back(canonical_smiles(r));
          cand.mapped_smiles.push_back(write_smiles(r, with_maps));
        }
        Choice choice{id, asg.targets, bset.pairs, found_h};
        cand.trace = energy(s, choice);
        const std::string key = cand.key();
        auto it = best.find(key);
        if (it == best.end() || cand.trace.total() < it->second.trace.total()) best[key] = std::move(cand);
      }
    }
  }
  if (best.empty()) throw EmptyBeamError("no legal candidate for " + canonical_smiles(product));

  std::vector<Candidate> out;
  for (auto& [key, cand] : best) out.push_back(std::move(cand));
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    const double ea = a.trace.total(), eb = b.trace.total();
    return ea != eb ? ea < eb : a.key() < b.key();
  });
  if (out.size() > static_cast<std::size_t>(beam.k_out)) out.resize(static_cast<std::size_t>(beam.k_out));
  return out;
}

EnergyTrace Predictor::evaluate_query(const MolGraph& product, const std::vector<MolGraph>& proposal,
                                      std::optional<int> reaction_type) const {
  const auto& cfg = model_.params.config;
  if (proposal.empty()) throw LabelError("not scorable: empty proposal");

  bool mapped = !product.empty();
  for (const auto& a : product.atoms()) mapped = mapped && a.atom_map > 0;
  if (mapped) {
    std::set<int> seen;
    for (const auto& r : proposal)
      for (const auto& a : r.atoms())
        if (a.atom_map > 0) seen.insert(a.atom_map);
    for (const auto& a : product.atoms()) mapped = mapped && seen.count(a.atom_map);
  }

  if (!mapped) {
    // Unmapped proposals are matched against a wide candidate search.
    const std::string wanted = [&] {
      std::string k;
      for (const auto& s : canonical_multiset(proposal)) k += (k.empty() ? "" : ".") + s;
      return k;
    }();
    BeamConfig wide;
    wide.n_lg = model_.vocab.size();
    wide.n_conn = 8;
    wide.n_bond = 8;
    wide.k_out = 1 << 20;
    std::vector<Candidate> all;
    try {
      all = predict(product, reaction_type, wide);
    } catch (const EmptyBeamError&) {
    }
    for (const auto& c : all)
      if (c.key() == wanted) return c.trace;
    throw LabelError("not scorable: proposal is not reachable with the model's edits");
  }

  ReactionRecord rec;
  rec.record_id = "query";
  rec.reaction_class = reaction_type;
  rec.product = product;
  rec.reactants = proposal;
  RetroLabels labels = extract_labels(rec, cfg.k);
  if (!model_.vocab.assign_ids(labels)) throw LabelError("not scorable: leaving group outside the vocabulary");
  Choice choice;
  choice.lg_id = lg_class(labels);
  if (choice.lg_id > 0) {
    const int gates = model_.vocab.entry(choice.lg_id).gate_count();
    if (gates > cfg.max_gates) throw LabelError("not scorable: too many gates");
    choice.gate_targets.assign(static_cast<std::size_t>(gates), -1);
    for (const auto& gc : labels.gate_connections) {
      if (gc.gate < 0 || gc.gate >= gates) throw LabelError("not scorable: gate index out of range");
      choice.gate_targets[static_cast<std::size_t>(gc.gate)] = gc.product_atom;
    }
    if (std::count(choice.gate_targets.begin(), choice.gate_targets.end(), -1) > 0) {
      throw LabelError("not scorable: unconnected gate");
    }
  }
  for (const auto& b : labels.rc_bonds) choice.changed_bonds.emplace_back(std::min(b.u, b.v), std::max(b.u, b.v));
  for (int h : labels.h_delta) {
    if (std::abs(h) > cfg.k) throw LabelError("not scorable: hydrogen change beyond the model's classes");
    choice.h_class.push_back(h + cfg.k);
  }
  return energy(score(product, reaction_type), choice);
}

}  // namespace retrograph
