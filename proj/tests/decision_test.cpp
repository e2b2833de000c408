#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "retrograph/decision.hpp"
#include "retrograph/error.hpp"
#include "support/memorized.hpp"

using namespace retrograph;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Small untrained model over the mini-corpus vocabulary with every head
// weight zeroed, so all head probabilities are uniform.
Model uniform_model() {
  Model m;
  m.vocab = LeavingGroupVocab::build(fixture::mini_corpus());
  ModelConfig c;
  c.d = 16;
  c.d_k = 4;
  c.n_head = 4;
  c.layers = 1;
  c.vocab_size = m.vocab.size();
  c.max_gates = m.vocab.max_gates();
  m.params = init_params(c);
  for (auto& [name, t] : m.params.tensors)
    if (name.rfind("rcp.", 0) == 0 || name.rfind("lgm.", 0) == 0 || name.rfind("lgc.", 0) == 0) t.setZero();
  return m;
}

std::string truth_key(const ReactionRecord& r) {
  std::string k;
  for (const auto& s : canonical_multiset(contributing_reactants(r))) k += (k.empty() ? "" : ".") + s;
  return k;
}

int gate_count(const Model& m, int id) { return m.vocab.entry(id).gate_count(); }

const ReactionRecord& record_with_gates(const Model& m, int min_gates) {
  for (const auto& r : fixture::mini_corpus()) {
    auto labels = extract_labels(r);
    m.vocab.assign_ids(labels);
    if (lg_class(labels) > 0 && gate_count(m, lg_class(labels)) >= min_gates) return r;
  }
  throw std::runtime_error("no record with enough gates");
}

}  // namespace

TEST(EnergyTrace, TotalProfileAndDeltas) {
  EnergyTrace t;
  t.action = {0.25, 0.0, 1.5, 0.125, 2.0};
  EXPECT_EQ(t.total(), 0.25 + 0.0 + 1.5 + 0.125 + 2.0);
  const auto p = t.profile();
  EXPECT_EQ(p[0], 0.25);
  EXPECT_EQ(p[1], 0.25);
  EXPECT_EQ(p[4], t.total());
  EXPECT_EQ(t.delta(1), 0.25);
  EXPECT_EQ(t.delta(2), 1.5);
  EXPECT_EQ(t.delta(3), 0.125);
  EXPECT_EQ(t.delta(4), 2.0);
  EXPECT_THROW(t.delta(0), std::out_of_range);
  EXPECT_THROW(t.delta(5), std::out_of_range);
  EXPECT_STREQ(action_name(Action::Initializing), "initializing");
}

TEST(BeamConfig, RejectsZeroSizes) {
  BeamConfig b;
  EXPECT_NO_THROW(b.validate());
  b.n_conn = 0;
  EXPECT_THROW(b.validate(), ConfigError);
}

TEST(EnsureMapped, KeepsExistingMapsAndFillsTheRest) {
  const auto g = parse_smiles("[CH3:5]CO");
  const auto m = ensure_mapped(g);
  EXPECT_EQ(m.atom(0).atom_map, 5);
  EXPECT_EQ(m.atom(1).atom_map, 6);
  EXPECT_EQ(m.atom(2).atom_map, 7);
  EXPECT_EQ(canonical_smiles(m), canonical_smiles(g));
}

TEST(Energy, UniformHeadsMatchClosedForm) {
  const Model m = uniform_model();
  const Predictor p(m);
  const auto product = parse_smiles("CC(=O)NCC");
  const auto s = p.score(product, std::nullopt);
  const int gates = gate_count(m, 3);
  ASSERT_EQ(s.conn_logits[3].rows(), gates);
  Choice c;
  c.lg_id = 3;
  for (int g = 0; g < gates; ++g) c.gate_targets.push_back(g);
  c.changed_bonds = {s.bonds[0]};
  c.h_class.assign(static_cast<std::size_t>(product.size()), 4);
  const auto t = p.energy(s, c);
  EXPECT_NEAR(t.action[0], std::log(m.vocab.size()), 1e-12);
  EXPECT_EQ(t.action[1], 0.0);
  EXPECT_NEAR(t.action[2], gates * std::log(2.0), 1e-12);
  EXPECT_NEAR(t.action[3], static_cast<double>(s.bonds.size()) * std::log(2.0), 1e-12);
  EXPECT_NEAR(t.action[4], product.size() * std::log(9.0), 1e-12);
}

TEST(Energy, ProbabilityOneChainGivesZero) {
  const Model m = uniform_model();
  const Predictor p(m);
  ProductScores s;
  s.n = 3;
  s.bonds = {{0, 1}, {1, 2}};
  s.bond_logits = Eigen::MatrixXd::Constant(3, 3, -kInf);
  s.bond_logits(0, 1) = s.bond_logits(1, 0) = kInf;
  s.hydro_logp = Eigen::MatrixXd::Constant(3, 9, -kInf);
  s.hydro_logp.col(4).setZero();
  s.lg_logp = Eigen::MatrixXd::Constant(1, m.vocab.size(), -kInf);
  s.lg_logp(0, 1) = 0.0;
  s.conn_logits.resize(static_cast<std::size_t>(m.vocab.size()));
  s.conn_logits[1] = Eigen::MatrixXd::Constant(1, 3, -kInf);
  s.conn_logits[1](0, 2) = kInf;
  const Choice c{1, {2}, {{0, 1}}, {4, 4, 4}};
  const auto t = p.energy(s, c);
  for (double e : t.action) EXPECT_EQ(e, 0.0);
  EXPECT_EQ(t.total(), 0.0);
}

TEST(Energy, LoweringAChosenProbabilityRaisesTheTotal) {
  const Model m = uniform_model();
  const Predictor p(m);
  const auto product = parse_smiles("OCC(C)Br");
  const auto base = p.score(product, std::nullopt);
  const Choice c{1, {4}, {{2, 4}}, std::vector<int>(5, 4)};
  const double e0 = p.energy(base, c).total();
  for (int action = 0; action < 4; ++action) {
    auto s = base;
    switch (action) {
      case 0: s.lg_logp(0, 1) -= 0.5; break;
      case 1: s.conn_logits[1](0, 4) -= 0.5; break;
      case 2: s.bond_logits(2, 4) -= 0.5; break;
      case 3: s.hydro_logp(2, 4) -= 0.5; break;
    }
    EXPECT_GT(p.energy(s, c).total(), e0) << "action " << action;
  }
  // An unchosen bond becoming more likely to change also costs energy.
  auto s = base;
  s.bond_logits(0, 1) += 0.5;
  EXPECT_GT(p.energy(s, c).total(), e0);
}

TEST(Energy, RejectsInconsistentChoices) {
  const Model m = uniform_model();
  const Predictor p(m);
  const auto s = p.score(parse_smiles("CCO"), std::nullopt);
  EXPECT_THROW(p.energy(s, Choice{1, {0, 1}, {}, {4, 4, 4}}), LabelError);
  EXPECT_THROW(p.energy(s, Choice{0, {}, {}, {4, 4}}), LabelError);
  EXPECT_THROW(p.energy(s, Choice{0, {}, {}, {4, 4, 9}}), LabelError);
  EXPECT_THROW(p.energy(s, Choice{99, {}, {}, {4, 4, 4}}), LabelError);
}

TEST(Beam, BondSetsAreSeedPlusHammingOneByEnergy) {
  ProductScores s;
  s.n = 4;
  s.bonds = {{0, 1}, {1, 2}, {2, 3}};
  s.bond_logits = Eigen::MatrixXd::Zero(4, 4);
  const double x[] = {2.0, -1.0, 0.3};
  for (int i = 0; i < 3; ++i) s.bond_logits(i, i + 1) = s.bond_logits(i + 1, i) = x[i];
  const auto sets = ranked_bond_sets(s, 10);
  ASSERT_EQ(sets.size(), 4u);
  // Oracle: -ln p for chosen-on, -ln(1-p) for off.
  const auto on = [](double l) { return -std::log(1.0 / (1.0 + std::exp(-l))); };
  const auto off = [](double l) { return -std::log(1.0 - 1.0 / (1.0 + std::exp(-l))); };
  const std::vector<std::pair<int, int>> seed = {{0, 1}, {2, 3}};
  EXPECT_EQ(sets[0].pairs, seed);
  EXPECT_NEAR(sets[0].energy, on(2.0) + off(-1.0) + on(0.3), 1e-12);
  for (std::size_t i = 1; i < sets.size(); ++i) {
    EXPECT_LE(sets[i - 1].energy, sets[i].energy);
    std::vector<std::pair<int, int>> diff;
    std::set_symmetric_difference(seed.begin(), seed.end(), sets[i].pairs.begin(), sets[i].pairs.end(),
                                  std::back_inserter(diff));
    EXPECT_EQ(diff.size(), 1u);
  }
  EXPECT_EQ(ranked_bond_sets(s, 2).size(), 2u);
}

TEST(Beam, GateAssignmentsMatchBruteForce) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 20; ++trial) {
    const int gates = 1 + trial % 2, n = 3 + trial % 4;
    Eigen::MatrixXd logits(gates, n);
    for (int i = 0; i < logits.size(); ++i) logits.data()[i] = nd(rng);
    std::vector<double> oracle;
    const auto e = [&](int g, int v) { return std::log1p(std::exp(-logits(g, v))); };
    for (int a = 0; a < n; ++a) {
      if (gates == 1) oracle.push_back(e(0, a));
      else
        for (int b = 0; b < n; ++b)
          if (b != a) oracle.push_back(e(0, a) + e(1, b));
    }
    std::sort(oracle.begin(), oracle.end());
    const auto got = ranked_gate_assignments(logits, 1000);
    ASSERT_EQ(got.size(), oracle.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i].energy, oracle[i], 1e-12);
    for (const auto& a : got) EXPECT_EQ(std::set<int>(a.targets.begin(), a.targets.end()).size(), a.targets.size());
  }
}

TEST(Beam, HydrogenVariantsStayWithinOneClass) {
  Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(3, 9);
  logits(0, 4) = 3.0;
  logits(1, 8) = 2.0;
  logits(2, 5) = 1.0;
  const auto logp = log_softmax_rows(logits);
  const auto vars = ranked_hydrogen_variants(logp, {0, 2}, 100);
  ASSERT_FALSE(vars.empty());
  EXPECT_EQ(vars[0].cls, (std::vector<int>{4, 8, 5}));
  std::set<std::vector<int>> seen;
  for (const auto& v : vars) {
    EXPECT_TRUE(seen.insert(v.cls).second);
    int changed = 0;
    for (int a = 0; a < 3; ++a) {
      const int d = std::abs(v.cls[static_cast<std::size_t>(a)] - vars[0].cls[static_cast<std::size_t>(a)]);
      EXPECT_LE(d, 1);
      changed += d;
    }
    double e = 0.0;
    for (int a = 0; a < 3; ++a) e -= logp(a, v.cls[static_cast<std::size_t>(a)]);
    EXPECT_NEAR(v.energy, e, 1e-12);
    if (changed == 2) EXPECT_EQ(v.cls[1], 8) << "pairs only among touched atoms";
  }
  // Atom 1 sits at the top class: only -1 is possible there.
  EXPECT_EQ(vars.size(), 1u + 2 + 1 + 2 + 4);
  EXPECT_EQ(ranked_hydrogen_variants(logp, {0, 2}, 3).size(), 3u);
}

TEST(Predict, NoLegalCandidateRaisesEmptyBeam) {
  // Uniform heads pick class 0 (-4 hydrogens) everywhere; a bare carbon
  // cannot be repaired within one class.
  const Model m = uniform_model();
  const Predictor p(m);
  const MolGraph carbon({AtomRecord{}}, {});
  EXPECT_THROW(p.predict(carbon, std::nullopt), EmptyBeamError);
  BeamConfig bad;
  bad.k_out = 0;
  EXPECT_THROW(p.predict(parse_smiles("CCO"), std::nullopt, bad), ConfigError);
}

TEST(Predict, MemorizedRankOneMatchesGroundTruth) {
  const Predictor p(fixture::memorized_model());
  int hits = 0;
  for (const auto& r : fixture::mini_corpus()) {
    const auto c = p.predict(r.product, std::nullopt);
    hits += c.front().key() == truth_key(r) ? 1 : 0;
  }
  EXPECT_GE(hits, 36) << "of " << fixture::mini_corpus().size();
}

TEST(Predict, CandidatesAreLegalRankedAndAdditive) {
  const Predictor p(fixture::memorized_model());
  BeamConfig beam;
  beam.k_out = 6;
  for (int i = 0; i < 40; i += 3) {
    const auto& r = fixture::mini_corpus()[static_cast<std::size_t>(i)];
    const auto cands = p.predict(r.product, std::nullopt, beam);
    ASSERT_LE(cands.size(), 6u);
    std::set<std::string> keys;
    for (std::size_t j = 0; j < cands.size(); ++j) {
      const auto& c = cands[j];
      EXPECT_TRUE(keys.insert(c.key()).second);
      EXPECT_TRUE(c.legal);
      for (const auto& g : c.reactants) EXPECT_TRUE(g.all_valences_ok()) << c.key();
      const auto& a = c.trace.action;
      EXPECT_EQ(c.trace.total(), a[0] + a[1] + a[2] + a[3] + a[4]);
      EXPECT_EQ(a[1], 0.0);
      for (double e : a) EXPECT_GE(e, 0.0);
      EXPECT_TRUE(std::is_sorted(c.reactant_smiles.begin(), c.reactant_smiles.end()));
      EXPECT_EQ(static_cast<int>(c.h_delta.size()), r.product.size());
      if (j > 0) {
        const auto& prev = cands[j - 1];
        EXPECT_TRUE(prev.trace.total() < c.trace.total() ||
                    (prev.trace.total() == c.trace.total() && prev.key() < c.key()));
      }
    }
  }
}

TEST(Predict, Deterministic) {
  const Predictor p(fixture::memorized_model());
  const auto& r = fixture::mini_corpus()[7];
  const auto a = p.predict(r.product, std::nullopt);
  const auto b = p.predict(r.product, std::nullopt);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].key(), b[i].key());
    EXPECT_EQ(a[i].trace.action, b[i].trace.action);
  }
}

TEST(Predict, GreedyModeReturnsOneBranch) {
  const Predictor p(fixture::memorized_model());
  BeamConfig greedy;
  greedy.greedy = true;
  const auto& r = fixture::mini_corpus()[3];
  const auto c = p.predict(r.product, std::nullopt, greedy);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].key(), p.predict(r.product, std::nullopt).front().key());
}

TEST(Query, RankOneTraceReproducedBitwise) {
  const Predictor p(fixture::memorized_model());
  for (int i = 0; i < 40; i += 4) {
    const auto& r = fixture::mini_corpus()[static_cast<std::size_t>(i)];
    const auto top = p.predict(r.product, std::nullopt).front();
    const auto mapped = p.evaluate_query(r.product, top.reactants, std::nullopt);
    EXPECT_EQ(mapped.action, top.trace.action) << r.record_id;
    std::vector<MolGraph> plain;
    for (const auto& g : top.reactants) plain.push_back(g.without_maps());
    const auto unmapped = p.evaluate_query(r.product.without_maps(), plain, std::nullopt);
    EXPECT_EQ(unmapped.action, top.trace.action) << r.record_id;
  }
}

TEST(Query, LeavingGroupOutsideVocabularyIsNotScorable) {
  const Predictor p(fixture::memorized_model());
  const auto product = parse_smiles("[CH3:1][CH2:2][O:3][CH2:4][CH3:5]");
  const std::vector<MolGraph> proposal = {parse_smiles("[CH3:1][CH2:2][OH:3]"), parse_smiles("I[CH2:4][CH3:5]")};
  try {
    p.evaluate_query(product, proposal, std::nullopt);
    FAIL() << "expected LabelError";
  } catch (const LabelError& e) {
    EXPECT_NE(std::string(e.what()).find("not scorable"), std::string::npos);
  }
  EXPECT_THROW(p.evaluate_query(product.without_maps(), {parse_smiles("CCCCCCCCC")}, std::nullopt), LabelError);
}

TEST(Query, GroundTruthBeatsWrongGate) {
  const Model& m = fixture::memorized_model();
  const Predictor p(m);
  int compared = 0;
  for (const auto& r : fixture::mini_corpus()) {
    auto labels = extract_labels(r);
    m.vocab.assign_ids(labels);
    const int id = lg_class(labels);
    if (id == 0) continue;
    const auto truth = p.evaluate_query(r.product, contributing_reactants(r), std::nullopt);
    const auto s = p.score(r.product, std::nullopt);
    Choice wrong{id, {}, {}, {}};
    wrong.gate_targets.assign(static_cast<std::size_t>(gate_count(m, id)), -1);
    for (const auto& gc : labels.gate_connections) wrong.gate_targets[static_cast<std::size_t>(gc.gate)] = gc.product_atom;
    for (const auto& b : labels.rc_bonds) wrong.changed_bonds.emplace_back(std::min(b.u, b.v), std::max(b.u, b.v));
    for (int h : labels.h_delta) wrong.h_class.push_back(h + m.params.config.k);
    EXPECT_EQ(p.energy(s, wrong).action, truth.action) << "labels reproduce the query trace";
    // Move the first gate to the next atom not already used.
    int& t = wrong.gate_targets[0];
    do t = (t + 1) % s.n;
    while (std::count(wrong.gate_targets.begin(), wrong.gate_targets.end(), t) > 1);
    EXPECT_LT(truth.total(), p.energy(s, wrong).total()) << r.record_id;
    ++compared;
  }
  EXPECT_GT(compared, 20);
}

TEST(Query, MultiGateRecordIsScorable) {
  const Model& m = fixture::memorized_model();
  const auto& r = record_with_gates(m, 2);
  const Predictor p(m);
  const auto t = p.evaluate_query(r.product, contributing_reactants(r), std::nullopt);
  EXPECT_GT(t.action[2], 0.0);
  EXPECT_LT(t.total(), 5.0);
}
