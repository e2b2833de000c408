#include "retrograph/evaluate.hpp"

#include <algorithm>
#include <limits>

#include "retrograph/error.hpp"

namespace retrograph {

namespace {

constexpr std::size_t kNotFound = std::numeric_limits<std::size_t>::max();

template <typename T, typename Pred>
std::size_t rank_of(const std::vector<T>& ranked, Pred match) {
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (match(ranked[i])) return i;
  return kNotFound;
}

std::string joined(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : ".") + p;
  return out;
}

}  // namespace

TopkReport evaluate_topk(const Predictor& predictor, const std::vector<ReactionRecord>& records,
                         const std::vector<int>& ks, BeamConfig beam) {
  const Model& model = predictor.model();
  const auto& cfg = model.params.config;
  TopkReport report;
  report.records = records.size();
  for (int k : ks) report.rows.push_back({k, 0, 0, 0, 0});
  if (ks.empty()) return report;
  beam.k_out = std::max(beam.k_out, *std::max_element(ks.begin(), ks.end()));

  std::vector<std::size_t> overall_rank, rcp_rank, lgm_rank, lgc_rank;
  for (const auto& rec : records) {
    const std::optional<int> type = cfg.type_known ? rec.reaction_class : std::nullopt;
    const std::string truth = joined(canonical_multiset(contributing_reactants(rec)));
    std::size_t r = kNotFound;
    try {
      const auto cands = predictor.predict(rec.product, type, beam);
      r = rank_of(cands, [&](const Candidate& c) { return c.key() == truth; });
    } catch (const EmptyBeamError&) {
      ++report.empty_beam;
    }
    overall_rank.push_back(r);

    RetroLabels labels;
    try {
      labels = extract_labels(rec, cfg.k);
    } catch (const LabelError&) {
      continue;
    }
    if (!model.vocab.assign_ids(labels)) continue;
    ++report.labelled;
    const ProductScores s = predictor.score(rec.product, type);
    const int lg = lg_class(labels);
    lgm_rank.push_back(rank_of(ranked_leaving_groups(s, model.vocab), [&](int id) { return id == lg; }));

    std::vector<std::pair<int, int>> bonds;
    std::vector<int> touched;
    for (const auto& b : labels.rc_bonds) {
      bonds.emplace_back(std::min(b.u, b.v), std::max(b.u, b.v));
      touched.insert(touched.end(), {b.u, b.v});
    }
    std::sort(bonds.begin(), bonds.end());
    std::vector<int> gates;
    if (lg > 0 && s.conn_logits[static_cast<std::size_t>(lg)].size() > 0) {
      gates.assign(static_cast<std::size_t>(model.vocab.entry(lg).gate_count()), -1);
      for (const auto& gc : labels.gate_connections) {
        gates[static_cast<std::size_t>(gc.gate)] = gc.product_atom;
        touched.push_back(gc.product_atom);
      }
      ++report.with_gates;
      const int wide = s.n * static_cast<int>(gates.size()) + 1;
      lgc_rank.push_back(rank_of(ranked_gate_assignments(s.conn_logits[static_cast<std::size_t>(lg)], wide),
                                 [&](const GateAssignment& a) { return a.targets == gates; }));
    }
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    std::vector<int> h_class;
    for (int h : labels.h_delta) h_class.push_back(h + cfg.k);
    const std::size_t br = rank_of(ranked_bond_sets(s, std::numeric_limits<int>::max()),
                                   [&](const BondSet& b) { return b.pairs == bonds; });
    const std::size_t hr = rank_of(ranked_hydrogen_variants(s.hydro_logp, touched, kNotFound),
                                   [&](const HydrogenVariant& h) { return h.cls == h_class; });
    rcp_rank.push_back(br == kNotFound || hr == kNotFound ? kNotFound : std::max(br, hr));
  }

  const auto fraction = [](const std::vector<std::size_t>& ranks, int k) {
    if (ranks.empty()) return 0.0;
    const auto hits = std::count_if(ranks.begin(), ranks.end(),
                                    [&](std::size_t r) { return r < static_cast<std::size_t>(k); });
    return static_cast<double>(hits) / static_cast<double>(ranks.size());
  };
  for (auto& row : report.rows) {
    row.overall = fraction(overall_rank, row.k);
    row.rcp = fraction(rcp_rank, row.k);
    row.lgm = fraction(lgm_rank, row.k);
    row.lgc = fraction(lgc_rank, row.k);
  }
  return report;
}

}  // namespace retrograph
