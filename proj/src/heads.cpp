#include "retrograph/heads.hpp"

#include <algorithm>
#include <cmath>

#include "retrograph/error.hpp"

namespace retrograph {

std::string encoder_prefix(const ModelConfig& config, Task task) {
  if (!config.separate_encoders) return "enc";
  switch (task) {
    case Task::Rcp: return "enc_rcp";
    case Task::Lgm: return "enc_lgm";
    case Task::Lgc: return "enc_lgc";
  }
  return "enc";
}

namespace {

// Per-head bilinear score sum_h w_h <q_h, k_h> / sqrt(d_k) + b.
ad::Var weighted_bilinear(ParamSet& ps, ad::Var q, ad::Var k, const std::string& w, const std::string& b) {
  const auto& c = ps.config();
  const ad::Var qw = ad::mul_row(q, ad::repeat_cols(ps(w), c.d_k));
  const ad::Var s = ad::scale(ad::matmul_nt(qw, k), 1.0 / std::sqrt(static_cast<double>(c.d_k)));
  const ad::Var ones = ps.tape().constant(Eigen::MatrixXd::Ones(s.rows(), s.cols()));
  return ad::add(s, ad::mul_scalar(ones, ps(b)));
}

}  // namespace

ad::Var rcp_bond_logits(ParamSet& ps, const EncodedGraph& product) {
  const ad::Var q = ad::matmul(product.node_reps, ps("rcp.wq"));
  const ad::Var k = ad::matmul(product.node_reps, ps("rcp.wk"));
  const auto& c = ps.config();
  const ad::Var qw = ad::mul_row(q, ad::repeat_cols(ps("rcp.wbond"), c.d_k));
  const ad::Var s = ad::scale(ad::matmul_nt(qw, k), 1.0 / std::sqrt(static_cast<double>(c.d_k)));
  const ad::Var sym = ad::scale(ad::add(s, ad::transpose(s)), 0.5);
  const ad::Var ones = ps.tape().constant(Eigen::MatrixXd::Ones(sym.rows(), sym.cols()));
  return ad::add(sym, ad::mul_scalar(ones, ps("rcp.bbond")));
}

ad::Var rcp_hydrogen_logits(ParamSet& ps, const EncodedGraph& product) {
  return ad::add_row(ad::matmul(product.node_reps, ps("rcp.watom")), ps("rcp.batom"));
}

ad::Var lgm_logits(ParamSet& ps, const EncodedGraph& graph, LgmMode mode) {
  ad::Var h = graph.graph_rep;
  if (mode == LgmMode::Contrastive) h = ad::add(h, ps("lgm.hcon"));
  return ad::add_row(ad::matmul(h, ps("lgm.w")), ps("lgm.b"));
}

ad::Var lgc_logits(ParamSet& ps, const EncodedGraph& product, const EncodedGraph& lg,
                   const std::vector<int>& gate_atoms) {
  if (gate_atoms.empty()) throw GateError("leaving group has no gate atoms");
  if (static_cast<int>(gate_atoms.size()) > ps.config().max_gates) {
    throw GateError("leaving group has more gates than the model supports");
  }
  const ad::Var slots = ad::slice_rows(ps("lgc.slot"), 0, static_cast<Eigen::Index>(gate_atoms.size()));
  const ad::Var gate_reps = ad::gather_rows(lg.node_reps, gate_atoms);
  const ad::Var gates = ad::add_row(ad::matmul(ad::concat_cols({slots, gate_reps}), ps("lgc.wg")), ps("lgc.bg"));
  const ad::Var q = ad::matmul(gates, ps("lgc.wq"));
  const ad::Var k = ad::matmul(product.node_reps, ps("lgc.wk"));
  return weighted_bilinear(ps, q, k, "lgc.wconn", "lgc.bconn");
}

LeavingGroupFeatures LeavingGroupFeatures::from_vocab(const LeavingGroupVocab& vocab, int k_r) {
  LeavingGroupFeatures out;
  for (int id = 0; id < vocab.size(); ++id) {
    const auto& e = vocab.entry(id);
    out.graphs.push_back(id == 0 ? GraphFeatures{} : GraphFeatures::from_graph(e.graph, k_r));
    out.gate_atoms.push_back(e.gate_atoms);
  }
  return out;
}

TrainingExample make_example(const std::string& record_id, std::optional<int> reaction_type, const MolGraph& product,
                             const RetroLabels& labels, const LeavingGroupVocab& vocab, const ModelConfig& config) {
  const int n = product.size();
  TrainingExample ex;
  ex.record_id = record_id;
  ex.reaction_type = reaction_type;
  ex.product = product;
  ex.labels = labels;
  if (static_cast<int>(labels.h_delta.size()) != n) throw LabelError("hydrogen labels do not match the product size");
  if (ex.labels.lg_ids.empty() && !ex.labels.leaving_group.empty() && !vocab.assign_ids(ex.labels)) {
    throw LabelError("leaving group " + labels.leaving_group + " is not in the vocabulary");
  }
  ex.lg_id = lg_class(ex.labels);
  if (ex.lg_id < 0 || ex.lg_id >= vocab.size() || ex.lg_id >= config.vocab_size) {
    throw LabelError("leaving-group id outside the vocabulary");
  }
  ex.features = GraphFeatures::from_graph(product, config.k_r);

  ex.bond_target = Eigen::MatrixXd::Zero(n, n);
  ex.bond_mask = Eigen::MatrixXd::Zero(n, n);
  for (const auto& b : product.bonds()) ex.bond_mask(std::min(b.u, b.v), std::max(b.u, b.v)) = 1.0;
  for (const auto& e : labels.rc_bonds) {
    if (e.u < 0 || e.v < 0 || e.u >= n || e.v >= n || product.bond_order(e.u, e.v) == 0.0) {
      throw LabelError("reaction-center pair is not a product bond");
    }
    ex.bond_target(std::min(e.u, e.v), std::max(e.u, e.v)) = 1.0;
  }
  for (int dh : labels.h_delta) {
    if (std::abs(dh) > config.k) throw LabelError("hydrogen change outside +-k");
    ex.h_target.push_back(dh + config.k);
  }
  const int gates = vocab.entry(ex.lg_id).gate_count();
  if (gates > config.max_gates) throw LabelError("leaving group has more gates than the model supports");
  ex.conn_target = Eigen::MatrixXd::Zero(gates, n);
  for (const auto& gc : labels.gate_connections) {
    if (gc.gate < 0 || gc.gate >= gates || gc.product_atom < 0 || gc.product_atom >= n) {
      throw LabelError("gate connection outside the leaving group or product");
    }
    ex.conn_target(gc.gate, gc.product_atom) = 1.0;
  }
  return ex;
}

std::vector<TrainingExample> make_examples(const std::vector<ReactionRecord>& records, const LeavingGroupVocab& vocab,
                                           const ModelConfig& config, std::size_t* skipped) {
  std::vector<TrainingExample> out;
  std::size_t skip = 0;
  for (const auto& r : records) {
    try {
      out.push_back(make_example(r.record_id, r.reaction_class, r.product, extract_labels(r, config.k), vocab, config));
    } catch (const Error&) {
      ++skip;
    }
  }
  if (skipped) *skipped = skip;
  return out;
}

LossTerms example_losses(ParamSet& ps, const TrainingExample& ex, const LeavingGroupFeatures& lgs,
                         const LossOptions& opts) {
  const auto& c = ps.config();
  const int n = ex.features.n;
  std::map<std::string, EncodedGraph> products;
  const auto product = [&](Task t) -> const EncodedGraph& {
    const std::string p = encoder_prefix(c, t);
    auto it = products.find(p);
    if (it == products.end()) {
      EncodeOptions eo;
      eo.prefix = p;
      eo.reaction_type = ex.reaction_type;
      eo.mask_atom = opts.mask_atom;
      it = products.emplace(p, encode(ps, ex.features, eo)).first;
    }
    return it->second;
  };
  std::map<std::string, EncodedGraph> lg_graphs;
  const auto leaving_group = [&](Task t) -> const EncodedGraph& {
    const std::string p = encoder_prefix(c, t);
    auto it = lg_graphs.find(p);
    if (it == lg_graphs.end()) {
      EncodeOptions eo;
      eo.prefix = p;
      it = lg_graphs.emplace(p, encode(ps, lgs.graphs.at(static_cast<std::size_t>(ex.lg_id)), eo)).first;
    }
    return it->second;
  };

  LossTerms out;
  // Reaction center: bonded pairs and atoms (or only the positives).
  Eigen::MatrixXd bond_mask = ex.bond_mask;
  std::vector<int> h_target = ex.h_target;
  if (c.rcp_positive_only) {
    bond_mask = bond_mask.cwiseProduct(ex.bond_target);
    for (int v = 0; v < n; ++v)
      if (h_target[static_cast<std::size_t>(v)] == c.k) h_target[static_cast<std::size_t>(v)] = -1;
  }
  const int n_pairs = static_cast<int>(bond_mask.sum());
  const int n_atoms = static_cast<int>(std::count_if(h_target.begin(), h_target.end(), [](int t) { return t >= 0; }));
  if (n_pairs > 0) {
    const ad::Var logits = rcp_bond_logits(ps, product(Task::Rcp));
    out.bond = ad::scale(ad::bce_with_logits_sum(logits, ex.bond_target, bond_mask), 1.0 / n_pairs);
    out.n_bond = 1;
  }
  if (n_atoms > 0) {
    const ad::Var logits = rcp_hydrogen_logits(ps, product(Task::Rcp));
    out.hydrogen = ad::scale(ad::cross_entropy_sum(logits, h_target), 1.0 / n_atoms);
    out.n_hydrogen = 1;
  }

  // Leaving-group matching: tempered softmax over the vocabulary.
  const double inv_tau = 1.0 / c.tau_contrastive;
  const ad::Var ce_p =
      ad::cross_entropy_sum(ad::scale(lgm_logits(ps, product(Task::Lgm), LgmMode::Product), inv_tau), {ex.lg_id});
  if (opts.contrastive && ex.lg_id != 0) {
    const ad::Var ce_c = ad::cross_entropy_sum(
        ad::scale(lgm_logits(ps, leaving_group(Task::Lgm), LgmMode::Contrastive), inv_tau), {ex.lg_id});
    out.lg = ad::scale(ad::add(ce_p, ce_c), 0.5);
  } else {
    out.lg = ce_p;
  }
  out.n_lg = 1;

  // Gate connections of the true leaving group.
  if (ex.conn_target.rows() > 0 && n > 0) {
    const auto& gates = lgs.gate_atoms.at(static_cast<std::size_t>(ex.lg_id));
    const ad::Var logits = lgc_logits(ps, product(Task::Lgc), leaving_group(Task::Lgc), gates);
    const Eigen::MatrixXd all = Eigen::MatrixXd::Ones(ex.conn_target.rows(), ex.conn_target.cols());
    out.lgc = ad::scale(ad::bce_with_logits_sum(logits, ex.conn_target, all),
                        1.0 / static_cast<double>(ex.conn_target.size()));
    out.n_lgc = 1;
  }
  return out;
}

namespace {

ad::Var mean_of(const std::vector<ad::Var>& terms) {
  if (terms.empty()) return {};
  return ad::weighted_sum(terms, std::vector<double>(terms.size(), 1.0 / static_cast<double>(terms.size())));
}

}  // namespace

LossTerms batch_losses(ParamSet& ps, const std::vector<const TrainingExample*>& batch, const LeavingGroupFeatures& lgs,
                       const LossOptions& opts) {
  std::vector<ad::Var> bond, hydrogen, lg, lgc;
  for (const auto* ex : batch) {
    const auto t = example_losses(ps, *ex, lgs, opts);
    if (t.n_bond) bond.push_back(t.bond);
    if (t.n_hydrogen) hydrogen.push_back(t.hydrogen);
    if (t.n_lg) lg.push_back(t.lg);
    if (t.n_lgc) lgc.push_back(t.lgc);
  }
  LossTerms out;
  out.bond = mean_of(bond);
  out.hydrogen = mean_of(hydrogen);
  out.lg = mean_of(lg);
  out.lgc = mean_of(lgc);
  out.n_bond = static_cast<int>(bond.size());
  out.n_hydrogen = static_cast<int>(hydrogen.size());
  out.n_lg = static_cast<int>(lg.size());
  out.n_lgc = static_cast<int>(lgc.size());
  return out;
}

LossBreakdown breakdown(const LossTerms& t) {
  LossBreakdown b;
  b.bond = t.n_bond ? t.bond.scalar() : 0.0;
  b.hydrogen = t.n_hydrogen ? t.hydrogen.scalar() : 0.0;
  b.lg = t.n_lg ? t.lg.scalar() : 0.0;
  b.lgc = t.n_lgc ? t.lgc.scalar() : 0.0;
  b.n_bond = t.n_bond;
  b.n_hydrogen = t.n_hydrogen;
  b.n_lg = t.n_lg;
  b.n_lgc = t.n_lgc;
  return b;
}

ad::Var weighted_total(ad::Tape& tape, const LossTerms& t, const LossWeights& w) {
  std::vector<ad::Var> terms;
  std::vector<double> weights;
  const auto add = [&](int count, ad::Var v, double weight) {
    if (count > 0 && weight != 0.0) {
      terms.push_back(v);
      weights.push_back(weight);
    }
  };
  add(t.n_bond, t.bond, w.bond);
  add(t.n_hydrogen, t.hydrogen, w.hydrogen);
  add(t.n_lg, t.lg, w.lg);
  add(t.n_lgc, t.lgc, w.lgc);
  if (terms.empty()) return tape.constant(Eigen::MatrixXd::Zero(1, 1));
  return ad::weighted_sum(terms, weights);
}

GradCheckReport grad_check(const ModelParams& params, const std::vector<const TrainingExample*>& batch,
                           const LeavingGroupFeatures& lgs, const LossWeights& weights, const LossOptions& loss,
                           const GradCheckOptions& opts) {
  std::map<std::string, Eigen::MatrixXd> analytic;
  {
    ad::Tape tape;
    ParamSet ps(tape, params, true);
    const ad::Var total = weighted_total(tape, batch_losses(ps, batch, lgs, loss), weights);
    require_finite(total.value(), "loss");
    tape.backward(total);
    analytic = ps.gradients();
  }
  if (opts.corrupt) opts.corrupt(analytic);

  ModelParams probe = params;
  const auto eval = [&]() {
    ad::Tape tape;
    ParamSet ps(tape, probe, false);
    return weighted_total(tape, batch_losses(ps, batch, lgs, loss), weights).scalar();
  };
  GradCheckReport report;
  for (auto& [name, tensor] : probe.tensors) {
    const Eigen::Index size = tensor.size();
    Eigen::Index stride = 1;
    if (opts.max_entries_per_tensor > 0 && size > opts.max_entries_per_tensor) {
      stride = size / opts.max_entries_per_tensor;
    }
    const auto& g = analytic.at(name);
    for (Eigen::Index i = 0; i < size; i += stride) {
      double& x = tensor.data()[i];
      const double saved = x;
      x = saved + opts.step;
      const double up = eval();
      x = saved - opts.step;
      const double down = eval();
      x = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = g.data()[i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++report.entries;
      if (err > report.max_error) {
        report.max_error = err;
        report.worst_tensor = name;
      }
    }
  }
  if (report.max_error > opts.tolerance) {
    throw GradCheckFailure("gradient mismatch in " + report.worst_tensor, report.max_error);
  }
  return report;
}

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& logits) {
  return logits.unaryExpr([](double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
  });
}

Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

}  // namespace retrograph
