#include "retrograph/explain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "retrograph/error.hpp"

namespace retrograph {

const char* explain_task_name(ExplainTask t) {
  switch (t) {
    case ExplainTask::Rcp: return "rcp";
    case ExplainTask::Lgm: return "lgm";
    case ExplainTask::Lgc: return "lgc";
    case ExplainTask::Overall: return "overall";
  }
  return "?";
}

ExplainTask parse_explain_task(const std::string& name) {
  for (auto t : {ExplainTask::Rcp, ExplainTask::Lgm, ExplainTask::Lgc, ExplainTask::Overall})
    if (name == explain_task_name(t)) return t;
  throw ConfigError("unknown task '" + name + "' (rcp, lgm, lgc, overall)");
}

TrainingExample explain_example(const Model& model, const ReactionRecord& record) {
  const auto& cfg = model.params.config;
  RetroLabels labels = extract_labels(record, cfg.k);
  if (!model.vocab.assign_ids(labels)) throw LabelError("leaving group of " + record.record_id + " is not in the vocabulary");
  return make_example(record.record_id, record.reaction_class, record.product, labels, model.vocab, cfg);
}

double task_loss(const Model& model, const TrainingExample& ex, ExplainTask task, int mask_atom,
                 const ApexOptions& opts) {
  const auto& cfg = model.params.config;
  // Cheap to rebuild relative to a forward pass; keeps the function stateless.
  const auto lgs = LeavingGroupFeatures::from_vocab(model.vocab, cfg.k_r);
  TrainingExample probe = ex;
  if (opts.reaction_type) probe.reaction_type = opts.reaction_type;
  ad::Tape tape;
  ParamSet ps(tape, model.params, false);
  LossOptions lo;
  lo.contrastive = opts.contrastive;
  lo.mask_atom = mask_atom;
  const LossTerms t = example_losses(ps, probe, lgs, lo);
  const auto need = [&](int count, const char* what) {
    if (count == 0) throw LabelError(ex.record_id + " does not supervise " + what);
  };
  switch (task) {
    case ExplainTask::Rcp:
      need(t.n_bond + t.n_hydrogen, "reaction-center prediction");
      return (t.n_bond ? t.bond.scalar() : 0.0) + (t.n_hydrogen ? t.hydrogen.scalar() : 0.0);
    case ExplainTask::Lgm:
      need(t.n_lg, "leaving-group matching");
      return t.lg.scalar();
    case ExplainTask::Lgc:
      need(t.n_lgc, "leaving-group connection");
      return t.lgc.scalar();
    case ExplainTask::Overall: {
      LossWeights w;
      const auto& tw = model.params.task_weights;
      if (tw.size() == 4) w = {tw[0], tw[1], tw[2], tw[3]};
      return weighted_total(tape, t, w).scalar();
    }
  }
  return 0.0;
}

ContributionGraph apex_contributions(const Model& model, const TrainingExample& ex, ExplainTask task,
                                     const ApexOptions& opts) {
  ContributionGraph out;
  out.task = task;
  out.base_loss = task_loss(model, ex, task, -1, opts);
  if (!(out.base_loss > kDegenerateLoss)) {
    throw DegenerateLoss("unmasked " + std::string(explain_task_name(task)) + " loss of " + ex.record_id +
                         " is too small for change rates");
  }
  const int n = ex.features.n;
  out.masked_loss.resize(static_cast<std::size_t>(n));
  out.score.resize(static_cast<std::size_t>(n));
  for (int v = 0; v < n; ++v) {
    const double l = task_loss(model, ex, task, v, opts);
    out.masked_loss[static_cast<std::size_t>(v)] = l;
    out.score[static_cast<std::size_t>(v)] = (l - out.base_loss) / out.base_loss;
  }
  return out;
}

ContributionGraph apex_contributions(const Model& model, const ReactionRecord& record, ExplainTask task,
                                     const ApexOptions& opts) {
  return apex_contributions(model, explain_example(model, record), task, opts);
}

std::vector<double> soft_label(const std::vector<double>& contribution) {
  std::vector<double> w(contribution.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += (w[i] = std::max(0.0, contribution[i]));
  if (total > 0.0) {
    for (double& x : w) x /= total;
  } else if (!w.empty()) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
  }
  return w;
}

TypeTraceResult reaction_type_trace(const Model& model, const ReactionRecord& record, ExplainTask task,
                                    const ApexOptions& opts) {
  if (!model.params.config.type_known) throw ModeError("model was trained without reaction types");
  const TrainingExample ex = explain_example(model, record);
  TypeTraceResult out;
  out.contributions = Eigen::MatrixXd::Zero(ex.features.n, kNumReactionTypes);
  for (int t = 1; t <= kNumReactionTypes; ++t) {
    ApexOptions o = opts;
    o.reaction_type = t;
    const auto c = apex_contributions(model, ex, task, o);
    for (int v = 0; v < ex.features.n; ++v) out.contributions(v, t - 1) = c.score[static_cast<std::size_t>(v)];
  }
  for (int v = 0; v < ex.features.n; ++v) {
    std::vector<double> row(kNumReactionTypes);
    for (int t = 0; t < kNumReactionTypes; ++t) row[static_cast<std::size_t>(t)] = out.contributions(v, t);
    out.hard_label.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) + 1);
    out.soft_label.push_back(soft_label(row));
  }
  return out;
}

double rv_coefficient(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw std::invalid_argument("RV needs equally sized matrices");
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  const double xx = xc.squaredNorm(), yy = yc.squaredNorm();
  if (xx == 0.0 || yy == 0.0) return 0.0;
  const double rv = (xc.array() * yc.array()).sum() / std::sqrt(xx * yy);
  return std::clamp(rv, -1.0, 1.0);
}

const char* head_class_name(HeadClass c) {
  switch (c) {
    case HeadClass::GlobalDominated: return "global-dominated";
    case HeadClass::LocalDominated: return "local-dominated";
    case HeadClass::Mixed: return "mixed";
  }
  return "?";
}

HeadClass classify_rv(double rv) {
  if (rv > kGlobalRv) return HeadClass::GlobalDominated;
  if (rv < kLocalRv) return HeadClass::LocalDominated;
  return HeadClass::Mixed;
}

HeatmapReport attention_heatmaps(const MolGraph& molecule, const Model& model, const std::string& encoder) {
  const auto& cfg = model.params.config;
  HeatmapReport report;
  report.encoder = encoder.empty() ? encoder_prefix(cfg, Task::Rcp) : encoder;
  const auto prefixes = encoder_prefixes(cfg);
  if (std::find(prefixes.begin(), prefixes.end(), report.encoder) == prefixes.end()) {
    throw ConfigError("no encoder named '" + report.encoder + "'");
  }
  const GraphFeatures f = GraphFeatures::from_graph(molecule, cfg.k_r);
  ad::Tape tape;
  ParamSet ps(tape, model.params, false);
  EncodeOptions eo;
  eo.prefix = report.encoder;
  const Eigen::MatrixXd bias = attention_bias(ps, f, eo).value();
  const BiasItems items = attention_bias_items(ps, f, eo);
  const int side = f.n + 1;
  for (int h = 0; h < cfg.n_head; ++h) {
    HeadHeatmap hm;
    hm.head = h;
    hm.bias = bias.middleRows(static_cast<Eigen::Index>(h) * side, side);
    hm.global = items.global.valid() ? Eigen::MatrixXd(items.global.value().middleRows(static_cast<Eigen::Index>(h) * side, side))
                                     : Eigen::MatrixXd::Zero(side, side);
    hm.rv = items.global.valid() ? rv_coefficient(hm.bias, hm.global) : 0.0;
    hm.cls = classify_rv(hm.rv);
    report.heads.push_back(std::move(hm));
  }
  std::stable_sort(report.heads.begin(), report.heads.end(),
                   [](const HeadHeatmap& a, const HeadHeatmap& b) { return a.rv > b.rv; });
  return report;
}

void save_heatmaps(const HeatmapReport& report, const std::filesystem::path& path) {
  ModelParams dump;
  for (const auto& h : report.heads) {
    dump.tensors["head" + std::to_string(h.head) + ".bias"] = h.bias;
    dump.tensors["head" + std::to_string(h.head) + ".global"] = h.global;
  }
  round_to_float(dump);
  save_checkpoint(dump, path);
}

}  // namespace retrograph
