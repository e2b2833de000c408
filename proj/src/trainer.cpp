#include "retrograph/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "retrograph/error.hpp"

namespace retrograph {

void TrainConfig::validate() const {
  if (epochs < 0 || max_steps < 0) throw ConfigError("epochs and max_steps must be non-negative");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
  if (!(tau_weights > 0.0) || !(tau_contrastive > 0.0)) throw ConfigError("temperatures must be positive");
  if (k_r < 0) throw ConfigError("k_r must be non-negative");
  if (k < 1) throw ConfigError("k must be positive");
}

ModelConfig model_config_for(ModelConfig base, const TrainConfig& train) {
  base.k_r = train.k_r;
  base.k = train.k;
  base.type_known = train.reaction_type_known;
  base.separate_encoders = train.ablations.no_jl;
  base.mask_local = train.ablations.mask_local;
  base.mask_global = train.ablations.mask_global;
  base.tau_contrastive = train.tau_contrastive;
  base.seed = train.seed;
  return base;
}

LossHistory::LossHistory(int tasks)
    : initial_(static_cast<std::size_t>(tasks), 1.0),
      prev_(static_cast<std::size_t>(tasks), 1.0),
      prev2_(static_cast<std::size_t>(tasks), 1.0),
      count_(static_cast<std::size_t>(tasks), 0) {}

void LossHistory::seed_initial(const std::vector<double>& losses, const std::vector<bool>& present) {
  for (std::size_t i = 0; i < initial_.size(); ++i) {
    if (present[i] && count_[i] == 0) initial_[i] = std::max(losses[i], kLossEpsilon);
  }
}

void LossHistory::record(const std::vector<double>& losses, const std::vector<bool>& present) {
  for (std::size_t i = 0; i < initial_.size(); ++i) {
    if (!present[i]) continue;
    const double l = std::max(losses[i], kLossEpsilon);
    if (count_[i] == 0) initial_[i] = l;
    prev2_[i] = prev_[i];
    prev_[i] = l;
    ++count_[i];
  }
}

double LossHistory::rate(int i) const {
  const auto k = static_cast<std::size_t>(i);
  return count_[k] < 2 ? 1.0 : prev_[k] / prev2_[k];
}

std::vector<double> adaptive_factors(const LossHistory& h, double tau) {
  std::vector<double> z(static_cast<std::size_t>(h.tasks()));
  for (int i = 0; i < h.tasks(); ++i) z[static_cast<std::size_t>(i)] = h.rate(i) / tau;
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& v : z) total += (v = std::exp(v - m));
  for (double& v : z) v /= total;
  return z;
}

std::vector<double> adaptive_weights(const LossHistory& h, double tau) {
  auto w = adaptive_factors(h, tau);
  for (int i = 0; i < h.tasks(); ++i) w[static_cast<std::size_t>(i)] /= h.initial(i);
  return w;
}

LossWeights expand_weights(const std::vector<double>& w, bool fuse_rcp) {
  if (fuse_rcp) return {w.at(0), w.at(0), w.at(1), w.at(2)};
  return {w.at(0), w.at(1), w.at(2), w.at(3)};
}

Trainer::Trainer(ModelParams params, const LeavingGroupVocab& vocab, TrainConfig config)
    : params_(std::move(params)), config_(config), history_(config.task_count()) {
  config_.validate();
  if (!(model_config_for(params_.config, config_) == params_.config)) {
    throw ConfigError("model configuration does not match the training switches");
  }
  if (vocab.size() > params_.config.vocab_size) throw ConfigError("vocabulary larger than the model's LGM output");
  lgs_ = LeavingGroupFeatures::from_vocab(vocab, params_.config.k_r);
}

StepResult Trainer::step(const std::vector<const TrainingExample*>& batch) {
  ad::Tape tape;
  ParamSet ps(tape, params_, true);
  LossOptions lo;
  lo.contrastive = !config_.ablations.no_cl;
  const LossTerms terms = batch_losses(ps, batch, lgs_, lo);

  std::vector<ad::Var> tasks;
  std::vector<bool> present;
  const auto push = [&](std::vector<std::pair<int, ad::Var>> parts) {
    std::vector<ad::Var> live;
    for (const auto& [n, v] : parts)
      if (n > 0) live.push_back(v);
    present.push_back(!live.empty());
    if (live.empty()) tasks.push_back({});
    else tasks.push_back(live.size() == 1 ? live[0] : ad::add(live[0], live[1]));
  };
  if (config_.fuse_rcp) {
    push({{terms.n_bond, terms.bond}, {terms.n_hydrogen, terms.hydrogen}});
  } else {
    push({{terms.n_bond, terms.bond}});
    push({{terms.n_hydrogen, terms.hydrogen}});
  }
  push({{terms.n_lg, terms.lg}});
  push({{terms.n_lgc, terms.lgc}});

  std::vector<double> values(tasks.size(), 0.0);
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (present[i]) values[i] = tasks[i].scalar();

  std::vector<double> weights(tasks.size(), 1.0);
  if (!config_.ablations.no_sa) {
    history_.seed_initial(values, present);
    weights = adaptive_weights(history_, config_.tau_weights);
  }

  std::vector<ad::Var> live;
  std::vector<double> live_w;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (!present[i]) continue;
    live.push_back(tasks[i]);
    live_w.push_back(weights[i]);
  }
  StepResult r;
  r.losses = breakdown(terms);
  r.weights = weights;
  if (live.empty()) throw LabelError("batch supervises no task");
  const ad::Var total = ad::weighted_sum(live, live_w);
  r.total = total.scalar();
  if (!std::isfinite(r.total)) throw NumericsError("non-finite training loss");
  tape.backward(total);
  auto grads = ps.gradients();

  double norm2 = 0.0;
  for (const auto& [name, g] : grads) norm2 += g.squaredNorm();
  if (!std::isfinite(norm2)) throw NumericsError("non-finite gradient");
  const double norm = std::sqrt(norm2);
  const double shrink = config_.clip_norm > 0.0 && norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
  for (auto& [name, t] : params_.tensors) {
    auto& v = velocity_[name];
    if (v.size() == 0) v = Eigen::MatrixXd::Zero(t.rows(), t.cols());
    v = config_.momentum * v + shrink * grads.at(name);
    t -= config_.learning_rate * v;
  }
  round_to_float(params_);

  history_.record(values, present);
  const auto lw = expand_weights(weights, config_.fuse_rcp);
  params_.task_weights = {lw.bond, lw.hydrogen, lw.lg, lw.lgc};
  r.step = ++steps_;
  return r;
}

std::vector<StepResult> Trainer::train(const std::vector<TrainingExample>& data, std::ostream* metrics) {
  std::vector<StepResult> out;
  if (data.empty()) return out;
  std::mt19937_64 rng(config_.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // With max_steps set, epochs repeat until the step budget is spent.
  for (int epoch = 0; config_.max_steps > 0 || epoch < config_.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config_.batch_size)) {
      if (config_.max_steps > 0 && steps_ >= config_.max_steps) return out;
      std::vector<const TrainingExample*> batch;
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config_.batch_size));
      for (std::size_t i = start; i < end; ++i) batch.push_back(&data[order[i]]);
      out.push_back(step(batch));
      if (metrics) *metrics << metrics_line(out.back()) << '\n';
    }
  }
  return out;
}

FitResult fit(const std::vector<ReactionRecord>& corpus, ModelConfig base, const TrainConfig& config,
              std::ostream* metrics) {
  FitResult out;
  out.model.vocab = LeavingGroupVocab::build(corpus, config.k);
  base.vocab_size = out.model.vocab.size();
  base.max_gates = std::max(1, out.model.vocab.max_gates());
  const ModelConfig mc = model_config_for(base, config);
  const auto examples = make_examples(corpus, out.model.vocab, mc, &out.skipped);
  Trainer trainer(init_params(mc), out.model.vocab, config);
  out.steps = trainer.train(examples, metrics);
  out.model.params = trainer.params();
  return out;
}

std::string metrics_line(const StepResult& r) {
  std::ostringstream s;
  s.precision(9);
  s << "step=" << r.step << "\tL_B=" << r.losses.bond << "\tL_H=" << r.losses.hydrogen << "\tL_lg=" << r.losses.lg
    << "\tL_lgc=" << r.losses.lgc;
  for (std::size_t i = 0; i < r.weights.size(); ++i) s << "\tw" << i + 1 << '=' << r.weights[i];
  s << "\ttotal=" << r.total;
  return s.str();
}

}  // namespace retrograph
