#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "retrograph/error.hpp"
#include "retrograph/explain.hpp"
#include "support/memorized.hpp"
#include "support/oracles.hpp"

using namespace retrograph;

namespace {

const ReactionRecord& record(const std::string& id) {
  for (const auto& r : fixture::mini_corpus())
    if (r.record_id == id) return r;
  throw std::out_of_range(id);
}

// A record with a single-gate leaving group (acyl chloride amide coupling).
const ReactionRecord& gated() { return record("mini-01"); }

Model small_model(bool type_known, std::uint64_t seed = 3) {
  ModelConfig mc;
  mc.d = 16;
  mc.n_head = 2;
  mc.d_k = 8;
  mc.layers = 1;
  mc.type_known = type_known;
  mc.seed = seed;
  Model m;
  m.vocab = LeavingGroupVocab::build(fixture::mini_corpus(), mc.k);
  mc.vocab_size = m.vocab.size();
  mc.max_gates = std::max(1, m.vocab.max_gates());
  m.params = init_params(mc);
  return m;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  return true;
}

}  // namespace

TEST(ExplainTask, Names) {
  for (auto t : {ExplainTask::Rcp, ExplainTask::Lgm, ExplainTask::Lgc, ExplainTask::Overall})
    EXPECT_EQ(parse_explain_task(explain_task_name(t)), t);
  EXPECT_THROW(parse_explain_task("bonds"), ConfigError);
}

TEST(Apex, ConstantLossGivesZeroScores) {
  // All-zero parameters make every head output a constant, so no mask can move the loss.
  Model m = small_model(false);
  for (auto& [name, t] : m.params.tensors) t.setZero();
  const auto n = static_cast<std::size_t>(gated().product.size());
  for (auto task : {ExplainTask::Rcp, ExplainTask::Lgm, ExplainTask::Lgc, ExplainTask::Overall}) {
    const auto c = apex_contributions(m, gated(), task);
    ASSERT_EQ(c.score.size(), n) << explain_task_name(task);
    EXPECT_GT(c.base_loss, kDegenerateLoss);
    for (double s : c.score) EXPECT_EQ(s, 0.0) << explain_task_name(task);
  }
}

TEST(Apex, OneScorePerAtomAndScoreIsChangeRate) {
  const Model m = small_model(false);
  const auto c = apex_contributions(m, gated(), ExplainTask::Overall);
  ASSERT_EQ(c.score.size(), static_cast<std::size_t>(gated().product.size()));
  bool moved = false;
  for (std::size_t v = 0; v < c.score.size(); ++v) {
    EXPECT_EQ(c.score[v], (c.masked_loss[v] - c.base_loss) / c.base_loss);
    moved = moved || c.score[v] != 0.0;
  }
  EXPECT_TRUE(moved);
}

TEST(Apex, DeterministicAcrossCallsAndReload) {
  const Model& m = fixture::memorized_model();
  for (auto task : {ExplainTask::Rcp, ExplainTask::Overall}) {
    const auto a = apex_contributions(m, gated(), task);
    const auto b = apex_contributions(m, gated(), task);
    EXPECT_TRUE(bitwise_equal(a.score, b.score));
    const Model reloaded = load_model(std::filesystem::path(RETROGRAPH_CACHE_DIR) / "memorized.ckpt");
    EXPECT_TRUE(bitwise_equal(a.score, apex_contributions(reloaded, gated(), task).score));
  }
}

TEST(Apex, PermutedAtomOrderGivesPermutedScores) {
  // Re-evaluation on a relabelled product runs every sum in a different order.
  const Model m = small_model(false, 11);
  std::mt19937 rng(5);
  for (const char* id : {"mini-01", "mini-09", "mini-21"}) {
    ReactionRecord r = record(id);
    const auto base = apex_contributions(m, r, ExplainTask::Overall);
    std::vector<int> perm;
    r.product = oracle::shuffled(r.product, rng, &perm);
    const auto moved = apex_contributions(m, r, ExplainTask::Overall);
    EXPECT_NEAR(moved.base_loss, base.base_loss, 1e-8 * base.base_loss);
    for (std::size_t v = 0; v < base.score.size(); ++v)
      EXPECT_NEAR(moved.score[static_cast<std::size_t>(perm[v])], base.score[v], 1e-8) << id << " atom " << v;
  }
}

TEST(Apex, MaskedLossMatchesBatchPath) {
  const Model m = small_model(false, 12);
  const auto ex = explain_example(m, gated());
  const auto lgs = LeavingGroupFeatures::from_vocab(m.vocab, m.params.config.k_r);
  for (int v : {-1, 0, 3}) {
    ad::Tape tape;
    ParamSet ps(tape, m.params, false);
    LossOptions lo;
    lo.mask_atom = v;
    const auto terms = batch_losses(ps, {&ex}, lgs, lo);
    EXPECT_NEAR(task_loss(m, ex, ExplainTask::Lgm, v), terms.lg.scalar(), 1e-12);
    EXPECT_NEAR(task_loss(m, ex, ExplainTask::Rcp, v), terms.bond.scalar() + terms.hydrogen.scalar(), 1e-12);
  }
}

TEST(Apex, OverallUsesFrozenTaskWeights) {
  Model m = small_model(false, 13);
  const auto ex = explain_example(m, gated());
  m.params.task_weights = {0.5, 0.25, 2.0, 0.0};
  const double rcp_b = [&] {
    Model only = m;
    only.params.task_weights = {1.0, 0.0, 0.0, 0.0};
    return task_loss(only, ex, ExplainTask::Overall);
  }();
  const double h = task_loss(m, ex, ExplainTask::Rcp) - rcp_b;
  EXPECT_NEAR(task_loss(m, ex, ExplainTask::Overall), 0.5 * rcp_b + 0.25 * h + 2.0 * task_loss(m, ex, ExplainTask::Lgm),
              1e-12);
}

TEST(Apex, DegenerateLossIsReported) {
  Model m = small_model(false);
  const auto ex = explain_example(m, gated());
  m.params.at("lgm.b")(0, ex.lg_id) = 1e4;
  ApexOptions o;
  o.contrastive = false;
  EXPECT_THROW(apex_contributions(m, ex, ExplainTask::Lgm, o), DegenerateLoss);
}

TEST(Apex, UnsupervisedTaskIsLabelError) {
  const Model m = small_model(false);
  // Ketone reduction: no leaving group, hence nothing to connect.
  const auto& r = record("mini-29");
  ASSERT_EQ(explain_example(m, r).lg_id, 0);
  EXPECT_THROW(apex_contributions(m, r, ExplainTask::Lgc), LabelError);
  EXPECT_NO_THROW(apex_contributions(m, r, ExplainTask::Rcp));
}

TEST(SoftLabel, ClampsAndNormalizes) {
  const auto w = soft_label({0.5, -1.0, 1.5, 0.0});
  EXPECT_DOUBLE_EQ(w[0], 0.25);
  EXPECT_EQ(w[1], 0.0);
  EXPECT_DOUBLE_EQ(w[2], 0.75);
  const auto u = soft_label({-1.0, 0.0});
  EXPECT_EQ(u[0], 0.5);
  EXPECT_EQ(u[1], 0.5);
}

TEST(TypeTrace, RequiresTypeKnownModel) {
  EXPECT_THROW(reaction_type_trace(small_model(false), gated(), ExplainTask::Overall), ModeError);
}

TEST(TypeTrace, LabelsAndForcedIdenticalTypes) {
  Model m = small_model(true, 21);
  auto& types = m.params.at("enc.type");
  types.row(4) = types.row(1);  // types 2 and 5
  const auto tr = reaction_type_trace(m, gated(), ExplainTask::Overall);
  const int n = gated().product.size();
  ASSERT_EQ(tr.contributions.rows(), n);
  ASSERT_EQ(tr.contributions.cols(), kNumReactionTypes);
  for (int v = 0; v < n; ++v) {
    EXPECT_EQ(tr.contributions(v, 1), tr.contributions(v, 4));
    Eigen::Index best;
    tr.contributions.row(v).maxCoeff(&best);
    EXPECT_EQ(tr.hard_label[static_cast<std::size_t>(v)], static_cast<int>(best) + 1);
    double sum = 0.0;
    for (double w : tr.soft_label[static_cast<std::size_t>(v)]) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
  // Distinct types must actually change something.
  EXPECT_NE(tr.contributions.col(0), tr.contributions.col(2));
}

TEST(Rv, IdentitySymmetryAndRange) {
  std::mt19937 rng(3);
  std::normal_distribution<double> z;
  for (int trial = 0; trial < 100; ++trial) {
    const int r = 2 + trial % 7, c = 2 + trial % 5;
    Eigen::MatrixXd x(r, c), y(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        x(i, j) = z(rng);
        y(i, j) = z(rng);
      }
    EXPECT_NEAR(rv_coefficient(x, x), 1.0, 1e-12);
    EXPECT_NEAR(rv_coefficient(x, y), rv_coefficient(y, x), 1e-12);
    const double v = rv_coefficient(x, y);
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
    // Column shifts vanish under centering; positive scaling is irrelevant.
    Eigen::MatrixXd shifted = 3.0 * x;
    shifted.rowwise() += Eigen::RowVectorXd::LinSpaced(c, -2.0, 5.0);
    EXPECT_NEAR(rv_coefficient(shifted, y), v, 1e-12);
    EXPECT_NEAR(rv_coefficient(-x, x), -1.0, 1e-12);
  }
  EXPECT_EQ(rv_coefficient(Eigen::MatrixXd::Ones(3, 3), Eigen::MatrixXd::Identity(3, 3)), 0.0);
  EXPECT_THROW(rv_coefficient(Eigen::MatrixXd::Zero(2, 3), Eigen::MatrixXd::Zero(3, 2)), std::invalid_argument);
}

TEST(Rv, Classes) {
  EXPECT_EQ(classify_rv(0.95), HeadClass::GlobalDominated);
  EXPECT_EQ(classify_rv(0.90), HeadClass::Mixed);
  EXPECT_EQ(classify_rv(0.55), HeadClass::Mixed);
  EXPECT_EQ(classify_rv(0.10), HeadClass::Mixed);
  EXPECT_EQ(classify_rv(0.05), HeadClass::LocalDominated);
  EXPECT_EQ(classify_rv(-0.5), HeadClass::LocalDominated);
}

TEST(Heatmaps, SortedPerHeadReport) {
  const Model& m = fixture::memorized_model();
  const auto rep = attention_heatmaps(gated().product, m);
  ASSERT_EQ(rep.heads.size(), static_cast<std::size_t>(m.params.config.n_head));
  const auto side = gated().product.size() + 1;
  std::vector<int> seen;
  for (std::size_t i = 0; i < rep.heads.size(); ++i) {
    const auto& h = rep.heads[i];
    EXPECT_EQ(h.bias.rows(), side);
    EXPECT_GE(h.rv, -1.0);
    EXPECT_LE(h.rv, 1.0);
    EXPECT_EQ(h.cls, classify_rv(h.rv));
    EXPECT_NEAR(h.rv, rv_coefficient(h.global, h.bias), 1e-12);
    if (i) EXPECT_GE(rep.heads[i - 1].rv, h.rv);
    seen.push_back(h.head);
  }
  std::sort(seen.begin(), seen.end());
  for (int h = 0; h < m.params.config.n_head; ++h) EXPECT_EQ(seen[static_cast<std::size_t>(h)], h);
  int counts[3] = {0, 0, 0};
  for (const auto& h : rep.heads) ++counts[static_cast<int>(h.cls)];
  RecordProperty("global", counts[0]);
  RecordProperty("local", counts[1]);
  RecordProperty("mixed", counts[2]);
  EXPECT_THROW(attention_heatmaps(gated().product, m, "enc_lgm"), ConfigError);
}

TEST(Heatmaps, MaskedItems) {
  Model global_off = small_model(false);
  global_off.params.config.mask_global = true;
  for (const auto& h : attention_heatmaps(gated().product, global_off).heads) {
    EXPECT_EQ(h.rv, 0.0);
    EXPECT_EQ(h.cls, HeadClass::LocalDominated);
    EXPECT_TRUE(h.global.isZero());
  }
  Model local_off = small_model(false);
  local_off.params.config.mask_local = true;
  for (const auto& h : attention_heatmaps(gated().product, local_off).heads) {
    EXPECT_NEAR(h.rv, 1.0, 1e-12);
    EXPECT_EQ(h.cls, HeadClass::GlobalDominated);
  }
}

TEST(Heatmaps, DumpRoundTrips) {
  const auto rep = attention_heatmaps(gated().product, small_model(false));
  const auto path = std::filesystem::temp_directory_path() / "retrograph_heatmaps_test.ckpt";
  save_heatmaps(rep, path);
  const auto back = load_checkpoint(path);
  std::filesystem::remove(path);
  for (const auto& h : rep.heads) {
    const auto& b = back.at("head" + std::to_string(h.head) + ".bias");
    EXPECT_TRUE(b.isApprox(h.bias, 1e-6));
  }
}
