#include <gtest/gtest.h>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "retrograph/encoder.hpp"
#include "retrograph/error.hpp"
#include "support/fd.hpp"
#include "support/oracles.hpp"

using namespace retrograph;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d = 16;
  c.d_k = 4;
  c.n_head = 4;
  c.layers = 2;
  c.k_r = 3;
  c.vocab_size = 5;
  c.seed = 7;
  return c;
}

struct Encoded {
  Eigen::MatrixXd node_reps, graph_rep;
  std::vector<std::vector<Eigen::MatrixXd>> attention;
};

Encoded run(const ModelParams& p, const MolGraph& g, EncodeOptions opts = {}) {
  ad::Tape tape;
  ParamSet ps(tape, p, false);
  auto out = encode(ps, GraphFeatures::from_graph(g, p.config.k_r), opts);
  return {out.node_reps.value(), out.graph_rep.value(), std::move(out.attention)};
}

Eigen::MatrixXd bias_of(const ModelParams& p, const MolGraph& g, EncodeOptions opts = {}) {
  ad::Tape tape;
  ParamSet ps(tape, p, false);
  return attention_bias(ps, GraphFeatures::from_graph(g, p.config.k_r), opts).value();
}

std::vector<std::string> sample_molecules(std::size_t count) {
  std::ifstream in(std::string(RETROGRAPH_DATA_DIR) + "/molecules.smi");
  std::vector<std::string> out;
  std::string line;
  while (out.size() < count && std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (parse_smiles(line).size() <= 24) out.push_back(line);
    } catch (const Error&) {
    }
  }
  return out;
}

std::string rewrite_version(std::string bytes, std::uint32_t version) {
  std::memcpy(bytes.data() + 4, &version, 4);
  const std::size_t body = bytes.size() - 4;
  const auto crc = static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), body));
  std::memcpy(bytes.data() + body, &crc, 4);
  return bytes;
}

}  // namespace

TEST(ModelConfig, RejectsInconsistentHeads) {
  ModelConfig c;
  c.d = 64;
  c.n_head = 8;
  c.d_k = 7;
  EXPECT_THROW(init_params(c), ConfigError);
  c.d_k = 8;
  EXPECT_NO_THROW(init_params(c));
}

TEST(ModelConfig, TextRoundTrip) {
  ModelConfig c = small_config();
  c.type_known = true;
  c.tau_contrastive = 0.37;
  EXPECT_EQ(ModelConfig::from_text(c.to_text()), c);
  EXPECT_THROW(ModelConfig::from_text("bogus=1\n"), FormatError);
}

TEST(InitParams, DeterministicGivenSeed) {
  const auto a = serialize_checkpoint(init_params(small_config()));
  const auto b = serialize_checkpoint(init_params(small_config()));
  EXPECT_EQ(a, b);
  ModelConfig other = small_config();
  other.seed = 8;
  EXPECT_NE(a, serialize_checkpoint(init_params(other)));
}

TEST(InitParams, RbfSpreadAndFiniteTables) {
  const auto p = init_params(small_config());
  const auto& mean = p.at("enc.bias.rbf_mean");
  EXPECT_EQ(mean(0, 0), 0.0);
  EXPECT_EQ(mean(0, 3), kDistInf);
  for (const auto& [name, t] : p.tensors) EXPECT_TRUE(t.allFinite()) << name;
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto p = init_params(small_config());
  p.task_weights = {0.25, 1.0 / 3.0, 0.125};
  const auto path = std::filesystem::temp_directory_path() / "retrograph_ckpt_roundtrip.bin";
  save_checkpoint(p, path);
  const auto q = load_checkpoint(path);
  EXPECT_EQ(q.config, p.config);
  EXPECT_EQ(q.task_weights, p.task_weights);
  ASSERT_EQ(q.tensors.size(), p.tensors.size());
  for (const auto& [name, t] : p.tensors) {
    const auto& u = q.at(name);
    ASSERT_EQ(u.rows(), t.rows());
    ASSERT_EQ(u.cols(), t.cols());
    EXPECT_EQ(std::memcmp(u.data(), t.data(), sizeof(double) * static_cast<std::size_t>(t.size())), 0) << name;
  }
  EXPECT_EQ(serialize_checkpoint(q), serialize_checkpoint(p));
}

TEST(Checkpoint, TruncatedOrCorruptIsChecksumError) {
  const auto bytes = serialize_checkpoint(init_params(small_config()));
  for (std::size_t cut : {std::size_t{0}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, cut)), ChecksumError) << cut;
  }
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint(flipped), ChecksumError);
}

TEST(Checkpoint, VersionMismatch) {
  const auto bytes = serialize_checkpoint(init_params(small_config()));
  EXPECT_THROW(deserialize_checkpoint(rewrite_version(bytes, kCheckpointVersion + 1)), VersionError);
}

TEST(Checkpoint, RefusesDifferentHopRadius) {
  const auto path = std::filesystem::temp_directory_path() / "retrograph_ckpt_kr.bin";
  ModelConfig c = small_config();
  c.k_r = 4;
  save_checkpoint(init_params(c), path);
  ModelConfig session = c;
  session.k_r = 2;
  EXPECT_THROW(load_checkpoint(path, &session), ConfigError);
  EXPECT_NO_THROW(load_checkpoint(path, &c));
}

TEST(Rbf, ClosedForm) {
  const double oracle = std::exp(-0.5) / std::sqrt(2.0 * std::acos(-1.0));
  EXPECT_NEAR(rbf(1.0, 0.0, 1.0), oracle, 1e-15);
  EXPECT_NEAR(rbf(1.0, 0.0, 1.0), 0.24197, 1e-5);
  EXPECT_DOUBLE_EQ(rbf(3.0, 3.0, 2.0), 1.0 / (std::sqrt(2.0 * std::acos(-1.0)) * 2.0));
  for (double x : {0.3, 1.7, 5.0}) EXPECT_DOUBLE_EQ(rbf(4.0 + x, 4.0, 1.3), rbf(4.0 - x, 4.0, 1.3));
  // std below the floor is clamped.
  EXPECT_DOUBLE_EQ(rbf(0.0, 0.0, 0.0), rbf(0.0, 0.0, kRbfStdFloor));
}

TEST(EmbedNodes, FeatureLookups) {
  auto c = small_config();
  c.type_known = true;
  const auto p = init_params(c);
  ad::Tape tape;
  ParamSet ps(tape, p, false);
  const auto ethane = GraphFeatures::from_graph(parse_smiles("CC"), c.k_r);
  const auto h = embed_nodes(ps, ethane, {}).value();
  EXPECT_EQ(h.row(0), h.row(1));

  EncodeOptions typed;
  typed.reaction_type = 3;
  const auto ht = embed_nodes(ps, ethane, typed).value();
  EXPECT_EQ(ht.topRows(2), h.topRows(2));
  EXPECT_NE(ht.row(2), h.row(2));

  const auto methane = embed_nodes(ps, GraphFeatures::from_graph(parse_smiles("C"), c.k_r), {}).value();
  const auto anion = embed_nodes(ps, GraphFeatures::from_graph(parse_smiles("[CH3-]"), c.k_r), {}).value();
  EXPECT_NE(methane.row(0), anion.row(0));
}

TEST(EmbedNodes, FeatureClipping) {
  const auto f = GraphFeatures::from_graph(parse_smiles("[C+4]"), 2);
  EXPECT_EQ(f.charge[0], 6);
  EXPECT_EQ(f.hcount[0], 0);
  const auto g = GraphFeatures::from_graph(parse_smiles("*C"), 2);
  EXPECT_EQ(g.element[0], 0);
  EXPECT_EQ(g.degree[1], 4);
}

TEST(AttentionBias, EmptyWhenLocalRadiusZeroAndGlobalMasked) {
  auto c = small_config();
  c.k_r = 0;
  c.mask_global = true;
  const auto p = init_params(c);
  EXPECT_TRUE(bias_of(p, parse_smiles("CC(=O)O")).isZero(0.0));
}

TEST(AttentionBias, PathHopTwoEntry) {
  auto c = small_config();
  c.mask_global = true;
  auto p = init_params(c);
  for (auto& [name, t] : p.tensors)
    if (name.find(".bias.local.") != std::string::npos) t.setZero();
  auto& table = p.at("enc.bias.local.s0.r2");
  for (int h = 0; h < c.n_head; ++h) table(1, h) = 0.5 + h;
  const auto b = bias_of(p, parse_smiles("CCC"));
  for (int h = 0; h < c.n_head; ++h) {
    EXPECT_EQ(b(h * 4 + 0, 2), table(1, h));
    EXPECT_EQ(b(h * 4 + 2, 0), table(1, h));
  }
}

TEST(AttentionBias, VirtualEdgeOnSuperPairs) {
  auto p = init_params(small_config());
  auto& virt = p.at("enc.bias.virtual");
  for (int h = 0; h < 4; ++h) virt(0, h) = -0.25 * (h + 1);
  const auto b = bias_of(p, parse_smiles("CCO"));
  for (int h = 0; h < 4; ++h) {
    for (int v = 0; v < 4; ++v) {
      EXPECT_EQ(b(h * 4 + 3, v), virt(0, h));
      EXPECT_EQ(b(h * 4 + v, 3), virt(0, h));
    }
  }
}

TEST(AttentionBias, AblationMasksIsolateItems) {
  const auto mols = sample_molecules(20);
  ASSERT_FALSE(mols.empty());
  auto local_cfg = small_config();
  local_cfg.mask_local = true;
  auto global_cfg = small_config();
  global_cfg.mask_global = true;
  const auto pl = init_params(local_cfg);
  const auto pg = init_params(global_cfg);
  for (const auto& s : mols) {
    const auto g = parse_smiles(s);
    const int n = g.size();
    const int side = n + 1;
    const auto dist = topo_distances(g);
    const auto bl = bias_of(pl, g);
    const auto bg = bias_of(pg, g);
    for (int h = 0; h < 4; ++h) {
      for (int u = 0; u < side; ++u) {
        for (int v = 0; v < side; ++v) {
          const bool atoms = u < n && v < n;
          const double rbf_term =
              atoms ? rbf(dist(u, v), pl.at("enc.bias.rbf_mean")(0, h), pl.at("enc.bias.rbf_std")(0, h)) : 0.0;
          EXPECT_EQ(bl(h * side + u, v), rbf_term);
          double lookup = pg.at("enc.bias.virtual")(0, h);
          if (atoms) {
            lookup = 0.0;
            for (int sense = 0; sense < 6; ++sense) {
              for (int j = 1; j <= pg.config.k_r; ++j) {
                const long w = oracle::walks(g, static_cast<BondSense>(sense), u, v, j);
                const int idx = static_cast<int>(std::min<long>(w, kCountClip));
                lookup += pg.at("enc.bias.local.s" + std::to_string(sense) + ".r" + std::to_string(j))(idx, h);
              }
            }
          }
          EXPECT_NEAR(bg(h * side + u, v), lookup, 1e-12);
        }
      }
    }
  }
}

TEST(AttentionBias, SymmetricOnRandomMolecules) {
  const auto p = init_params(small_config());
  for (const auto& s : sample_molecules(40)) {
    const auto b = bias_of(p, parse_smiles(s));
    const int side = static_cast<int>(b.cols());
    for (int h = 0; h < 4; ++h) {
      const Eigen::MatrixXd block = b.block(h * side, 0, side, side);
      EXPECT_TRUE(block.isApprox(block.transpose(), 1e-14)) << s;
    }
  }
}

TEST(Encode, UniformGraphGivesEqualRows) {
  auto c = small_config();
  c.layers = 1;
  c.mask_local = true;
  c.mask_global = true;
  const auto p = init_params(c);
  const auto out = run(p, parse_smiles("C1CC1"));
  const auto& h = out.node_reps;
  EXPECT_TRUE(h.row(0).isApprox(h.row(1), 1e-12));
  EXPECT_TRUE(h.row(0).isApprox(h.row(2), 1e-12));
}

TEST(Encode, PermutationEquivariance) {
  const auto p = init_params(small_config());
  std::mt19937 rng(5);
  const auto mols = sample_molecules(10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto g = parse_smiles(mols[static_cast<std::size_t>(trial) % mols.size()]);
    std::vector<int> perm;
    const auto gp = oracle::shuffled(g, rng, &perm);
    const auto a = run(p, g);
    const auto b = run(p, gp);
    for (int v = 0; v < g.size(); ++v) {
      EXPECT_TRUE(a.node_reps.row(v).isApprox(b.node_reps.row(perm[v]), 1e-9));
    }
    EXPECT_TRUE(a.graph_rep.isApprox(b.graph_rep, 1e-9));
  }
}

TEST(Encode, SoftmaxRowsSumToOne) {
  const auto p = init_params(small_config());
  EncodeOptions opts;
  opts.keep_attention = true;
  const auto out = run(p, parse_smiles("c1ccccc1O"), opts);
  ASSERT_EQ(out.attention.size(), 2u);
  for (const auto& layer : out.attention) {
    ASSERT_EQ(layer.size(), 4u);
    for (const auto& a : layer) {
      for (Eigen::Index r = 0; r < a.rows(); ++r) EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-6);
    }
  }
}

TEST(Encode, MaskedOffDiagonalAttendsToSelf) {
  const auto p = init_params(small_config());
  const auto g = parse_smiles("CCN");
  Eigen::MatrixXd mask = Eigen::MatrixXd::Constant(4, 4, kMaskedBias);
  mask.diagonal().setZero();
  EncodeOptions opts;
  opts.keep_attention = true;
  opts.extra_bias = &mask;
  const auto out = run(p, g, opts);
  for (const auto& layer : out.attention)
    for (const auto& a : layer) EXPECT_TRUE(a.isApprox(Eigen::MatrixXd::Identity(4, 4), 1e-12));
}

TEST(Encode, NonFiniteParameterFailsFast) {
  auto p = init_params(small_config());
  p.at("enc.l0.wq")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(run(p, parse_smiles("CCO")), NumericsError);
}

TEST(Encode, MaskAtomZeroesRowAndBias) {
  const auto p = init_params(small_config());
  const auto g = parse_smiles("CC(=O)N");
  EncodeOptions opts;
  opts.mask_atom = 2;
  const auto b = bias_of(p, g, opts);
  const int side = 5;
  for (int h = 0; h < 4; ++h) {
    EXPECT_TRUE(b.row(h * side + 2).isZero(0.0));
    EXPECT_TRUE(b.block(h * side, 2, side, 1).isZero(0.0));
  }
  ad::Tape tape;
  ParamSet ps(tape, p, false);
  const auto h = embed_nodes(ps, GraphFeatures::from_graph(g, 3), opts).value();
  EXPECT_TRUE(h.row(2).isZero(0.0));
}

TEST(Encode, BiasParameterGradientsMatchFiniteDifferences) {
  auto c = small_config();
  c.d = 8;
  c.d_k = 4;
  c.n_head = 2;
  c.layers = 1;
  c.k_r = 2;
  auto p = init_params(c);
  for (auto& [name, t] : p.tensors)
    if (name == "enc.bias.virtual") t.setConstant(0.1);
  const auto feats = GraphFeatures::from_graph(parse_smiles("OC1=CC=CC=C1"), c.k_r);
  const std::vector<std::string> names = {"enc.bias.local.s0.r1", "enc.bias.local.s3.r2", "enc.bias.rbf_mean",
                                          "enc.bias.rbf_std", "enc.bias.virtual", "enc.l0.wq"};
  double worst = 0.0;
  ad::Tape tape;
  ParamSet ps(tape, p, true);
  const auto out = encode(ps, feats, {});
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd w(out.node_reps.rows(), out.node_reps.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = nd(rng);
  const auto loss_of = [&](ad::Tape& t, ad::Var reps) { return ad::sum(ad::mul(reps, t.constant(w))); };
  tape.backward(loss_of(tape, out.node_reps));
  const auto grads = ps.gradients();
  for (const auto& n : names) {
    const auto& analytic = grads.at(n);
    for (Eigen::Index r = 0; r < analytic.rows(); ++r) {
      for (Eigen::Index col = 0; col < analytic.cols(); ++col) {
        auto eval = [&](double delta) {
          ModelParams q = p;
          q.at(n)(r, col) += delta;
          ad::Tape t;
          ParamSet qs(t, q, false);
          return loss_of(t, encode(qs, feats, {}).node_reps).scalar();
        };
        const double numeric = (eval(1e-5) - eval(-1e-5)) / 2e-5;
        const double a = analytic(r, col);
        worst = std::max(worst, std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
      }
    }
  }
  EXPECT_LT(worst, 1e-6);
}
