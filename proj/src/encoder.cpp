#include "retrograph/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "retrograph/error.hpp"

namespace retrograph {

namespace {
constexpr double kInvSqrt2Pi = 0.3989422804014327;
}

void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw NumericsError(std::string("non-finite value in ") + what);
}

GraphFeatures GraphFeatures::from_graph(const MolGraph& g, int k_r, const DistanceProvider& distances) {
  GraphFeatures f;
  f.n = g.size();
  for (int v = 0; v < f.n; ++v) {
    const auto& a = g.atom(v);
    f.element.push_back(std::clamp(a.atomic_number, 0, kElementRows - 1));
    f.charge.push_back(std::clamp(a.formal_charge, -3, 3) + 3);
    f.hcount.push_back(std::min(a.total_h(), kHydrogenRows - 1));
    f.aromatic.push_back(a.aromatic ? 1 : 0);
    f.ring.push_back(g.atom_in_ring(v) ? 1 : 0);
    f.degree.push_back(std::min(g.total_degree(v), kDegreeRows - 1));
  }
  f.counts = adjacency_powers(g, k_r);
  f.dist = distances ? distances(g) : topo_distances(g).cast<double>();
  return f;
}

ParamSet::ParamSet(ad::Tape& tape, const ModelParams& params, bool trainable)
    : tape_(tape), params_(params), trainable_(trainable) {}

ad::Var ParamSet::operator()(const std::string& name) {
  const auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const auto& value = params_.at(name);
  const ad::Var v = trainable_ ? tape_.leaf(value) : tape_.constant(value);
  bound_.emplace(name, v);
  return v;
}

std::map<std::string, Eigen::MatrixXd> ParamSet::gradients() const {
  std::map<std::string, Eigen::MatrixXd> out;
  for (const auto& [name, t] : params_.tensors) {
    const auto it = bound_.find(name);
    out[name] = it == bound_.end() ? Eigen::MatrixXd::Zero(t.rows(), t.cols()) : tape_.grad(it->second.id);
  }
  return out;
}

double rbf(double dist, double mean, double std) {
  const double s = std::max(std, kRbfStdFloor);
  const double z = (dist - mean) / s;
  return std::exp(-0.5 * z * z) * kInvSqrt2Pi / s;
}

namespace {

Eigen::MatrixXd atom_mask_matrix(int rows, int n_head, int atom) {
  // Stacked per-head (N+1)x(N+1) blocks with row/column `atom` zeroed.
  const int side = rows;
  Eigen::MatrixXd m = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(n_head) * side, side);
  for (int h = 0; h < n_head; ++h) {
    m.row(static_cast<Eigen::Index>(h) * side + atom).setZero();
    m.block(static_cast<Eigen::Index>(h) * side, atom, side, 1).setZero();
  }
  return m;
}

ad::Var local_bias(ParamSet& ps, const GraphFeatures& f, const std::string& prefix) {
  const auto& c = ps.config();
  const int n = f.n;
  const int side = n + 1;
  const int heads = c.n_head;
  std::vector<ad::Var> tables;
  std::vector<std::pair<int, int>> table_index;  // (sense, hop)
  for (int s = 0; s < c.k_b; ++s) {
    for (int j = 1; j <= c.k_r; ++j) {
      tables.push_back(ps(prefix + ".bias.local.s" + std::to_string(s) + ".r" + std::to_string(j)));
      table_index.emplace_back(s, j - 1);
    }
  }
  const ad::Var virt = ps(prefix + ".bias.virtual");

  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(heads) * side, side);
  for (std::size_t t = 0; t < tables.size(); ++t) {
    const auto& T = tables[t].value();
    const auto& counts = f.counts[static_cast<std::size_t>(table_index[t].first)]
                                  [static_cast<std::size_t>(table_index[t].second)];
    for (int h = 0; h < heads; ++h) {
      for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) out(h * side + u, v) += T(counts(u, v), h);
      }
    }
  }
  for (int h = 0; h < heads; ++h) {
    const double b = virt.value()(0, h);
    out.block(h * side + n, 0, 1, side).setConstant(b);
    out.block(h * side, n, side, 1).setConstant(b);
  }

  std::vector<int> ids;
  for (const auto& t : tables) ids.push_back(t.id);
  const int virt_id = virt.id;
  std::vector<IntMatrix> counts;
  for (const auto& [s, j] : table_index) {
    counts.push_back(f.counts[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)]);
  }
  bool grad = ps.tape().requires_grad(virt_id);
  for (int id : ids) grad = grad || ps.tape().requires_grad(id);
  return ps.tape().push(std::move(out), grad, [ids, virt_id, counts, n, side, heads](ad::Tape& tape, const ad::Mat& g) {
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (!tape.requires_grad(ids[t])) continue;
      ad::Mat gt = ad::Mat::Zero(kCountClip + 1, heads);
      for (int h = 0; h < heads; ++h) {
        for (int u = 0; u < n; ++u) {
          for (int v = 0; v < n; ++v) gt(counts[t](u, v), h) += g(h * side + u, v);
        }
      }
      tape.accumulate(ids[t], gt);
    }
    if (tape.requires_grad(virt_id)) {
      ad::Mat gv(1, heads);
      for (int h = 0; h < heads; ++h) {
        // Row n and column n of the block; the corner belongs to both.
        gv(0, h) = g.block(h * side + n, 0, 1, side).sum() + g.block(h * side, n, side, 1).sum() -
                   g(h * side + n, n);
      }
      tape.accumulate(virt_id, gv);
    }
  });
}

ad::Var global_bias(ParamSet& ps, const GraphFeatures& f, const std::string& prefix) {
  const auto& c = ps.config();
  const int n = f.n;
  const int side = n + 1;
  const int heads = c.n_head;
  const ad::Var mean = ps(prefix + ".bias.rbf_mean");
  const ad::Var stdv = ps(prefix + ".bias.rbf_std");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(heads) * side, side);
  for (int h = 0; h < heads; ++h) {
    const double m = mean.value()(0, h);
    const double s = stdv.value()(0, h);
    for (int u = 0; u < n; ++u) {
      for (int v = 0; v < n; ++v) out(h * side + u, v) = rbf(f.dist(u, v), m, s);
    }
  }
  const int mid = mean.id;
  const int sid = stdv.id;
  const Eigen::MatrixXd dist = f.dist;
  const bool grad = ps.tape().requires_grad(mid) || ps.tape().requires_grad(sid);
  return ps.tape().push(std::move(out), grad, [mid, sid, dist, n, side, heads](ad::Tape& tape, const ad::Mat& g) {
    ad::Mat gm = ad::Mat::Zero(1, heads);
    ad::Mat gs = ad::Mat::Zero(1, heads);
    for (int h = 0; h < heads; ++h) {
      const double m = tape.value(mid)(0, h);
      const double s_raw = tape.value(sid)(0, h);
      const bool clamped = s_raw < kRbfStdFloor;
      const double s = clamped ? kRbfStdFloor : s_raw;
      for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
          const double x = dist(u, v);
          const double r = rbf(x, m, s);
          const double gg = g(h * side + u, v);
          gm(0, h) += gg * r * (x - m) / (s * s);
          if (!clamped) gs(0, h) += gg * r * ((x - m) * (x - m) / (s * s * s) - 1.0 / s);
        }
      }
    }
    tape.accumulate(mid, gm);
    tape.accumulate(sid, gs);
  });
}

}  // namespace

ad::Var embed_nodes(ParamSet& ps, const GraphFeatures& f, const EncodeOptions& opts) {
  const std::string& p = opts.prefix;
  ad::Var atoms = ad::gather_rows(ps(p + ".embed.element"), f.element);
  atoms = ad::add(atoms, ad::gather_rows(ps(p + ".embed.charge"), f.charge));
  atoms = ad::add(atoms, ad::gather_rows(ps(p + ".embed.hcount"), f.hcount));
  atoms = ad::add(atoms, ad::gather_rows(ps(p + ".embed.aromatic"), f.aromatic));
  atoms = ad::add(atoms, ad::gather_rows(ps(p + ".embed.ring"), f.ring));
  atoms = ad::add(atoms, ad::gather_rows(ps(p + ".embed.degree"), f.degree));
  if (opts.mask_atom >= 0) {
    if (opts.mask_atom >= f.n) throw std::out_of_range("mask_atom out of range");
    ad::Mat keep = ad::Mat::Ones(f.n, ps.config().d);
    keep.row(opts.mask_atom).setZero();
    atoms = ad::mul(atoms, ps.tape().constant(std::move(keep)));
  }
  ad::Var super = ps(p + ".super");
  if (ps.config().type_known && opts.reaction_type) {
    const int t = *opts.reaction_type;
    if (t < 1 || t > kNumReactionTypes) throw std::out_of_range("reaction type must be in 1..10");
    super = ad::add(super, ad::gather_rows(ps(p + ".type"), {t - 1}));
  }
  return ad::concat_rows({atoms, super});
}

BiasItems attention_bias_items(ParamSet& ps, const GraphFeatures& f, const EncodeOptions& opts) {
  const auto& c = ps.config();
  BiasItems items;
  if (!c.mask_local) items.local = local_bias(ps, f, opts.prefix);
  if (!c.mask_global) items.global = global_bias(ps, f, opts.prefix);
  return items;
}

ad::Var attention_bias(ParamSet& ps, const GraphFeatures& f, const EncodeOptions& opts) {
  const auto& c = ps.config();
  const int side = f.n + 1;
  const auto items = attention_bias_items(ps, f, opts);
  ad::Var bias;
  if (items.local.valid() && items.global.valid()) {
    bias = ad::add(items.local, items.global);
  } else if (items.local.valid()) {
    bias = items.local;
  } else if (items.global.valid()) {
    bias = items.global;
  } else {
    bias = ps.tape().constant(ad::Mat::Zero(static_cast<Eigen::Index>(c.n_head) * side, side));
  }
  if (opts.mask_atom >= 0) {
    bias = ad::mul(bias, ps.tape().constant(atom_mask_matrix(side, c.n_head, opts.mask_atom)));
  }
  return bias;
}

EncodedGraph encode(ParamSet& ps, const GraphFeatures& f, const EncodeOptions& opts) {
  const auto& c = ps.config();
  const std::string& p = opts.prefix;
  const int side = f.n + 1;
  EncodedGraph out;
  out.n = f.n;
  out.bias = attention_bias(ps, f, opts);
  require_finite(out.bias.value(), "attention bias");
  std::vector<ad::Var> head_bias;
  for (int h = 0; h < c.n_head; ++h) head_bias.push_back(ad::slice_rows(out.bias, h * side, side));

  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(c.d_k));
  ad::Var x = embed_nodes(ps, f, opts);
  for (int l = 0; l < c.layers; ++l) {
    const std::string q = p + ".l" + std::to_string(l);
    const ad::Var y = ad::layer_norm(x, ps(q + ".ln1.g"), ps(q + ".ln1.b"));
    const ad::Var Q = ad::matmul(y, ps(q + ".wq"));
    const ad::Var K = ad::matmul(y, ps(q + ".wk"));
    const ad::Var V = ad::matmul(y, ps(q + ".wv"));
    std::vector<ad::Var> heads;
    std::vector<Eigen::MatrixXd> maps;
    for (int h = 0; h < c.n_head; ++h) {
      const ad::Var qh = ad::slice_cols(Q, h * c.d_k, c.d_k);
      const ad::Var kh = ad::slice_cols(K, h * c.d_k, c.d_k);
      const ad::Var vh = ad::slice_cols(V, h * c.d_k, c.d_k);
      ad::Var scores = ad::add(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt_dk), head_bias[static_cast<std::size_t>(h)]);
      if (opts.extra_bias) scores = ad::add(scores, ps.tape().constant(*opts.extra_bias));
      const ad::Var attn = ad::softmax_rows(scores);
      if (opts.keep_attention) maps.push_back(attn.value());
      heads.push_back(ad::matmul(attn, vh));
    }
    if (opts.keep_attention) out.attention.push_back(std::move(maps));
    const ad::Var mixed = ad::add_row(ad::matmul(ad::concat_cols(heads), ps(q + ".wo")), ps(q + ".bo"));
    x = ad::add(x, mixed);
    const ad::Var z = ad::layer_norm(x, ps(q + ".ln2.g"), ps(q + ".ln2.b"));
    const ad::Var hidden = ad::gelu(ad::add_row(ad::matmul(z, ps(q + ".ff1.w")), ps(q + ".ff1.b")));
    x = ad::add(x, ad::add_row(ad::matmul(hidden, ps(q + ".ff2.w")), ps(q + ".ff2.b")));
  }
  // The final norm closes the pre-norm stack; a zero-layer encoder is the
  // plain embedding sum.
  if (c.layers > 0) x = ad::layer_norm(x, ps(p + ".lnf.g"), ps(p + ".lnf.b"));
  require_finite(x.value(), "encoder output");
  out.node_reps = ad::slice_rows(x, 0, f.n);
  out.graph_rep = ad::slice_rows(x, f.n, 1);
  return out;
}

}  // namespace retrograph
