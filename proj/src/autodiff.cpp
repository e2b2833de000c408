#include "retrograph/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace retrograph::ad {

const Mat& Var::value() const { return tape->value(id); }

Var Tape::push(Mat value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Mat value) { return push(std::move(value), false, nullptr); }

Var Tape::leaf(Mat value) { return push(std::move(value), true, nullptr); }

void Tape::accumulate(int id, const Mat& g) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

Mat Tape::grad(int id) const {
  const auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var out) {
  if (out.rows() != 1 || out.cols() != 1) throw std::invalid_argument("backward() needs a scalar output");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  accumulate(out.id, Mat::Ones(1, 1));
  for (int i = out.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

bool any_grad(std::initializer_list<Var> vs) {
  for (const auto& v : vs) {
    if (v.tape->requires_grad(v.id)) return true;
  }
  return false;
}

Tape& tape_of(Var a) { return *a.tape; }

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const int ia = a.id;
  const int ib = b.id;
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: shape mismatch");
  return tape_of(a).push(a.value() * b.value(), any_grad({a, b}), [ia, ib](Tape& t, const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  const int ia = a.id;
  const int ib = b.id;
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: shape mismatch");
  return tape_of(a).push(a.value() * b.value().transpose(), any_grad({a, b}), [ia, ib](Tape& t, const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

Var transpose(Var a) {
  const int ia = a.id;
  return tape_of(a).push(a.value().transpose(), any_grad({a}),
                         [ia](Tape& t, const Mat& g) { t.accumulate(ia, g.transpose()); });
}

Var add(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "add");
  const int ia = a.id;
  const int ib = b.id;
  return tape_of(a).push(a.value() + b.value(), any_grad({a, b}), [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "sub");
  const int ia = a.id;
  const int ib = b.id;
  return tape_of(a).push(a.value() - b.value(), any_grad({a, b}), [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "mul");
  const int ia = a.id;
  const int ib = b.id;
  return tape_of(a).push(a.value().cwiseProduct(b.value()), any_grad({a, b}), [ia, ib](Tape& t, const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var a, double s) {
  const int ia = a.id;
  return tape_of(a).push(a.value() * s, any_grad({a}), [ia, s](Tape& t, const Mat& g) { t.accumulate(ia, g * s); });
}

Var add_scalar(Var a, double s) {
  const int ia = a.id;
  return tape_of(a).push(a.value().array() + s, any_grad({a}),
                         [ia](Tape& t, const Mat& g) { t.accumulate(ia, g); });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  const int ia = a.id;
  const int ir = row.id;
  Mat out = a.value().rowwise() + row.value().row(0);
  return tape_of(a).push(std::move(out), any_grad({a, row}), [ia, ir](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

Var mul_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("mul_row: shape mismatch");
  const int ia = a.id;
  const int ir = row.id;
  Mat out = a.value().array().rowwise() * row.value().row(0).array();
  return tape_of(a).push(std::move(out), any_grad({a, row}), [ia, ir](Tape& t, const Mat& g) {
    const Mat& av = t.value(ia);
    const Mat& rv = t.value(ir);
    if (t.requires_grad(ia)) t.accumulate(ia, (g.array().rowwise() * rv.row(0).array()).matrix());
    if (t.requires_grad(ir)) t.accumulate(ir, g.cwiseProduct(av).colwise().sum());
  });
}

Var mul_scalar(Var a, Var s) {
  if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument("mul_scalar: scalar expected");
  const int ia = a.id;
  const int is = s.id;
  return tape_of(a).push(a.value() * s.scalar(), any_grad({a, s}), [ia, is](Tape& t, const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(is)(0, 0));
    if (t.requires_grad(is)) t.accumulate(is, Mat::Constant(1, 1, g.cwiseProduct(t.value(ia)).sum()));
  });
}

Var repeat_cols(Var a, int times) {
  const int ia = a.id;
  const Mat& av = a.value();
  Mat out(av.rows(), av.cols() * times);
  for (Eigen::Index c = 0; c < av.cols(); ++c) {
    for (int k = 0; k < times; ++k) out.col(c * times + k) = av.col(c);
  }
  return tape_of(a).push(std::move(out), any_grad({a}), [ia, times](Tape& t, const Mat& g) {
    const Mat& av2 = t.value(ia);
    Mat ga = Mat::Zero(av2.rows(), av2.cols());
    for (Eigen::Index c = 0; c < av2.cols(); ++c) {
      for (int k = 0; k < times; ++k) ga.col(c) += g.col(c * times + k);
    }
    t.accumulate(ia, ga);
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  const int ia = a.id;
  const Mat& x = a.value();
  Mat out = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); });
  return tape_of(a).push(std::move(out), any_grad({a}), [ia](Tape& t, const Mat& g) {
    const Mat& xv = t.value(ia);
    Mat d = xv.unaryExpr([](double v) {
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

Var tanh(Var a) {
  const int ia = a.id;
  Mat out = a.value().array().tanh().matrix();
  Mat keep = out;
  return tape_of(a).push(std::move(out), any_grad({a}), [ia, keep = std::move(keep)](Tape& t, const Mat& g) {
    t.accumulate(ia, g.cwiseProduct((1.0 - keep.array().square()).matrix()));
  });
}

Var sigmoid(Var a) {
  const int ia = a.id;
  Mat out = a.value().unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  Mat keep = out;
  return tape_of(a).push(std::move(out), any_grad({a}), [ia, keep = std::move(keep)](Tape& t, const Mat& g) {
    t.accumulate(ia, g.cwiseProduct(keep.cwiseProduct((1.0 - keep.array()).matrix())));
  });
}

namespace {
Mat softmax_of(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}
}  // namespace

Var softmax_rows(Var a) {
  const int ia = a.id;
  Mat out = softmax_of(a.value());
  Mat s = out;
  return tape_of(a).push(std::move(out), any_grad({a}), [ia, s = std::move(s)](Tape& t, const Mat& g) {
    const Eigen::VectorXd dot = g.cwiseProduct(s).rowwise().sum();
    Mat gx = s.cwiseProduct(g - dot.replicate(1, g.cols()));
    t.accumulate(ia, gx);
  });
}

Var log_softmax_rows(Var a) {
  const int ia = a.id;
  const Mat s = softmax_of(a.value());
  Mat out = s.array().log().matrix();
  return tape_of(a).push(std::move(out), any_grad({a}), [ia, s](Tape& t, const Mat& g) {
    const Eigen::VectorXd total = g.rowwise().sum();
    t.accumulate(ia, g - s.cwiseProduct(total.replicate(1, g.cols())));
  });
}

Var layer_norm(Var a, Var gain, Var bias, double eps) {
  const Mat& x = a.value();
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  if (gain.cols() != c || bias.cols() != c) throw std::invalid_argument("layer_norm: shape mismatch");
  Mat y(n, c);
  Eigen::VectorXd inv_sigma(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_sigma(r) = 1.0 / std::sqrt(var + eps);
    y.row(r) = (x.row(r).array() - mu) * inv_sigma(r);
  }
  Mat out = (y.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const int ia = a.id;
  const int ig = gain.id;
  const int ib = bias.id;
  return tape_of(a).push(std::move(out), any_grad({a, gain, bias}),
                         [ia, ig, ib, y, inv_sigma](Tape& t, const Mat& g) {
                           if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(y).colwise().sum());
                           if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                           if (!t.requires_grad(ia)) return;
                           const Mat dy = g.array().rowwise() * t.value(ig).row(0).array();
                           Mat dx(dy.rows(), dy.cols());
                           for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                             const double m1 = dy.row(r).mean();
                             const double m2 = dy.row(r).cwiseProduct(y.row(r)).mean();
                             dx.row(r) = inv_sigma(r) * (dy.row(r).array() - m1 - y.row(r).array() * m2);
                           }
                           t.accumulate(ia, dx);
                         });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  const int ia = a.id;
  const Eigen::Index rows = a.rows();
  const Eigen::Index cols = a.cols();
  if (start < 0 || start + count > cols) throw std::invalid_argument("slice_cols: out of range");
  return tape_of(a).push(a.value().middleCols(start, count), any_grad({a}),
                         [ia, rows, cols, start, count](Tape& t, const Mat& g) {
                           Mat ga = Mat::Zero(rows, cols);
                           ga.middleCols(start, count) = g;
                           t.accumulate(ia, ga);
                         });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  const int ia = a.id;
  const Eigen::Index rows = a.rows();
  const Eigen::Index cols = a.cols();
  if (start < 0 || start + count > rows) throw std::invalid_argument("slice_rows: out of range");
  return tape_of(a).push(a.value().middleRows(start, count), any_grad({a}),
                         [ia, rows, cols, start, count](Tape& t, const Mat& g) {
                           Mat ga = Mat::Zero(rows, cols);
                           ga.middleRows(start, count) = g;
                           t.accumulate(ia, ga);
                         });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    grad = grad || p.tape->requires_grad(p.id);
  }
  Mat out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id, at);
    at += p.cols();
  }
  return parts.front().tape->push(std::move(out), grad, [spans](Tape& t, const Mat& g) {
    for (const auto& [id, off] : spans) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(off, t.value(id).cols()));
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    grad = grad || p.tape->requires_grad(p.id);
  }
  Mat out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id, at);
    at += p.rows();
  }
  return parts.front().tape->push(std::move(out), grad, [spans](Tape& t, const Mat& g) {
    for (const auto& [id, off] : spans) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleRows(off, t.value(id).rows()));
    }
  });
}

Var gather_rows(Var table, const std::vector<int>& index) {
  const Mat& tv = table.value();
  Mat out(static_cast<Eigen::Index>(index.size()), tv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= tv.rows()) throw std::invalid_argument("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(index[i]);
  }
  const int it = table.id;
  return tape_of(table).push(std::move(out), any_grad({table}), [it, index](Tape& t, const Mat& g) {
    const Mat& tv2 = t.value(it);
    Mat gt = Mat::Zero(tv2.rows(), tv2.cols());
    for (std::size_t i = 0; i < index.size(); ++i) gt.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(it, gt);
  });
}

Var sum(Var a) {
  const int ia = a.id;
  const Eigen::Index r = a.rows();
  const Eigen::Index c = a.cols();
  return tape_of(a).push(Mat::Constant(1, 1, a.value().sum()), any_grad({a}), [ia, r, c](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  double total = 0.0;
  bool grad = false;
  std::vector<int> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].rows() != 1 || terms[i].cols() != 1) throw std::invalid_argument("weighted_sum: scalars only");
    total += weights[i] * terms[i].scalar();
    grad = grad || terms[i].tape->requires_grad(terms[i].id);
    ids.push_back(terms[i].id);
  }
  return terms.front().tape->push(Mat::Constant(1, 1, total), grad, [ids, weights](Tape& t, const Mat& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) t.accumulate(ids[i], g * weights[i]);
  });
}

Var cross_entropy_sum(Var logits, const std::vector<int>& target) {
  const Mat& z = logits.value();
  if (static_cast<Eigen::Index>(target.size()) != z.rows()) throw std::invalid_argument("cross_entropy: size mismatch");
  const Mat s = softmax_of(z);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int y = target[static_cast<std::size_t>(r)];
    if (y < 0) continue;
    if (y >= z.cols()) throw std::invalid_argument("cross_entropy: target out of range");
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    loss += lse - z(r, y);
  }
  const int il = logits.id;
  return tape_of(logits).push(Mat::Constant(1, 1, loss), any_grad({logits}), [il, s, target](Tape& t, const Mat& g) {
    Mat gz = s;
    for (Eigen::Index r = 0; r < gz.rows(); ++r) {
      const int y = target[static_cast<std::size_t>(r)];
      if (y < 0) {
        gz.row(r).setZero();
      } else {
        gz(r, y) -= 1.0;
      }
    }
    t.accumulate(il, gz * g(0, 0));
  });
}

Var bce_with_logits_sum(Var logits, const Mat& target, const Mat& mask) {
  const Mat& z = logits.value();
  check_same_shape(z, target, "bce");
  check_same_shape(z, mask, "bce");
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (mask(i) == 0.0) continue;
    const double v = z(i);
    loss += mask(i) * (std::max(v, 0.0) - v * target(i) + std::log1p(std::exp(-std::abs(v))));
  }
  const int il = logits.id;
  return tape_of(logits).push(Mat::Constant(1, 1, loss), any_grad({logits}), [il, target, mask](Tape& t, const Mat& g) {
    const Mat& zv = t.value(il);
    Mat gz(zv.rows(), zv.cols());
    for (Eigen::Index i = 0; i < zv.size(); ++i) {
      gz(i) = mask(i) * (1.0 / (1.0 + std::exp(-zv(i))) - target(i));
    }
    t.accumulate(il, gz * g(0, 0));
  });
}

}  // namespace retrograph::ad
