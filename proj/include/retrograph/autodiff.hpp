#pragma once

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace retrograph::ad {

using Mat = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool valid() const { return tape != nullptr; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep visits every consumer before its inputs.
class Tape {
 public:
  Var constant(Mat value);
  /// A leaf whose gradient is kept after backward().
  Var leaf(Mat value);

  /// Seeds d(out)/d(out) = 1 (out must be 1x1) and runs the reverse sweep.
  void backward(Var out);

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  /// Gradient of a node after backward(); zero matrix when untouched.
  Mat grad(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds `g` into the gradient buffer of `id` (used by op backward passes).
  void accumulate(int id, const Mat& g);

  using Backward = std::function<void(Tape&, const Mat& out_grad)>;
  Var push(Mat value, bool requires_grad, Backward backward);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

// Elementwise and linear algebra.
Var matmul(Var a, Var b);
/// a * b^T.
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a (r x c) + row (1 x c) broadcast down the rows.
Var add_row(Var a, Var row);
/// a (r x c) .* row (1 x c) broadcast down the rows.
Var mul_row(Var a, Var row);
/// a (r x c) * s where s is a 1x1 variable.
Var mul_scalar(Var a, Var s);
/// Repeats each column `times` times: (r x c) -> (r x c*times).
Var repeat_cols(Var a, int times);

// Nonlinearities.
Var gelu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Row-wise layer normalization followed by gain/bias rows (1 x c).
Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);

// Shape manipulation.
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
/// Rows of `table` selected by `index` (repeats allowed).
Var gather_rows(Var table, const std::vector<int>& index);

// Reductions.
Var sum(Var a);
Var mean(Var a);
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

// Losses (each returns 1x1).
/// Sum over rows of -log softmax(logits)[row, target[row]]; rows with
/// target < 0 are skipped.
Var cross_entropy_sum(Var logits, const std::vector<int>& target);
/// Sum of binary cross-entropy with logits over entries where mask != 0.
Var bce_with_logits_sum(Var logits, const Mat& target, const Mat& mask);

}  // namespace retrograph::ad
