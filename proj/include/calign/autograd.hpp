#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2-D matrix; scalars are 1x1.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "calign/error.hpp"

namespace calign {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

namespace ad {

struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Mat& grad_buffer() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Mat::Zero(value.rows(), value.cols());
    }
    return grad;
  }
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// While alive, newly created operations do not record a graph.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class Var {
 public:
  Var() = default;
  explicit Var(Mat value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var scalar(double v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return Var(std::move(m));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  Mat& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds a result node; records inputs and backward only when some input
/// requires a gradient and recording is enabled.
inline Var make_result(Mat value, std::initializer_list<Var> inputs,
                       std::function<void(Node&)> backward_fn) {
  Var out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.inputs.push_back(in.node());
  node.backward_fn = std::move(backward_fn);
  return out;
}

inline Var make_result(Mat value, std::span<const Var> inputs,
                       std::function<void(Node&)> backward_fn) {
  Var out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.inputs.push_back(in.node());
  node.backward_fn = std::move(backward_fn);
  return out;
}

/// Accumulates d(root)/d(leaf) into every reachable node's grad buffer.
/// The root must be 1x1.
inline void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw NumericError("backward: root must be a scalar");
  }
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() > 0) n->backward_fn(*n);
  }
}

namespace detail {
inline Mat& g(const std::shared_ptr<Node>& n) { return n->grad_buffer(); }
inline bool wants(const std::shared_ptr<Node>& n) { return n->requires_grad; }
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw NumericError("matmul: shape mismatch");
  return make_result(a.value() * b.value(), {a, b}, [](Node& n) {
    auto& A = n.inputs[0];
    auto& B = n.inputs[1];
    if (detail::wants(A)) detail::g(A).noalias() += n.grad * B->value.transpose();
    if (detail::wants(B)) detail::g(B).noalias() += A->value.transpose() * n.grad;
  });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw NumericError("matmul_nt: shape mismatch");
  return make_result(a.value() * b.value().transpose(), {a, b}, [](Node& n) {
    auto& A = n.inputs[0];
    auto& B = n.inputs[1];
    if (detail::wants(A)) detail::g(A).noalias() += n.grad * B->value;
    if (detail::wants(B)) detail::g(B).noalias() += n.grad.transpose() * A->value;
  });
}

inline Var add(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw NumericError("add: shape mismatch");
  return make_result(a.value() + b.value(), {a, b}, [](Node& n) {
    for (auto& in : n.inputs)
      if (detail::wants(in)) detail::g(in) += n.grad;
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw NumericError("sub: shape mismatch");
  return make_result(a.value() - b.value(), {a, b}, [](Node& n) {
    if (detail::wants(n.inputs[0])) detail::g(n.inputs[0]) += n.grad;
    if (detail::wants(n.inputs[1])) detail::g(n.inputs[1]) -= n.grad;
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw NumericError("mul: shape mismatch");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    auto& A = n.inputs[0];
    auto& B = n.inputs[1];
    if (detail::wants(A)) detail::g(A) += n.grad.cwiseProduct(B->value);
    if (detail::wants(B)) detail::g(B) += n.grad.cwiseProduct(A->value);
  });
}

/// Adds a 1xC row to every row of a.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw NumericError("add_row: shape mismatch");
  Mat out = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(out), {a, row}, [](Node& n) {
    if (detail::wants(n.inputs[0])) detail::g(n.inputs[0]) += n.grad;
    if (detail::wants(n.inputs[1])) detail::g(n.inputs[1]) += n.grad.colwise().sum();
  });
}

inline Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& n) {
    detail::g(n.inputs[0]) += n.grad * s;
  });
}

inline Var add_scalar(const Var& a, double s) {
  return make_result(a.value().array() + s, {a}, [](Node& n) {
    detail::g(n.inputs[0]) += n.grad;
  });
}

inline Var relu(const Var& a) {
  return make_result(a.value().cwiseMax(0.0), {a}, [](Node& n) {
    auto& A = n.inputs[0];
    detail::g(A) += (A->value.array() > 0.0).select(n.grad, 0.0);
  });
}

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  Mat out = a.value().unaryExpr([](double x) { return logistic(x); });
  return make_result(out, {a}, [](Node& n) {
    detail::g(n.inputs[0]).array() +=
        n.grad.array() * n.value.array() * (1.0 - n.value.array());
  });
}

inline Var transpose(const Var& a) {
  return make_result(a.value().transpose(), {a}, [](Node& n) {
    detail::g(n.inputs[0]) += n.grad.transpose();
  });
}

/// Mean over rows: RxC -> 1xC.
inline Var mean_rows(const Var& a) {
  if (a.rows() == 0) throw NumericError("mean_rows: empty input");
  const double inv = 1.0 / static_cast<double>(a.rows());
  Mat out = a.value().colwise().sum() * inv;
  return make_result(std::move(out), {a}, [inv](Node& n) {
    detail::g(n.inputs[0]).rowwise() += n.grad.row(0) * inv;
  });
}

inline Var sum_all(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [](Node& n) {
    detail::g(n.inputs[0]).array() += n.grad(0, 0);
  });
}

/// Row-wise inner products: two RxC inputs -> Rx1.
inline Var row_dot(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw NumericError("row_dot: shape mismatch");
  Mat out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    auto& A = n.inputs[0];
    auto& B = n.inputs[1];
    if (detail::wants(A)) detail::g(A) += (B->value.array().colwise() * n.grad.col(0).array()).matrix();
    if (detail::wants(B)) detail::g(B) += (A->value.array().colwise() * n.grad.col(0).array()).matrix();
  });
}

/// Scales every row to unit L2 norm.
inline Var l2_normalize_rows(const Var& a, double eps = 1e-12) {
  Eigen::VectorXd norms = a.value().rowwise().norm().cwiseMax(eps);
  Mat out = a.value().array().colwise() / norms.array();
  return make_result(std::move(out), {a}, [norms](Node& n) {
    const Mat& y = n.value;
    Eigen::VectorXd proj = y.cwiseProduct(n.grad).rowwise().sum();
    Mat gx = n.grad - (y.array().colwise() * proj.array()).matrix();
    detail::g(n.inputs[0]) += (gx.array().colwise() / norms.array()).matrix();
  });
}

inline Mat softmax_rows_value(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline Var softmax_rows(const Var& a) {
  return make_result(softmax_rows_value(a.value()), {a}, [](Node& n) {
    const Mat& y = n.value;
    Eigen::VectorXd dot = y.cwiseProduct(n.grad).rowwise().sum();
    detail::g(n.inputs[0]).array() +=
        y.array() * (n.grad.array().colwise() - dot.array());
  });
}

inline double logsumexp_value(const Mat& x) {
  const double m = x.maxCoeff();
  return m + std::log((x.array() - m).exp().sum());
}

/// log(sum(exp(x))) over every entry -> 1x1.
inline Var logsumexp_all(const Var& a) {
  const double lse = logsumexp_value(a.value());
  Mat out(1, 1);
  out(0, 0) = lse;
  return make_result(std::move(out), {a}, [lse](Node& n) {
    const auto& A = n.inputs[0];
    detail::g(A).array() += n.grad(0, 0) * (A->value.array() - lse).exp();
  });
}

/// Vertically concatenates inputs with equal column counts.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw NumericError("concat_rows: no inputs");
  const auto cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw NumericError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make_result(std::move(out), parts, [](Node& n) {
    Eigen::Index r0 = 0;
    for (auto& in : n.inputs) {
      const auto h = in->value.rows();
      if (detail::wants(in)) detail::g(in) += n.grad.middleRows(r0, h);
      r0 += h;
    }
  });
}

/// Arranges rows*cols scalar (1x1) inputs into a matrix, row-major.
inline Var stack_scalars(std::span<const Var> scalars, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(scalars.size()) != rows * cols) {
    throw NumericError("stack_scalars: count mismatch");
  }
  Mat out(rows, cols);
  for (Eigen::Index i = 0; i < rows * cols; ++i) out(i / cols, i % cols) = scalars[i].item();
  return make_result(std::move(out), scalars, [cols](Node& n) {
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      if (detail::wants(n.inputs[i])) {
        detail::g(n.inputs[i])(0, 0) += n.grad(i / cols, i % cols);
      }
    }
  });
}

inline Var select_rows(const Var& a, std::vector<Eigen::Index> index) {
  Mat out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw NumericError("select_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return make_result(std::move(out), {a}, [index = std::move(index)](Node& n) {
    auto& G = detail::g(n.inputs[0]);
    for (std::size_t i = 0; i < index.size(); ++i) {
      G.row(index[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    }
  });
}

enum class Reduction { Mean, Sum };

/// Softmax cross-entropy of each row against an integer target column.
/// Mean reduction divides by the number of rows.
inline Var cross_entropy_rows(const Var& logits, std::vector<int> targets,
                              Reduction reduction = Reduction::Mean) {
  const auto n_rows = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != n_rows) {
    throw NumericError("cross_entropy_rows: target count mismatch");
  }
  Mat probs = softmax_rows_value(logits.value());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < n_rows; ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= logits.cols()) throw NumericError("cross_entropy_rows: target out of range");
    const double m = logits.value().row(r).maxCoeff();
    const double lse = m + std::log((logits.value().row(r).array() - m).exp().sum());
    loss += lse - logits.value()(r, t);
  }
  const double factor = reduction == Reduction::Mean ? 1.0 / static_cast<double>(n_rows) : 1.0;
  Mat out(1, 1);
  out(0, 0) = loss * factor;
  return make_result(std::move(out), {logits},
                     [probs = std::move(probs), targets = std::move(targets), factor](Node& n) {
                       Mat d = probs;
                       for (std::size_t r = 0; r < targets.size(); ++r) {
                         d(static_cast<Eigen::Index>(r), targets[r]) -= 1.0;
                       }
                       detail::g(n.inputs[0]) += d * (factor * n.grad(0, 0));
                     });
}

/// Binary cross-entropy on logits, summed over entries where mask != 0.
inline Var bce_with_logits_sum(const Var& logits, const Mat& targets, const Mat& mask) {
  const Mat& x = logits.value();
  if (targets.rows() != x.rows() || targets.cols() != x.cols() || mask.rows() != x.rows() ||
      mask.cols() != x.cols()) {
    throw NumericError("bce_with_logits_sum: shape mismatch");
  }
  double loss = 0.0;
  Mat d(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x.data()[i];
    const double ti = targets.data()[i];
    const double mi = mask.data()[i];
    // max(x,0) - x t + log(1 + exp(-|x|))
    loss += mi * (std::max(xi, 0.0) - xi * ti + std::log1p(std::exp(-std::abs(xi))));
    d.data()[i] = mi * (logistic(xi) - ti);
  }
  Mat out(1, 1);
  out(0, 0) = loss;
  return make_result(std::move(out), {logits}, [d = std::move(d)](Node& n) {
    detail::g(n.inputs[0]) += d * n.grad(0, 0);
  });
}

/// Binary cross-entropy on probabilities clipped to [clip, 1-clip], summed
/// over entries where mask != 0. Clipped entries pass no gradient.
inline Var bce_probs_sum(const Var& probs, const Mat& targets, const Mat& mask, double clip) {
  const Mat& p = probs.value();
  if (targets.rows() != p.rows() || targets.cols() != p.cols() || mask.rows() != p.rows() ||
      mask.cols() != p.cols()) {
    throw NumericError("bce_probs_sum: shape mismatch");
  }
  double loss = 0.0;
  Mat d = Mat::Zero(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double mi = mask.data()[i];
    if (mi == 0.0) continue;
    const double raw = p.data()[i];
    const double pi = std::clamp(raw, clip, 1.0 - clip);
    const double ti = targets.data()[i];
    loss -= mi * (ti * std::log(pi) + (1.0 - ti) * std::log(1.0 - pi));
    if (raw > clip && raw < 1.0 - clip) d.data()[i] = mi * (-ti / pi + (1.0 - ti) / (1.0 - pi));
  }
  Mat out(1, 1);
  out(0, 0) = loss;
  return make_result(std::move(out), {probs}, [d = std::move(d)](Node& n) {
    detail::g(n.inputs[0]) += d * n.grad(0, 0);
  });
}

/// Geometry of a 2-D convolution over an HxW map with C channels stored as
/// an (H*W)xC matrix in row-major spatial order.
struct ConvGeometry {
  int in_h = 0;
  int in_w = 0;
  int in_c = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 0;

  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  int patch_size() const { return kernel * kernel * in_c; }
};

namespace detail {
inline Mat im2col(const Mat& x, const ConvGeometry& geo) {
  const int oh = geo.out_h();
  const int ow = geo.out_w();
  Mat cols = Mat::Zero(oh * ow, geo.patch_size());
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int row = oy * ow + ox;
      for (int ky = 0; ky < geo.kernel; ++ky) {
        const int iy = oy * geo.stride + ky - geo.pad;
        if (iy < 0 || iy >= geo.in_h) continue;
        for (int kx = 0; kx < geo.kernel; ++kx) {
          const int ix = ox * geo.stride + kx - geo.pad;
          if (ix < 0 || ix >= geo.in_w) continue;
          cols.row(row).segment((ky * geo.kernel + kx) * geo.in_c, geo.in_c) =
              x.row(iy * geo.in_w + ix);
        }
      }
    }
  }
  return cols;
}

inline void col2im_add(const Mat& cols, const ConvGeometry& geo, Mat& dx) {
  const int oh = geo.out_h();
  const int ow = geo.out_w();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int row = oy * ow + ox;
      for (int ky = 0; ky < geo.kernel; ++ky) {
        const int iy = oy * geo.stride + ky - geo.pad;
        if (iy < 0 || iy >= geo.in_h) continue;
        for (int kx = 0; kx < geo.kernel; ++kx) {
          const int ix = ox * geo.stride + kx - geo.pad;
          if (ix < 0 || ix >= geo.in_w) continue;
          dx.row(iy * geo.in_w + ix) +=
              cols.row(row).segment((ky * geo.kernel + kx) * geo.in_c, geo.in_c);
        }
      }
    }
  }
}
}  // namespace detail

/// Convolution: x is (in_h*in_w) x in_c, weight is patch_size x out_c,
/// bias is 1 x out_c. Output is (out_h*out_w) x out_c.
inline Var conv2d(const Var& x, const ConvGeometry& geo, const Var& weight, const Var& bias) {
  if (x.rows() != geo.in_h * geo.in_w || x.cols() != geo.in_c) {
    throw NumericError("conv2d: input does not match geometry");
  }
  if (weight.rows() != geo.patch_size() || bias.cols() != weight.cols() || bias.rows() != 1) {
    throw NumericError("conv2d: weight shape mismatch");
  }
  Mat cols = detail::im2col(x.value(), geo);
  Mat out = cols * weight.value();
  out.rowwise() += bias.value().row(0);
  return make_result(std::move(out), {x, weight, bias},
                     [cols = std::move(cols), geo](Node& n) {
                       auto& X = n.inputs[0];
                       auto& W = n.inputs[1];
                       auto& B = n.inputs[2];
                       if (detail::wants(W)) detail::g(W).noalias() += cols.transpose() * n.grad;
                       if (detail::wants(B)) detail::g(B) += n.grad.colwise().sum();
                       if (detail::wants(X)) {
                         Mat dcols = n.grad * W->value.transpose();
                         detail::col2im_add(dcols, geo, detail::g(X));
                       }
                     });
}

}  // namespace ad
}  // namespace calign
