#include "caml/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

namespace caml::ad {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

Graph* common_graph(std::initializer_list<const Tensor*> tensors) {
  Graph* g = nullptr;
  for (const Tensor* t : tensors) {
    if (!t->requires_grad()) continue;
    if (g == nullptr) {
      g = t->graph();
    } else if (g != t->graph()) {
      raise(ErrorKind::Contract, "operands belong to different graphs");
    }
  }
  return g;
}

std::vector<std::int64_t> parent_ids(std::initializer_list<const Tensor*> ts) {
  std::vector<std::int64_t> ids;
  for (const Tensor* t : ts) {
    if (t->requires_grad()) ids.push_back(t->node_id());
  }
  return ids;
}

Tensor finish(Graph* g, const char* tag, Shape shape, std::vector<double> data,
              std::initializer_list<const Tensor*> inputs,
              Graph::BackwardFn backward) {
  if (g == nullptr) return Tensor(std::move(shape), std::move(data));
  return g->op_result(tag, std::move(shape), std::move(data),
                      parent_ids(inputs), std::move(backward));
}

// Rows/cols view of a tensor treated as [rows x C] over its last axis.
std::int64_t last_dim(const Tensor& t) {
  if (t.rank() < 1) raise(ErrorKind::Dimension, "tensor has no axes");
  return t.shape().back();
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (std::int64_t d : shape_) {
    if (d <= 0)
      raise(ErrorKind::Dimension, "non-positive dimension in " + shape_str(shape_));
  }
  if (numel(shape_) != static_cast<std::int64_t>(data.size())) {
    raise(ErrorKind::Dimension,
          "data length " + std::to_string(data.size()) + " does not match " +
              shape_str(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(Shape shape) {
  std::int64_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(Shape shape, double v) {
  std::int64_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
}

double Tensor::value() const {
  if (size() != 1) raise(ErrorKind::Contract, "value() requires a scalar tensor");
  return (*data_)[0];
}

double Tensor::at(std::int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= size())
    raise(ErrorKind::Dimension, "flat index out of range");
  return (*data_)[static_cast<std::size_t>(flat_index)];
}

std::span<double> GradAccum::buffer(std::int64_t node) {
  auto& buf = graph_.grad_buffers_[static_cast<std::size_t>(node)];
  if (buf.empty()) {
    buf.assign(static_cast<std::size_t>(
                   graph_.nodes_[static_cast<std::size_t>(node)].size),
               0.0);
  }
  return std::span<double>(buf);
}

Tensor Graph::leaf(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  return leaf(t);
}

Tensor Graph::leaf(const Tensor& value) {
  Tensor t = value;
  t.graph_ = this;
  t.node_ = static_cast<std::int64_t>(nodes_.size());
  nodes_.push_back(Node{"leaf", t.shape_, t.size(), {}, {}, true});
  return t;
}

Tensor Graph::op_result(const char* tag, Shape shape, std::vector<double> data,
                        std::vector<std::int64_t> parents, BackwardFn backward) {
  Tensor t(std::move(shape), std::move(data));
  t.graph_ = this;
  t.node_ = static_cast<std::int64_t>(nodes_.size());
  nodes_.push_back(Node{tag, t.shape_, t.size(), std::move(parents),
                        std::move(backward), false});
  return t;
}

GradMap Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.graph() != this || loss.node_id() < 0)
    raise(ErrorKind::Contract, "loss is not a node of this graph");
  if (loss.size() != 1)
    raise(ErrorKind::Contract,
          "backward requires a scalar loss, got " + shape_str(loss.shape()));

  grad_buffers_.assign(nodes_.size(), {});
  grad_buffers_[static_cast<std::size_t>(loss.node_id())] = {1.0};

  GradAccum sink(*this);
  for (std::int64_t i = loss.node_id(); i >= 0; --i) {
    auto& buf = grad_buffers_[static_cast<std::size_t>(i)];
    if (buf.empty()) continue;  // not reachable from the loss
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    if (node.backward) node.backward(std::span<const double>(buf), sink);
    if (!node.is_leaf) {
      buf.clear();
      buf.shrink_to_fit();
    }
  }

  GradMap out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (!node.is_leaf) continue;
    auto& buf = grad_buffers_[i];
    if (buf.empty()) {
      out.emplace(static_cast<std::int64_t>(i), Tensor::zeros(node.shape));
    } else {
      out.emplace(static_cast<std::int64_t>(i),
                  Tensor(node.shape, std::move(buf)));
    }
  }
  grad_buffers_.clear();
  return out;
}

// ---- elementwise -------------------------------------------------------

namespace {

bool is_scalar_like(const Tensor& t) { return t.size() == 1; }

void check_binary_shapes(const Tensor& a, const Tensor& b, const char* tag) {
  if (a.shape() == b.shape() || is_scalar_like(a) || is_scalar_like(b)) return;
  raise(ErrorKind::Dimension, std::string(tag) + ": incompatible shapes " +
                                  shape_str(a.shape()) + " and " +
                                  shape_str(b.shape()));
}

// Adds `g` (shaped like the result) into the buffer of operand `t`,
// summing when the operand was broadcast from a scalar.
void accumulate_operand(GradAccum& sink, const Tensor& t,
                        std::span<const double> g, double sign) {
  if (!t.requires_grad()) return;
  auto buf = sink.buffer(t.node_id());
  if (t.size() == static_cast<std::int64_t>(g.size())) {
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += sign * g[i];
  } else {
    double s = 0.0;
    for (double v : g) s += v;
    buf[0] += sign * s;
  }
}

double scalar_or(const Tensor& t, std::size_t i) {
  return t.size() == 1 ? t.data()[0] : t.data()[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_binary_shapes(a, b, "add");
  Graph* g = common_graph({&a, &b});
  const Shape& shape = is_scalar_like(a) ? b.shape() : a.shape();
  std::size_t n = static_cast<std::size_t>(numel(shape));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = scalar_or(a, i) + scalar_or(b, i);
  return finish(g, "add", shape, std::move(out), {&a, &b},
                [a, b](std::span<const double> og, GradAccum& sink) {
                  accumulate_operand(sink, a, og, 1.0);
                  accumulate_operand(sink, b, og, 1.0);
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_binary_shapes(a, b, "sub");
  Graph* g = common_graph({&a, &b});
  const Shape& shape = is_scalar_like(a) ? b.shape() : a.shape();
  std::size_t n = static_cast<std::size_t>(numel(shape));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = scalar_or(a, i) - scalar_or(b, i);
  return finish(g, "sub", shape, std::move(out), {&a, &b},
                [a, b](std::span<const double> og, GradAccum& sink) {
                  accumulate_operand(sink, a, og, 1.0);
                  accumulate_operand(sink, b, og, -1.0);
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_binary_shapes(a, b, "mul");
  Graph* g = common_graph({&a, &b});
  const Shape& shape = is_scalar_like(a) ? b.shape() : a.shape();
  std::size_t n = static_cast<std::size_t>(numel(shape));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = scalar_or(a, i) * scalar_or(b, i);
  return finish(g, "mul", shape, std::move(out), {&a, &b},
                [a, b, n](std::span<const double> og, GradAccum& sink) {
                  if (a.requires_grad()) {
                    std::vector<double> ga(og.size());
                    for (std::size_t i = 0; i < n; ++i) ga[i] = og[i] * scalar_or(b, i);
                    accumulate_operand(sink, a, ga, 1.0);
                  }
                  if (b.requires_grad()) {
                    std::vector<double> gb(og.size());
                    for (std::size_t i = 0; i < n; ++i) gb[i] = og[i] * scalar_or(a, i);
                    accumulate_operand(sink, b, gb, 1.0);
                  }
                });
}

Tensor relu(const Tensor& a) {
  Graph* g = common_graph({&a});
  std::size_t n = static_cast<std::size_t>(a.size());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return finish(g, "relu", a.shape(), std::move(out), {&a},
                [a](std::span<const double> og, GradAccum& sink) {
                  auto buf = sink.buffer(a.node_id());
                  for (std::size_t i = 0; i < og.size(); ++i)
                    if (a.data()[i] > 0.0) buf[i] += og[i];
                });
}

Tensor exp(const Tensor& a) {
  Graph* g = common_graph({&a});
  std::size_t n = static_cast<std::size_t>(a.size());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(a.data()[i]);
  Tensor saved(a.shape(), out);  // exp(x), reused in the gradient rule
  return finish(g, "exp", a.shape(), std::move(out), {&a},
                [a, saved](std::span<const double> og, GradAccum& sink) {
                  auto buf = sink.buffer(a.node_id());
                  for (std::size_t i = 0; i < og.size(); ++i)
                    buf[i] += og[i] * saved.data()[i];
                });
}

Tensor neg(const Tensor& a) {
  Graph* g = common_graph({&a});
  std::size_t n = static_cast<std::size_t>(a.size());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = -a.data()[i];
  return finish(g, "neg", a.shape(), std::move(out), {&a},
                [a](std::span<const double> og, GradAccum& sink) {
                  auto buf = sink.buffer(a.node_id());
                  for (std::size_t i = 0; i < og.size(); ++i) buf[i] -= og[i];
                });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0))
      raise(ErrorKind::Domain, "log requires strictly positive input, got " +
                                   std::to_string(v));
  }
  Graph* g = common_graph({&a});
  std::size_t n = static_cast<std::size_t>(a.size());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::log(a.data()[i]);
  return finish(g, "log", a.shape(), std::move(out), {&a},
                [a](std::span<const double> og, GradAccum& sink) {
                  auto buf = sink.buffer(a.node_id());
                  for (std::size_t i = 0; i < og.size(); ++i)
                    buf[i] += og[i] / a.data()[i];
                });
}

Tensor elementwise(EwOp op, const Tensor& a) {
  switch (op) {
    case EwOp::Relu: return relu(a);
    case EwOp::Exp: return exp(a);
    case EwOp::Log: return log(a);
    case EwOp::Neg: return neg(a);
    default:
      raise(ErrorKind::Parameter, "elementwise: binary op called with one argument");
  }
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case EwOp::Add: return add(a, b);
    case EwOp::Sub: return sub(a, b);
    case EwOp::Mul: return mul(a, b);
    default:
      raise(ErrorKind::Parameter, "elementwise: unary op called with two arguments");
  }
}

// ---- matmul / linear ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    raise(ErrorKind::Dimension, "matmul requires rank-2 tensors, got " +
                                    shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
  std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    raise(ErrorKind::Dimension, "matmul: inner dimensions disagree, " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  Graph* g = common_graph({&a, &b});
  std::vector<double> out(static_cast<std::size_t>(m * n));
  {
    MapConstMat A(a.data().data(), m, k), B(b.data().data(), k, n);
    MapMat C(out.data(), m, n);
    C.noalias() = A * B;
  }
  return finish(g, "matmul", {m, n}, std::move(out), {&a, &b},
                [a, b, m, k, n](std::span<const double> og, GradAccum& sink) {
                  MapConstMat OG(og.data(), m, n);
                  if (a.requires_grad()) {
                    MapConstMat B(b.data().data(), k, n);
                    MapMat GA(sink.buffer(a.node_id()).data(), m, k);
                    GA.noalias() += OG * B.transpose();
                  }
                  if (b.requires_grad()) {
                    MapConstMat A(a.data().data(), m, k);
                    MapMat GB(sink.buffer(b.node_id()).data(), k, n);
                    GB.noalias() += A.transpose() * OG;
                  }
                });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1)
    raise(ErrorKind::Dimension, "linear expects x[BxI], w[OxI], bias[O]");
  std::int64_t batch = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in || bias.dim(0) != out_dim)
    raise(ErrorKind::Dimension, "linear: shape mismatch x=" + shape_str(x.shape()) +
                                    " w=" + shape_str(w.shape()) +
                                    " bias=" + shape_str(bias.shape()));
  Graph* g = common_graph({&x, &w, &bias});
  std::vector<double> out(static_cast<std::size_t>(batch * out_dim));
  {
    MapConstMat X(x.data().data(), batch, in), W(w.data().data(), out_dim, in);
    Eigen::Map<const Eigen::VectorXd> B(bias.data().data(), out_dim);
    MapMat Y(out.data(), batch, out_dim);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += B.transpose();
  }
  return finish(
      g, "linear", {batch, out_dim}, std::move(out), {&x, &w, &bias},
      [x, w, bias, batch, in, out_dim](std::span<const double> og, GradAccum& sink) {
        MapConstMat OG(og.data(), batch, out_dim);
        if (x.requires_grad()) {
          MapConstMat W(w.data().data(), out_dim, in);
          MapMat GX(sink.buffer(x.node_id()).data(), batch, in);
          GX.noalias() += OG * W;
        }
        if (w.requires_grad()) {
          MapConstMat X(x.data().data(), batch, in);
          MapMat GW(sink.buffer(w.node_id()).data(), out_dim, in);
          GW.noalias() += OG.transpose() * X;
        }
        if (bias.requires_grad()) {
          Eigen::Map<Eigen::VectorXd> GB(sink.buffer(bias.node_id()).data(), out_dim);
          GB.noalias() += OG.colwise().sum().transpose();
        }
      });
}

// ---- softmax -------------------------------------------------------------

Tensor softmax_t(const Tensor& logits, double t) {
  if (!(t > 0.0))
    raise(ErrorKind::Parameter, "softmax_t: temperature must be positive");
  std::int64_t classes = last_dim(logits);
  std::int64_t rows = logits.size() / classes;
  std::vector<double> out(static_cast<std::size_t>(logits.size()));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * classes;
    double* s = out.data() + r * classes;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < classes; ++c) mx = std::max(mx, z[c] / t);
    double denom = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) {
      s[c] = std::exp(z[c] / t - mx);
      denom += s[c];
    }
    for (std::int64_t c = 0; c < classes; ++c) s[c] /= denom;
  }
  Graph* g = common_graph({&logits});
  Tensor saved(logits.shape(), out);  // softmax output, reused in backward
  return finish(g, "softmax_t", logits.shape(), std::move(out), {&logits},
                [logits, saved, rows, classes, t](std::span<const double> og,
                                                  GradAccum& sink) {
                  auto buf = sink.buffer(logits.node_id());
                  for (std::int64_t r = 0; r < rows; ++r) {
                    const double* s = saved.data().data() + r * classes;
                    const double* go = og.data() + r * classes;
                    double dot = 0.0;
                    for (std::int64_t c = 0; c < classes; ++c) dot += go[c] * s[c];
                    for (std::int64_t c = 0; c < classes; ++c)
                      buf[static_cast<std::size_t>(r * classes + c)] +=
                          s[c] * (go[c] - dot) / t;
                  }
                });
}

Tensor log_softmax_t(const Tensor& logits, double t) {
  if (!(t > 0.0))
    raise(ErrorKind::Parameter, "log_softmax_t: temperature must be positive");
  std::int64_t classes = last_dim(logits);
  std::int64_t rows = logits.size() / classes;
  std::vector<double> out(static_cast<std::size_t>(logits.size()));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * classes;
    double* s = out.data() + r * classes;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < classes; ++c) mx = std::max(mx, z[c] / t);
    double denom = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) denom += std::exp(z[c] / t - mx);
    double lse = mx + std::log(denom);
    for (std::int64_t c = 0; c < classes; ++c) s[c] = z[c] / t - lse;
  }
  Graph* g = common_graph({&logits});
  Tensor saved(logits.shape(), out);
  return finish(g, "log_softmax_t", logits.shape(), std::move(out), {&logits},
                [logits, saved, rows, classes, t](std::span<const double> og,
                                                  GradAccum& sink) {
                  auto buf = sink.buffer(logits.node_id());
                  for (std::int64_t r = 0; r < rows; ++r) {
                    const double* ls = saved.data().data() + r * classes;
                    const double* go = og.data() + r * classes;
                    double total = 0.0;
                    for (std::int64_t c = 0; c < classes; ++c) total += go[c];
                    for (std::int64_t c = 0; c < classes; ++c)
                      buf[static_cast<std::size_t>(r * classes + c)] +=
                          (go[c] - std::exp(ls[c]) * total) / t;
                  }
                });
}

// ---- structural ops -------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, std::int64_t axis) {
  if (parts.empty()) raise(ErrorKind::Parameter, "concat: no tensors given");
  const Shape& first = parts[0].shape();
  std::int64_t rank = parts[0].rank();
  if (axis < 0 || axis >= rank)
    raise(ErrorKind::Dimension, "concat: axis out of range");
  Shape out_shape = first;
  std::int64_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank)
      raise(ErrorKind::Dimension, "concat: rank mismatch");
    for (std::int64_t d = 0; d < rank; ++d) {
      if (d != axis && p.shape()[static_cast<std::size_t>(d)] !=
                           first[static_cast<std::size_t>(d)])
        raise(ErrorKind::Dimension, "concat: shapes differ off-axis: " +
                                        shape_str(first) + " vs " +
                                        shape_str(p.shape()));
    }
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  // outer = product of dims before axis, inner = product after.
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= first[static_cast<std::size_t>(d)];
  for (std::int64_t d = axis + 1; d < rank; ++d)
    inner *= first[static_cast<std::size_t>(d)];

  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
  std::int64_t out_row = axis_total * inner;
  std::int64_t offset = 0;
  for (const Tensor& p : parts) {
    std::int64_t p_row = p.dim(axis) * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + o * out_row + offset,
                  p.data().data() + o * p_row,
                  static_cast<std::size_t>(p_row) * sizeof(double));
    }
    offset += p_row;
  }

  Graph* g = nullptr;
  std::vector<std::int64_t> pids;
  std::vector<Tensor> saved_parts(parts.begin(), parts.end());
  for (const Tensor& p : parts) {
    if (!p.requires_grad()) continue;
    if (g == nullptr)
      g = p.graph();
    else if (g != p.graph())
      raise(ErrorKind::Contract, "operands belong to different graphs");
    pids.push_back(p.node_id());
  }
  if (g == nullptr) return Tensor(std::move(out_shape), std::move(out));
  return g->op_result(
      "concat", std::move(out_shape), std::move(out), std::move(pids),
      [saved_parts = std::move(saved_parts), outer, inner, out_row,
       axis](std::span<const double> og, GradAccum& sink) {
        std::int64_t offset = 0;
        for (const Tensor& p : saved_parts) {
          std::int64_t p_row = p.dim(axis) * inner;
          if (p.requires_grad()) {
            auto buf = sink.buffer(p.node_id());
            for (std::int64_t o = 0; o < outer; ++o) {
              const double* src = og.data() + o * out_row + offset;
              double* dst = buf.data() + o * p_row;
              for (std::int64_t i = 0; i < p_row; ++i) dst[i] += src[i];
            }
          }
          offset += p_row;
        }
      });
}

Tensor slice(const Tensor& t, std::int64_t axis, std::int64_t begin,
             std::int64_t end) {
  if (axis < 0 || axis >= t.rank())
    raise(ErrorKind::Dimension, "slice: axis out of range");
  std::int64_t extent = t.dim(axis);
  if (begin < 0 || end > extent || begin >= end)
    raise(ErrorKind::Dimension, "slice: invalid range [" + std::to_string(begin) +
                                    ", " + std::to_string(end) + ") on axis of " +
                                    std::to_string(extent));
  Shape out_shape = t.shape();
  out_shape[static_cast<std::size_t>(axis)] = end - begin;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= t.dim(d);
  for (std::int64_t d = axis + 1; d < t.rank(); ++d) inner *= t.dim(d);

  std::int64_t in_row = extent * inner;
  std::int64_t out_len = (end - begin) * inner;
  std::vector<double> out(static_cast<std::size_t>(outer * out_len));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * out_len,
                t.data().data() + o * in_row + begin * inner,
                static_cast<std::size_t>(out_len) * sizeof(double));
  }
  Graph* g = common_graph({&t});
  return finish(g, "slice", std::move(out_shape), std::move(out), {&t},
                [t, outer, inner, in_row, out_len, begin](
                    std::span<const double> og, GradAccum& sink) {
                  auto buf = sink.buffer(t.node_id());
                  for (std::int64_t o = 0; o < outer; ++o) {
                    const double* src = og.data() + o * out_len;
                    double* dst = buf.data() + o * in_row + begin * inner;
                    for (std::int64_t i = 0; i < out_len; ++i) dst[i] += src[i];
                  }
                });
}

Tensor transpose(const Tensor& t) {
  if (t.rank() != 2) raise(ErrorKind::Dimension, "transpose requires rank-2");
  std::int64_t m = t.dim(0), n = t.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  {
    MapConstMat A(t.data().data(), m, n);
    MapMat B(out.data(), n, m);
    B = A.transpose();
  }
  Graph* g = common_graph({&t});
  return finish(g, "transpose", {n, m}, std::move(out), {&t},
                [t, m, n](std::span<const double> og, GradAccum& sink) {
                  MapConstMat OG(og.data(), n, m);
                  MapMat GT(sink.buffer(t.node_id()).data(), m, n);
                  GT += OG.transpose();
                });
}

Tensor reshape(const Tensor& t, Shape shape) {
  if (numel(shape) != t.size())
    raise(ErrorKind::Dimension, "reshape: cannot view " + shape_str(t.shape()) +
                                    " as " + shape_str(shape));
  Graph* g = common_graph({&t});
  std::vector<double> out(t.data().begin(), t.data().end());
  return finish(g, "reshape", std::move(shape), std::move(out), {&t},
                [t](std::span<const double> og, GradAccum& sink) {
                  auto buf = sink.buffer(t.node_id());
                  for (std::size_t i = 0; i < og.size(); ++i) buf[i] += og[i];
                });
}

Tensor scalar_mul(const Tensor& t, double c) {
  Graph* g = common_graph({&t});
  std::size_t n = static_cast<std::size_t>(t.size());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = c * t.data()[i];
  return finish(g, "scalar_mul", t.shape(), std::move(out), {&t},
                [t, c](std::span<const double> og, GradAccum& sink) {
                  auto buf = sink.buffer(t.node_id());
                  for (std::size_t i = 0; i < og.size(); ++i) buf[i] += c * og[i];
                });
}

Tensor mean(const Tensor& t, std::int64_t axis) {
  if (axis < 0 || axis >= t.rank())
    raise(ErrorKind::Dimension, "mean: axis out of range");
  std::int64_t extent = t.dim(axis);
  Shape out_shape;
  for (std::int64_t d = 0; d < t.rank(); ++d)
    if (d != axis) out_shape.push_back(t.dim(d));
  if (out_shape.empty()) out_shape = {1};  // scalar convention

  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= t.dim(d);
  for (std::int64_t d = axis + 1; d < t.rank(); ++d) inner *= t.dim(d);

  std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t e = 0; e < extent; ++e) {
      const double* src = t.data().data() + (o * extent + e) * inner;
      double* dst = out.data() + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  double inv = 1.0 / static_cast<double>(extent);
  for (double& v : out) v *= inv;

  Graph* g = common_graph({&t});
  return finish(g, "mean", std::move(out_shape), std::move(out), {&t},
                [t, outer, inner, extent, inv](std::span<const double> og,
                                               GradAccum& sink) {
                  auto buf = sink.buffer(t.node_id());
                  for (std::int64_t o = 0; o < outer; ++o) {
                    const double* src = og.data() + o * inner;
                    for (std::int64_t e = 0; e < extent; ++e) {
                      double* dst = buf.data() + (o * extent + e) * inner;
                      for (std::int64_t i = 0; i < inner; ++i)
                        dst[i] += src[i] * inv;
                    }
                  }
                });
}

Tensor sum_all(const Tensor& t) {
  Graph* g = common_graph({&t});
  double s = 0.0;
  for (double v : t.data()) s += v;
  return finish(g, "sum_all", {1}, {s}, {&t},
                [t](std::span<const double> og, GradAccum& sink) {
                  auto buf = sink.buffer(t.node_id());
                  for (double& v : buf) v += og[0];
                });
}

Tensor mean_all(const Tensor& t) {
  return scalar_mul(sum_all(t), 1.0 / static_cast<double>(t.size()));
}

Tensor clamp(const Tensor& t, double lo, double hi) {
  if (!(lo < hi)) raise(ErrorKind::Parameter, "clamp: lo must be < hi");
  Graph* g = common_graph({&t});
  std::size_t n = static_cast<std::size_t>(t.size());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = std::min(hi, std::max(lo, t.data()[i]));
  return finish(g, "clamp", t.shape(), std::move(out), {&t},
                [t, lo, hi](std::span<const double> og, GradAccum& sink) {
                  auto buf = sink.buffer(t.node_id());
                  for (std::size_t i = 0; i < og.size(); ++i) {
                    double v = t.data()[i];
                    if (v > lo && v < hi) buf[i] += og[i];
                  }
                });
}

Tensor upsample_nn(const Tensor& t, std::int64_t factor) {
  if (t.rank() != 3) raise(ErrorKind::Dimension, "upsample_nn expects [HxWxC]");
  if (factor < 1) raise(ErrorKind::Parameter, "upsample_nn: factor must be >= 1");
  std::int64_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
  std::int64_t oh = h * factor, ow = w * factor;
  std::vector<double> out(static_cast<std::size_t>(oh * ow * c));
  for (std::int64_t y = 0; y < oh; ++y) {
    for (std::int64_t x = 0; x < ow; ++x) {
      const double* src = t.data().data() + ((y / factor) * w + (x / factor)) * c;
      double* dst = out.data() + (y * ow + x) * c;
      std::memcpy(dst, src, static_cast<std::size_t>(c) * sizeof(double));
    }
  }
  Graph* g = common_graph({&t});
  return finish(g, "upsample_nn", {oh, ow, c}, std::move(out), {&t},
                [t, h, w, c, factor, oh, ow](std::span<const double> og,
                                             GradAccum& sink) {
                  auto buf = sink.buffer(t.node_id());
                  for (std::int64_t y = 0; y < oh; ++y) {
                    for (std::int64_t x = 0; x < ow; ++x) {
                      const double* src = og.data() + (y * ow + x) * c;
                      double* dst =
                          buf.data() + ((y / factor) * w + (x / factor)) * c;
                      for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                    }
                  }
                });
}

}  // namespace caml::ad
