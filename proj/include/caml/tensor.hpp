#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "caml/errors.hpp"

namespace caml::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Graph;

// Dense row-major f64 tensor. Data is immutable after construction and
// shared between copies; a tensor participates in a Graph when node_id()
// is non-negative.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t size() const {
    return data_ ? static_cast<std::int64_t>(data_->size()) : 0;
  }
  std::span<const double> data() const {
    return data_ ? std::span<const double>(*data_) : std::span<const double>();
  }
  // Scalar-only accessor.
  double value() const;
  double at(std::int64_t flat_index) const;
  std::int64_t dim(std::int64_t axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

  bool defined() const { return static_cast<bool>(data_); }
  bool requires_grad() const { return node_ >= 0; }
  std::int64_t node_id() const { return node_; }
  Graph* graph() const { return graph_; }

 private:
  friend class Graph;
  std::shared_ptr<const std::vector<double>> data_;
  Shape shape_;
  Graph* graph_ = nullptr;
  std::int64_t node_ = -1;
};

using GradMap = std::unordered_map<std::int64_t, Tensor>;

// Accumulates gradient contributions into per-node buffers during backward.
class GradAccum {
 public:
  explicit GradAccum(Graph& graph) : graph_(graph) {}
  // Zero-initialized on first touch; callers add into the returned span.
  std::span<double> buffer(std::int64_t node);

 private:
  friend class Graph;
  Graph& graph_;
};

// Append-only tape of operations. Node handles are topologically ordered by
// construction (every parent handle < child handle), so one reverse sweep
// visits each node exactly once.
class Graph {
 public:
  using BackwardFn =
      std::function<void(std::span<const double> out_grad, GradAccum& sink)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Registers a differentiable leaf (parameter).
  Tensor leaf(Shape shape, std::vector<double> data);
  Tensor leaf(const Tensor& value);

  // Registers an op result. `parents` lists the graph-attached inputs.
  Tensor op_result(const char* tag, Shape shape, std::vector<double> data,
                   std::vector<std::int64_t> parents, BackwardFn backward);

  std::size_t node_count() const { return nodes_.size(); }
  const char* node_tag(std::int64_t id) const {
    return nodes_[static_cast<std::size_t>(id)].tag;
  }

  // Reverse-mode sweep from a scalar loss. Returns gradients for every
  // requires_grad leaf; leaves not reachable from the loss get zeros.
  GradMap backward(const Tensor& loss);

 private:
  friend class GradAccum;
  struct Node {
    const char* tag;
    Shape shape;
    std::int64_t size;
    std::vector<std::int64_t> parents;
    BackwardFn backward;  // empty for leaves
    bool is_leaf;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grad_buffers_;  // live only during backward
};

// ---- Operations ------------------------------------------------------

enum class EwOp { Add, Sub, Mul, Relu, Exp, Log, Neg };

Tensor elementwise(EwOp op, const Tensor& a);
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
// Fused affine map: x[B x in] * w[out x in]^T + bias[out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Temperature softmax over the last axis, max-subtracted.
Tensor softmax_t(const Tensor& logits, double t);
Tensor log_softmax_t(const Tensor& logits, double t);

Tensor concat(std::span<const Tensor> parts, std::int64_t axis);
Tensor slice(const Tensor& t, std::int64_t axis, std::int64_t begin,
             std::int64_t end);
Tensor transpose(const Tensor& t);  // rank-2
Tensor reshape(const Tensor& t, Shape shape);
Tensor scalar_mul(const Tensor& t, double c);
Tensor mean(const Tensor& t, std::int64_t axis);
Tensor sum_all(const Tensor& t);
Tensor mean_all(const Tensor& t);
// Pass-through gradient inside (lo, hi), zero outside.
Tensor clamp(const Tensor& t, double lo, double hi);
// Nearest-neighbor upsampling of an [H x W x C] map by an integer factor.
Tensor upsample_nn(const Tensor& t, std::int64_t factor);

}  // namespace caml::ad
