#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "caml/tensor.hpp"

namespace caml::nn {

// Affine layer parameters. Weight is [out x in], bias is [out]; both may be
// plain constants (inference) or graph leaves (training).
struct Linear {
  ad::Tensor weight;
  ad::Tensor bias;
  std::uint64_t init_seed = 0;
};

// Uniform +-1/sqrt(fan_in) init from a per-layer seeded stream.
Linear make_linear(std::int64_t in, std::int64_t out, std::uint64_t seed);

ad::Tensor linear_forward(const Linear& layer, const ad::Tensor& x);

enum class AttnMode { Self, Cross };

struct AttentionBlock {
  Linear query;
  Linear key;
  Linear value;
  std::int64_t dim = 0;
  AttnMode mode = AttnMode::Self;
};

AttentionBlock make_attention(std::int64_t dim, AttnMode mode,
                              std::uint64_t seed);

// softmax(qWq (kvWk)^T / sqrt(d)) (kvWv). q is [Q x d], kv is [S x d];
// S = 0 raises a Data error (callers substitute a null embedding).
ad::Tensor scaled_dot_attention(const AttentionBlock& block, const ad::Tensor& q,
                                const ad::Tensor& kv);

struct DistillConfig {
  double alpha = 0.9;
  double temperature = 4.0;
};
void validate(const DistillConfig& cfg);

inline constexpr double kProbEps = 1e-7;

// Mean binary cross-entropy of probabilities p[B] against labels in {0,1}.
ad::Tensor bce_loss(const ad::Tensor& p, const std::vector<int>& y);

// Mean softmax cross-entropy; the last axis of `logits` indexes classes and
// every other axis is a prediction site.
ad::Tensor ce_loss(const ad::Tensor& logits, const std::vector<int>& y);

// Distillation cross-entropy between temperature-softened distributions,
// averaged over rows. Gradient flows through the student side only when the
// teacher logits are constants.
ad::Tensor kd_loss(const ad::Tensor& student_logits,
                   const ad::Tensor& teacher_logits, double t);

// (1 - alpha) * task + alpha * t^2 * kd.
ad::Tensor student_loss(const ad::Tensor& task_loss, const ad::Tensor& kd,
                        const DistillConfig& cfg);

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0);

// ---- parameters & optimizer ----------------------------------------------

// Ordered, named parameter set; insertion order is the canonical order for
// optimizer state and serialization.
struct ParamStore {
  std::vector<std::string> names;
  std::vector<ad::Tensor> values;

  std::size_t add(const std::string& name, ad::Tensor value);
  std::size_t index_of(const std::string& name) const;
  const ad::Tensor& get(const std::string& name) const;
  std::size_t size() const { return values.size(); }
};

bool bitwise_equal(const ParamStore& a, const ParamStore& b);

// Per-step view of a ParamStore: either graph leaves (training) or the
// stored constants (inference).
struct BoundParams {
  const ParamStore* store = nullptr;
  std::vector<ad::Tensor> tensors;

  const ad::Tensor& get(const std::string& name) const;
  Linear linear(const std::string& prefix) const;
  AttentionBlock attention(const std::string& prefix, AttnMode mode) const;
};

BoundParams bind(const ParamStore& params, ad::Graph& g);
BoundParams bind_frozen(const ParamStore& params);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

AdamState make_adam_state(const ParamStore& params);

// Standard Adam update; `grads` must align with `params` entry-for-entry.
void adam_step(ParamStore& params, const std::vector<ad::Tensor>& grads,
               AdamState& state, double lr, const AdamConfig& cfg = {});

// Gradients of `loss` arranged in ParamStore order.
std::vector<ad::Tensor> collect_grads(const BoundParams& bound,
                                      ad::Graph& g, const ad::Tensor& loss);

}  // namespace caml::nn
