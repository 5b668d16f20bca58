#include "caml/nn.hpp"

#include <algorithm>
#include <cmath>

#include "caml/errors.hpp"
#include "caml/rng.hpp"

namespace caml::nn {

using ad::Tensor;

Linear make_linear(std::int64_t in, std::int64_t out, std::uint64_t seed) {
  if (in <= 0 || out <= 0)
    raise(ErrorKind::Parameter, "make_linear: dims must be positive");
  Rng rng(seed);
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(static_cast<std::size_t>(in * out));
  for (double& v : w) v = rng.uniform(-bound, bound);
  std::vector<double> b(static_cast<std::size_t>(out));
  for (double& v : b) v = rng.uniform(-bound, bound);
  return Linear{Tensor({out, in}, std::move(w)), Tensor({out}, std::move(b)),
                seed};
}

Tensor linear_forward(const Linear& layer, const Tensor& x) {
  return ad::linear(x, layer.weight, layer.bias);
}

AttentionBlock make_attention(std::int64_t dim, AttnMode mode,
                              std::uint64_t seed) {
  return AttentionBlock{make_linear(dim, dim, mix_seed({seed, 1})),
                        make_linear(dim, dim, mix_seed({seed, 2})),
                        make_linear(dim, dim, mix_seed({seed, 3})), dim, mode};
}

Tensor scaled_dot_attention(const AttentionBlock& block, const Tensor& q,
                            const Tensor& kv) {
  if (kv.rank() != 2 || q.rank() != 2)
    raise(ErrorKind::Dimension, "attention expects rank-2 q and kv");
  if (kv.dim(0) < 1)
    raise(ErrorKind::Data, "attention over an empty source set");
  if (q.dim(1) != block.dim || kv.dim(1) != block.dim)
    raise(ErrorKind::Dimension, "attention: feature dim mismatch");
  Tensor qp = linear_forward(block.query, q);
  Tensor kp = linear_forward(block.key, kv);
  Tensor vp = linear_forward(block.value, kv);
  Tensor scores = ad::scalar_mul(ad::matmul(qp, ad::transpose(kp)),
                                 1.0 / std::sqrt(static_cast<double>(block.dim)));
  Tensor weights = ad::softmax_t(scores, 1.0);
  return ad::matmul(weights, vp);
}

void validate(const DistillConfig& cfg) {
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0))
    raise(ErrorKind::Parameter, "distill alpha must be in [0, 1]");
  if (!(cfg.temperature > 0.0))
    raise(ErrorKind::Parameter, "distill temperature must be positive");
}

Tensor bce_loss(const Tensor& p, const std::vector<int>& y) {
  if (p.rank() != 1)
    raise(ErrorKind::Dimension, "bce_loss expects p[B]");
  if (static_cast<std::size_t>(p.dim(0)) != y.size())
    raise(ErrorKind::Dimension, "bce_loss: probability/label count mismatch");
  std::size_t batch = y.size();
  std::vector<double> ydata(batch), ynot(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    if (y[i] != 0 && y[i] != 1)
      raise(ErrorKind::Label, "bce_loss: labels must be 0/1");
    ydata[i] = static_cast<double>(y[i]);
    ynot[i] = 1.0 - ydata[i];
  }
  Tensor yt({static_cast<std::int64_t>(batch)}, std::move(ydata));
  Tensor ynt({static_cast<std::int64_t>(batch)}, std::move(ynot));
  Tensor pc = ad::clamp(p, kProbEps, 1.0 - kProbEps);
  Tensor qc = ad::sub(Tensor::scalar(1.0), pc);
  Tensor ll = ad::add(ad::mul(yt, ad::log(pc)), ad::mul(ynt, ad::log(qc)));
  return ad::neg(ad::mean_all(ll));
}

Tensor ce_loss(const Tensor& logits, const std::vector<int>& y) {
  if (logits.rank() < 2)
    raise(ErrorKind::Dimension, "ce_loss expects [... x C] logits");
  std::int64_t classes = logits.shape().back();
  std::int64_t sites = logits.size() / classes;
  if (static_cast<std::size_t>(sites) != y.size())
    raise(ErrorKind::Dimension, "ce_loss: label count does not match sites");
  std::vector<double> onehot(static_cast<std::size_t>(logits.size()), 0.0);
  for (std::int64_t s = 0; s < sites; ++s) {
    int cls = y[static_cast<std::size_t>(s)];
    if (cls < 0 || cls >= classes)
      raise(ErrorKind::Label, "ce_loss: class index " + std::to_string(cls) +
                                  " outside [0, " + std::to_string(classes) + ")");
    onehot[static_cast<std::size_t>(s * classes + cls)] = 1.0;
  }
  Tensor mask(logits.shape(), std::move(onehot));
  Tensor logp = ad::log_softmax_t(logits, 1.0);
  Tensor picked = ad::sum_all(ad::mul(logp, mask));
  return ad::scalar_mul(picked, -1.0 / static_cast<double>(sites));
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
               double t) {
  if (!(t > 0.0))
    raise(ErrorKind::Parameter, "kd_loss: temperature must be positive");
  if (student_logits.shape() != teacher_logits.shape())
    raise(ErrorKind::Dimension, "kd_loss: logit shapes differ: " +
                                    ad::shape_str(student_logits.shape()) +
                                    " vs " +
                                    ad::shape_str(teacher_logits.shape()));
  if (student_logits.rank() < 2)
    raise(ErrorKind::Dimension, "kd_loss expects [... x C] logits");
  std::int64_t classes = student_logits.shape().back();
  std::int64_t rows = student_logits.size() / classes;
  Tensor soft_teacher = ad::softmax_t(teacher_logits, t);
  Tensor log_soft_student = ad::log_softmax_t(student_logits, t);
  Tensor cross = ad::sum_all(ad::mul(soft_teacher, log_soft_student));
  return ad::scalar_mul(cross, -1.0 / static_cast<double>(rows));
}

Tensor student_loss(const Tensor& task_loss, const Tensor& kd,
                    const DistillConfig& cfg) {
  validate(cfg);
  double t2 = cfg.temperature * cfg.temperature;
  return ad::add(ad::scalar_mul(task_loss, 1.0 - cfg.alpha),
                 ad::scalar_mul(kd, cfg.alpha * t2));
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0) {
  if (total_steps <= 0)
    raise(ErrorKind::Parameter, "cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps)
    raise(ErrorKind::Parameter, "cosine_lr: step outside [0, total_steps]");
  double phase = 3.14159265358979323846 * static_cast<double>(step) /
                 static_cast<double>(total_steps);
  return lr0 * (1.0 + std::cos(phase)) / 2.0;
}

// ---- parameters & optimizer ----------------------------------------------

std::size_t ParamStore::add(const std::string& name, Tensor value) {
  for (const auto& n : names)
    if (n == name) raise(ErrorKind::Contract, "duplicate parameter " + name);
  names.push_back(name);
  values.push_back(std::move(value));
  return values.size() - 1;
}

std::size_t ParamStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  raise(ErrorKind::Contract, "unknown parameter " + name);
}

const Tensor& ParamStore::get(const std::string& name) const {
  return values[index_of(name)];
}

bool bitwise_equal(const ParamStore& a, const ParamStore& b) {
  if (a.names != b.names) return false;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    if (a.values[i].shape() != b.values[i].shape()) return false;
    auto da = a.values[i].data();
    auto db = b.values[i].data();
    for (std::size_t j = 0; j < da.size(); ++j)
      if (da[j] != db[j]) return false;
  }
  return true;
}

const Tensor& BoundParams::get(const std::string& name) const {
  return tensors[store->index_of(name)];
}

Linear BoundParams::linear(const std::string& prefix) const {
  return Linear{get(prefix + ".w"), get(prefix + ".b"), 0};
}

AttentionBlock BoundParams::attention(const std::string& prefix,
                                      AttnMode mode) const {
  Linear q = linear(prefix + ".q");
  return AttentionBlock{q, linear(prefix + ".k"), linear(prefix + ".v"),
                        q.weight.dim(0), mode};
}

BoundParams bind(const ParamStore& params, ad::Graph& g) {
  BoundParams bound;
  bound.store = &params;
  bound.tensors.reserve(params.size());
  for (const auto& v : params.values) bound.tensors.push_back(g.leaf(v));
  return bound;
}

BoundParams bind_frozen(const ParamStore& params) {
  BoundParams bound;
  bound.store = &params;
  bound.tensors = params.values;
  return bound;
}

AdamState make_adam_state(const ParamStore& params) {
  AdamState state;
  state.m.resize(params.size());
  state.v.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i].assign(static_cast<std::size_t>(params.values[i].size()), 0.0);
    state.v[i].assign(static_cast<std::size_t>(params.values[i].size()), 0.0);
  }
  return state;
}

void adam_step(ParamStore& params, const std::vector<Tensor>& grads,
               AdamState& state, double lr, const AdamConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    raise(ErrorKind::State, "adam_step: param/grad/state count mismatch");
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params.values[i];
    const Tensor& g = grads[i];
    if (g.shape() != p.shape())
      raise(ErrorKind::State, "adam_step: gradient shape mismatch for " +
                                  params.names[i]);
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != static_cast<std::size_t>(p.size()))
      raise(ErrorKind::State, "adam_step: state shape mismatch for " +
                                  params.names[i]);
    std::vector<double> next(p.data().begin(), p.data().end());
    for (std::size_t j = 0; j < next.size(); ++j) {
      double gj = g.data()[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      next[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    params.values[i] = Tensor(p.shape(), std::move(next));
  }
}

std::vector<Tensor> collect_grads(const BoundParams& bound, ad::Graph& g,
                                  const Tensor& loss) {
  ad::GradMap gm = g.backward(loss);
  std::vector<Tensor> grads;
  grads.reserve(bound.tensors.size());
  for (const auto& leaf : bound.tensors) {
    auto it = gm.find(leaf.node_id());
    if (it == gm.end())
      raise(ErrorKind::Contract, "collect_grads: leaf missing from gradient map");
    grads.push_back(it->second);
  }
  return grads;
}

}  // namespace caml::nn
