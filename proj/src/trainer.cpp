#include "caml/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "caml/errors.hpp"
#include "caml/metrics.hpp"
#include "caml/rng.hpp"

namespace caml::train {

using ad::Tensor;

namespace {

constexpr std::uint64_t kInitTag = 0x696e6974;     // parameter init
constexpr std::uint64_t kShuffleTag = 0x73687566;  // per-epoch permutation

// Task loss over a batch of episodes: BCE on the brake probability for
// decision models, mean CE over all cells for segmentation.
Tensor task_loss(const model::ModelSpec& spec, const Tensor& logits,
                 std::span<const world::EpisodeRecord* const> batch) {
  if (spec.task == model::Task::Decision) {
    std::vector<int> y;
    y.reserve(batch.size());
    for (const auto* ep : batch)
      y.push_back(ep->expert_action == world::ActionLabel::Brake ? 1 : 0);
    Tensor probs = ad::softmax_t(logits, 1.0);
    Tensor brake = ad::slice(probs, 1, 1, 2);
    return nn::bce_loss(
        ad::reshape(brake, {static_cast<std::int64_t>(batch.size())}), y);
  }
  std::vector<int> y;
  y.reserve(batch.size() * static_cast<std::size_t>(spec.grid * spec.grid));
  for (const auto* ep : batch)
    for (std::uint8_t cls : ep->seg_labels) y.push_back(cls);
  return nn::ce_loss(logits, y);
}

struct StepLosses {
  double task = 0.0;
  double kd = 0.0;
  double total = 0.0;
};

Checkpoint run_training(const model::ModelSpec& spec,
                        const world::Dataset& dataset, const TrainConfig& cfg,
                        const Checkpoint* teacher) {
  validate(cfg);
  model::validate(spec);
  if (dataset.episodes.empty())
    raise(ErrorKind::Data, "training dataset is empty");
  if (teacher != nullptr) {
    nn::validate(cfg.distill);
    if (!model::spec_homologous(teacher->spec, spec))
      raise(ErrorKind::Contract,
            "student spec must differ from the teacher only in the mask");
    if (!model::mask_subset(spec.mask, teacher->spec.mask))
      raise(ErrorKind::Contract, "student mask must be a subset of the teacher mask");
  }

  model::ModelParams mp = model::init_params(spec, mix_seed({cfg.seed, kInitTag}));
  nn::AdamState opt = nn::make_adam_state(mp.store);

  const auto& episodes = dataset.episodes;
  std::int64_t n = static_cast<std::int64_t>(episodes.size());
  std::int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  bool use_kd = teacher != nullptr && cfg.distill.alpha > 0.0;
  nn::BoundParams teacher_frozen;
  if (use_kd) teacher_frozen = nn::bind_frozen(teacher->params);

  Checkpoint ck;
  ck.spec = spec;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng(mix_seed({cfg.seed, kShuffleTag,
                              static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    double epoch_task = 0.0, epoch_kd = 0.0, epoch_total = 0.0, epoch_lr = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      std::vector<const world::EpisodeRecord*> batch;
      for (std::int64_t i = start; i < std::min(n, start + cfg.batch_size); ++i)
        batch.push_back(&episodes[static_cast<std::size_t>(
            order[static_cast<std::size_t>(i)])]);

      ad::Graph g;
      nn::BoundParams bound = nn::bind(mp.store, g);
      Tensor logits = model::batch_logits(spec, bound, batch);
      Tensor task = task_loss(spec, logits, batch);

      Tensor total = task;
      double kd_value = 0.0;
      if (use_kd) {
        Tensor teacher_logits =
            model::batch_logits(teacher->spec, teacher_frozen, batch);
        Tensor kd = nn::kd_loss(logits, teacher_logits, cfg.distill.temperature);
        kd_value = kd.value();
        total = nn::student_loss(task, kd, cfg.distill);
      }

      double lr = nn::cosine_lr(step, total_steps, cfg.lr0);
      auto grads = nn::collect_grads(bound, g, total);
      nn::adam_step(mp.store, grads, opt, lr);

      epoch_task += task.value();
      epoch_kd += kd_value;
      epoch_total += total.value();
      epoch_lr += lr;
      ++batches;
      ++step;
    }
    ck.log.push_back(LogRow{epoch, epoch_lr / batches, epoch_task / batches,
                            epoch_kd / batches, epoch_total / batches});
  }

  ck.params = std::move(mp.store);
  ck.opt = std::move(opt);
  ck.epoch = cfg.epochs;
  return ck;
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (cfg.batch_size < 1) raise(ErrorKind::Config, "batch_size must be positive");
  if (cfg.epochs < 0) raise(ErrorKind::Config, "epochs must be non-negative");
  if (!(cfg.lr0 >= 0.0)) raise(ErrorKind::Config, "lr0 must be non-negative");
  if (cfg.repeats < 1) raise(ErrorKind::Config, "repeats must be >= 1");
  nn::validate(cfg.distill);
}

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b) {
  if (!(a.spec == b.spec) || a.epoch != b.epoch ||
      a.opt.step != b.opt.step || a.log.size() != b.log.size())
    return false;
  if (!nn::bitwise_equal(a.params, b.params)) return false;
  for (std::size_t i = 0; i < a.opt.m.size(); ++i)
    if (a.opt.m[i] != b.opt.m[i] || a.opt.v[i] != b.opt.v[i]) return false;
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    const LogRow &x = a.log[i], &y = b.log[i];
    if (x.epoch != y.epoch || x.lr != y.lr || x.task_loss != y.task_loss ||
        x.kd_loss != y.kd_loss || x.total_loss != y.total_loss)
      return false;
  }
  return true;
}

Checkpoint train_teacher(const model::ModelSpec& spec,
                         const world::Dataset& dataset, const TrainConfig& cfg) {
  if (!model::is_full_mask(spec))
    raise(ErrorKind::Contract,
          "teacher training requires the full modality mask");
  return run_training(spec, dataset, cfg, nullptr);
}

Checkpoint train_bc_baseline(const model::ModelSpec& spec,
                             const world::Dataset& dataset,
                             const TrainConfig& cfg) {
  return run_training(spec, dataset, cfg, nullptr);
}

Checkpoint distill_student(const model::ModelSpec& student_spec,
                           const Checkpoint& teacher,
                           const world::Dataset& dataset,
                           const TrainConfig& cfg) {
  return run_training(student_spec, dataset, cfg, &teacher);
}

RepeatSummary run_repeats(const std::function<MetricsRow(std::uint64_t)>& job,
                          const TrainConfig& cfg, bool parallel) {
  validate(cfg);
  RepeatSummary summary;
  summary.per_seed.resize(static_cast<std::size_t>(cfg.repeats));
  if (parallel) {
    std::vector<std::thread> workers;
    for (int r = 0; r < cfg.repeats; ++r) {
      workers.emplace_back([&, r] {
        summary.per_seed[static_cast<std::size_t>(r)] =
            job(cfg.seed + static_cast<std::uint64_t>(r));
      });
    }
    for (auto& w : workers) w.join();
  } else {
    for (int r = 0; r < cfg.repeats; ++r)
      summary.per_seed[static_cast<std::size_t>(r)] =
          job(cfg.seed + static_cast<std::uint64_t>(r));
  }

  for (const auto& [key, unused] : summary.per_seed.front()) {
    std::vector<double> values;
    for (const auto& row : summary.per_seed) {
      auto it = row.find(key);
      if (it == row.end())
        raise(ErrorKind::Contract, "repeat rows disagree on metric keys");
      values.push_back(it->second);
    }
    auto [mean, sd] = metrics::mean_std(values);
    summary.mean[key] = mean;
    summary.std_dev[key] = sd;
  }
  return summary;
}

}  // namespace caml::train
