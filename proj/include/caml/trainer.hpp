#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "caml/models.hpp"
#include "caml/nn.hpp"
#include "caml/world.hpp"

namespace caml::train {

struct TrainConfig {
  int batch_size = 32;
  double lr0 = 1e-3;
  int epochs = 60;
  nn::DistillConfig distill{};
  std::uint64_t seed = 0;
  int repeats = 4;
};

void validate(const TrainConfig& cfg);

struct LogRow {
  int epoch = 0;
  double lr = 0.0;
  double task_loss = 0.0;
  double kd_loss = 0.0;
  double total_loss = 0.0;
};

struct Checkpoint {
  model::ModelSpec spec;
  nn::ParamStore params;
  nn::AdamState opt;
  std::uint64_t config_hash = 0;
  int epoch = 0;
  std::vector<LogRow> log;
};

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b);

// Behavior-cloning pass over the full-mask spec (teacher training).
Checkpoint train_teacher(const model::ModelSpec& spec,
                         const world::Dataset& dataset, const TrainConfig& cfg);

// Plain task-loss training of an arbitrarily masked spec (no distillation).
Checkpoint train_bc_baseline(const model::ModelSpec& spec,
                             const world::Dataset& dataset,
                             const TrainConfig& cfg);

// Teacher-frozen distillation: per batch the teacher produces soft targets at
// cfg.distill.temperature and the student minimizes
// (1 - alpha) * task + alpha * t^2 * kd. With alpha == 0 the trace is
// bit-identical to train_bc_baseline.
Checkpoint distill_student(const model::ModelSpec& student_spec,
                           const Checkpoint& teacher,
                           const world::Dataset& dataset,
                           const TrainConfig& cfg);

using MetricsRow = std::map<std::string, double>;

struct RepeatSummary {
  std::vector<MetricsRow> per_seed;
  MetricsRow mean;
  MetricsRow std_dev;
};

// Runs `job` once per repeat with seed cfg.seed + r and aggregates every
// metric key. With `parallel` the repeats run on separate threads and the
// result is guaranteed identical to sequential execution.
RepeatSummary run_repeats(const std::function<MetricsRow(std::uint64_t seed)>& job,
                          const TrainConfig& cfg, bool parallel = false);

}  // namespace caml::train
