#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "caml/comms.hpp"
#include "caml/serialize.hpp"
#include "caml/trainer.hpp"

namespace caml::exp {

// A named training job beyond the teacher/student pair: plain behavior
// cloning, an extra teacher, or a distillation from a named teacher.
struct BaselineJob {
  std::string mode;  // "bc" | "teacher" | "distill"
  model::ModelSpec spec;
  std::string teacher;  // distill only: "teacher" or an earlier baseline name
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  world::WorldConfig world;
  int train_episodes = 256;
  int eval_episodes = 128;
  model::ModelSpec teacher;
  model::ModelSpec student;
  std::vector<std::pair<std::string, BaselineJob>> baselines;
  train::TrainConfig train;
  comms::Topology topology;
  std::string output_dir = "out";
};

// Strict parse: unknown keys anywhere are config errors. A missing "seed"
// falls back to the CAML_FORGE_SEED environment variable, then to 0.
ExperimentConfig config_from_json(const io::json& j);
io::json to_json(const ExperimentConfig& cfg);

// Applies one "--set key=value" override (dotted path) onto raw config JSON.
void apply_override(io::json& j, const std::string& assignment);

struct RunOptions {
  bool strict_deterministic = false;
  bool parallel_repeats = false;
  bool write_checkpoints = true;
  bool quiet = false;
};

// Decision metrics (adr/eir/false_alarm) or segmentation miou for a trained
// parameter set over an evaluation dataset.
train::MetricsRow evaluate_model(const model::ModelSpec& spec,
                                 const nn::ParamStore& params,
                                 const world::Dataset& eval_ds);

comms::CommLedger ledger_for(const ExperimentConfig& cfg,
                             const model::ModelSpec& spec,
                             double wall_latency_seconds);

// gen-data -> train-teacher -> distill-student -> train-baselines -> eval,
// once per repeat seed. Writes report.json, metrics.csv, training_log.csv
// and checkpoints under cfg.output_dir; returns the report.
io::json run_experiment(const ExperimentConfig& cfg, const RunOptions& opts);

void export_report_csv(const io::json& report, const std::string& csv_path);

// Seeds for the per-repeat train/eval datasets.
std::uint64_t train_data_seed(std::uint64_t run_seed);
std::uint64_t eval_data_seed(std::uint64_t run_seed);

// Hash of the experiment content (output_dir excluded, so reruns into
// different directories report the same identity).
std::uint64_t experiment_hash(const ExperimentConfig& cfg);

}  // namespace caml::exp
