#include "caml/experiment.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include "caml/errors.hpp"
#include "caml/metrics.hpp"
#include "caml/rng.hpp"

namespace caml::exp {

using io::json;

namespace {

constexpr std::uint64_t kTrainDataTag = 0x7472646e;
constexpr std::uint64_t kEvalDataTag = 0x65766c64;

train::TrainConfig train_config_from_json(const json& j) {
  io::require_keys(j,
                   {"batch_size", "lr0", "epochs", "alpha", "temperature",
                    "repeats"},
                   "train");
  train::TrainConfig cfg;
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.lr0 = j.value("lr0", cfg.lr0);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.distill.alpha = j.value("alpha", cfg.distill.alpha);
  cfg.distill.temperature = j.value("temperature", cfg.distill.temperature);
  cfg.repeats = j.value("repeats", cfg.repeats);
  train::validate(cfg);
  return cfg;
}

json to_json(const train::TrainConfig& cfg) {
  return json{{"batch_size", cfg.batch_size}, {"lr0", cfg.lr0},
              {"epochs", cfg.epochs},         {"alpha", cfg.distill.alpha},
              {"temperature", cfg.distill.temperature},
              {"repeats", cfg.repeats}};
}

comms::Topology topology_from_json(const json& j, int n_agents) {
  io::require_keys(j, {"kind", "k", "ego"}, "topology");
  comms::Topology t;
  t.n_agents = n_agents;
  std::string kind = j.value("kind", std::string("CENTRALIZED"));
  if (kind == "CENTRALIZED") {
    t.kind = comms::TopologyKind::Centralized;
  } else if (kind == "DECENTRALIZED_FULL") {
    t.kind = comms::TopologyKind::DecentralizedFull;
  } else if (kind == "DECENTRALIZED_K") {
    t.kind = comms::TopologyKind::DecentralizedK;
  } else {
    raise(ErrorKind::Config, "unknown topology kind '" + kind + "'");
  }
  t.k = j.value("k", 1);
  t.ego = j.value("ego", 0);
  comms::validate(t);
  return t;
}

json to_json(const comms::Topology& t) {
  const char* kind = t.kind == comms::TopologyKind::Centralized
                         ? "CENTRALIZED"
                         : (t.kind == comms::TopologyKind::DecentralizedFull
                                ? "DECENTRALIZED_FULL"
                                : "DECENTRALIZED_K");
  return json{{"kind", kind}, {"k", t.k}, {"ego", t.ego}};
}

// Model specs inherit grid/state_slots from the world config unless given.
json with_world_defaults(const json& spec_json, const world::WorldConfig& w) {
  json j = spec_json;
  if (!j.contains("grid")) j["grid"] = w.grid_size;
  if (!j.contains("state_slots")) j["state_slots"] = w.state_slots;
  if (!j.contains("agents")) {
    std::vector<int> agents;
    for (int a = 0; a < w.n_agents; ++a) agents.push_back(a);
    j["agents"] = agents;
  }
  if (!j.contains("modalities")) {
    json mods = json::array();
    for (auto m : w.modalities) mods.push_back(world::to_string(m));
    j["modalities"] = mods;
  }
  return j;
}

}  // namespace

std::uint64_t train_data_seed(std::uint64_t run_seed) {
  return mix_seed({run_seed, kTrainDataTag});
}

std::uint64_t eval_data_seed(std::uint64_t run_seed) {
  return mix_seed({run_seed, kEvalDataTag});
}

std::uint64_t experiment_hash(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("output_dir");
  return io::config_hash(j);
}

ExperimentConfig config_from_json(const json& j) {
  io::require_keys(j,
                   {"format_version", "seed", "world", "episodes", "models",
                    "train", "topology", "output_dir"},
                   "config");
  if (j.value("format_version", 1) != 1)
    raise(ErrorKind::Config, "unsupported config format_version");

  ExperimentConfig cfg;
  if (j.contains("seed")) {
    cfg.seed = j.at("seed").get<std::uint64_t>();
  } else if (const char* env = std::getenv("CAML_FORGE_SEED")) {
    cfg.seed = std::strtoull(env, nullptr, 10);
  }
  if (!j.contains("world")) raise(ErrorKind::Config, "config needs a world");
  cfg.world = io::world_config_from_json(j.at("world"));

  if (j.contains("episodes")) {
    io::require_keys(j.at("episodes"), {"train", "eval"}, "episodes");
    cfg.train_episodes = j.at("episodes").value("train", cfg.train_episodes);
    cfg.eval_episodes = j.at("episodes").value("eval", cfg.eval_episodes);
  }
  if (cfg.train_episodes < 1 || cfg.eval_episodes < 1)
    raise(ErrorKind::Config, "episode counts must be positive");

  if (!j.contains("models") || !j.at("models").contains("teacher") ||
      !j.at("models").contains("student"))
    raise(ErrorKind::Config, "config needs models.teacher and models.student");
  const json& models = j.at("models");
  io::require_keys(models, {"teacher", "student", "baselines"}, "models");
  cfg.teacher = io::model_spec_from_json(
      with_world_defaults(models.at("teacher"), cfg.world));
  cfg.student = io::model_spec_from_json(
      with_world_defaults(models.at("student"), cfg.world));

  if (models.contains("baselines")) {
    for (const auto& [name, bj] : models.at("baselines").items()) {
      io::require_keys(bj, {"mode", "spec", "teacher"}, "baseline " + name);
      BaselineJob job;
      job.mode = bj.value("mode", std::string("bc"));
      if (job.mode != "bc" && job.mode != "teacher" && job.mode != "distill")
        raise(ErrorKind::Config, "baseline mode must be bc|teacher|distill");
      if (!bj.contains("spec"))
        raise(ErrorKind::Config, "baseline " + name + " needs a spec");
      job.spec = io::model_spec_from_json(
          with_world_defaults(bj.at("spec"), cfg.world));
      job.teacher = bj.value("teacher", std::string("teacher"));
      cfg.baselines.emplace_back(name, std::move(job));
    }
  }

  if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
  if (j.contains("topology"))
    cfg.topology = topology_from_json(j.at("topology"), cfg.world.n_agents);
  else
    cfg.topology = comms::Topology{comms::TopologyKind::Centralized,
                                   cfg.world.n_agents};
  cfg.output_dir = j.value("output_dir", cfg.output_dir);
  return cfg;
}

json to_json(const ExperimentConfig& cfg) {
  json baselines = json::object();
  for (const auto& [name, job] : cfg.baselines) {
    baselines[name] = json{{"mode", job.mode},
                           {"spec", io::to_json(job.spec)},
                           {"teacher", job.teacher}};
  }
  return json{{"format_version", 1},
              {"seed", cfg.seed},
              {"world", io::to_json(cfg.world)},
              {"episodes", {{"train", cfg.train_episodes},
                            {"eval", cfg.eval_episodes}}},
              {"models", {{"teacher", io::to_json(cfg.teacher)},
                          {"student", io::to_json(cfg.student)},
                          {"baselines", baselines}}},
              {"train", to_json(cfg.train)},
              {"topology", to_json(cfg.topology)},
              {"output_dir", cfg.output_dir}};
}

void apply_override(json& j, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos)
    raise(ErrorKind::Config, "--set expects key=value, got '" + assignment + "'");
  std::string path = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    auto dot = path.find('.', start);
    std::string key = path.substr(start, dot - start);
    if (key.empty()) raise(ErrorKind::Config, "--set: empty key segment");
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (...) {
        parsed = value;  // plain string
      }
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

train::MetricsRow evaluate_model(const model::ModelSpec& spec,
                                 const nn::ParamStore& params,
                                 const world::Dataset& eval_ds) {
  if (eval_ds.episodes.empty())
    raise(ErrorKind::Data, "evaluation dataset is empty");
  nn::BoundParams bound = nn::bind_frozen(params);
  train::MetricsRow row;
  if (spec.task == model::Task::Decision) {
    std::vector<world::ActionLabel> pred, truth;
    pred.reserve(eval_ds.episodes.size());
    for (const auto& ep : eval_ds.episodes) {
      pred.push_back(model::predict_decision(model::forward(spec, bound, ep)));
      truth.push_back(ep.expert_action);
    }
    row["adr"] = metrics::adr(pred, truth);
    row["eir"] = metrics::eir(pred, truth);
    row["false_alarm"] = metrics::false_alarm_rate(pred, truth);
  } else {
    std::vector<std::vector<std::uint8_t>> preds, labels;
    preds.reserve(eval_ds.episodes.size());
    for (const auto& ep : eval_ds.episodes) {
      preds.push_back(model::predict_segmentation(
          model::forward(spec, bound, ep), spec));
      labels.push_back(ep.seg_labels);
    }
    row["miou"] = metrics::miou(preds, labels, spec.seg_classes);
  }
  return row;
}

comms::CommLedger ledger_for(const ExperimentConfig& cfg,
                             const model::ModelSpec& spec,
                             double wall_latency_seconds) {
  auto plan = comms::message_plan(cfg.topology, spec.mask);
  auto ledger =
      comms::account(plan, model::embedding_bytes(spec), cfg.topology);
  ledger.measured_wall_latency = wall_latency_seconds;
  return ledger;
}

namespace {

json ledger_json(const comms::CommLedger& ledger, const ExperimentConfig& cfg) {
  return json{{"messages", ledger.messages},
              {"bytes_per_step", ledger.bytes},
              {"bytes_per_batch", ledger.bytes * cfg.train.batch_size},
              {"predicted_time_units", ledger.predicted_time_units},
              {"predicted_space_units", ledger.predicted_space_units},
              {"measured_wall_latency", ledger.measured_wall_latency}};
}

struct SeedRun {
  std::uint64_t seed = 0;
  // name -> (metrics, ledger, log)
  std::vector<std::tuple<std::string, train::MetricsRow, comms::CommLedger,
                         std::vector<train::LogRow>>>
      rows;
};

SeedRun run_one_seed(const ExperimentConfig& cfg, const RunOptions& opts,
                     std::uint64_t run_seed, const std::string& ck_dir) {
  SeedRun result;
  result.seed = run_seed;

  auto stage = [&](const char* name, auto&& fn) -> decltype(fn()) {
    try {
      return fn();
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      raise(ErrorKind::Stage, std::string(name) + ": " + e.what());
    }
  };

  world::Dataset train_ds, eval_ds;
  try {
    train_ds = world::generate_dataset(cfg.world, train_data_seed(run_seed),
                                       cfg.train_episodes);
    eval_ds = world::generate_dataset(cfg.world, eval_data_seed(run_seed),
                                      cfg.eval_episodes);
  } catch (const Error& e) {
    raise(ErrorKind::Stage, std::string("gen-data: ") + e.what());
  }

  train::TrainConfig tc = cfg.train;
  tc.seed = run_seed;

  std::vector<std::pair<std::string, train::Checkpoint>> trained;
  auto find_teacher = [&](const std::string& name) -> const train::Checkpoint& {
    for (const auto& [n, ck] : trained)
      if (n == name) return ck;
    raise(ErrorKind::Config, "distill baseline references unknown teacher '" +
                                 name + "'");
  };

  trained.emplace_back("teacher", stage("train-teacher", [&] {
                         return train::train_teacher(cfg.teacher, train_ds, tc);
                       }));
  trained.emplace_back("student", stage("distill-student", [&] {
                         return train::distill_student(
                             cfg.student, trained.front().second, train_ds, tc);
                       }));
  // bc/teacher baselines first so distill baselines can reference them
  for (const auto& [name, job] : cfg.baselines) {
    if (job.mode == "bc") {
      trained.emplace_back(name, stage("train-baseline", [&] {
                             return train::train_bc_baseline(job.spec, train_ds,
                                                             tc);
                           }));
    } else if (job.mode == "teacher") {
      trained.emplace_back(name, stage("train-baseline", [&] {
                             return train::train_teacher(job.spec, train_ds, tc);
                           }));
    }
  }
  for (const auto& [name, job] : cfg.baselines) {
    if (job.mode != "distill") continue;
    const train::Checkpoint& teacher = find_teacher(job.teacher);
    trained.emplace_back(name, stage("train-baseline", [&] {
                           return train::distill_student(job.spec, teacher,
                                                         train_ds, tc);
                         }));
  }

  std::uint64_t hash = experiment_hash(cfg);
  for (auto& [name, ck] : trained) {
    ck.config_hash = hash;
    auto start = std::chrono::steady_clock::now();
    train::MetricsRow metrics_row = stage("eval", [&] {
      return evaluate_model(ck.spec, ck.params, eval_ds);
    });
    double wall = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - start)
                      .count() /
                  static_cast<double>(eval_ds.episodes.size());
    if (opts.strict_deterministic) wall = 0.0;
    comms::CommLedger ledger = ledger_for(cfg, ck.spec, wall);
    if (opts.write_checkpoints) {
      io::save_checkpoint(ck, ck_dir + "/" + name + "_seed" +
                                  std::to_string(run_seed) + ".ckpt");
    }
    result.rows.emplace_back(name, std::move(metrics_row), ledger, ck.log);
  }
  return result;
}

}  // namespace

json run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  std::string ck_dir = cfg.output_dir + "/checkpoints";
  if (opts.write_checkpoints) fs::create_directories(ck_dir);

  std::vector<SeedRun> runs(static_cast<std::size_t>(cfg.train.repeats));
  auto worker = [&](int r) {
    runs[static_cast<std::size_t>(r)] =
        run_one_seed(cfg, opts, cfg.seed + static_cast<std::uint64_t>(r),
                     ck_dir);
  };
  if (opts.parallel_repeats) {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(
        static_cast<std::size_t>(cfg.train.repeats));
    for (int r = 0; r < cfg.train.repeats; ++r)
      threads.emplace_back([&, r] {
        try {
          worker(r);
        } catch (...) {
          errors[static_cast<std::size_t>(r)] = std::current_exception();
        }
      });
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (int r = 0; r < cfg.train.repeats; ++r) worker(r);
  }

  json cfg_json = to_json(cfg);
  json report;
  report["format_version"] = 1;
  report["config_hash"] = io::hash_hex(experiment_hash(cfg));
  report["task"] = model::to_string(cfg.teacher.task);
  report["topology"] = cfg_json.at("topology");

  json rows = json::array();
  std::map<std::string, std::map<std::string, std::vector<double>>> collected;
  for (const auto& run : runs) {
    for (const auto& [name, metrics_row, ledger, log] : run.rows) {
      json row;
      row["model"] = name;
      row["seed"] = run.seed;
      row["metrics"] = metrics_row;
      row["comm"] = ledger_json(ledger, cfg);
      rows.push_back(row);
      for (const auto& [k, v] : metrics_row) collected[name][k].push_back(v);
    }
  }
  report["rows"] = rows;

  json aggregate = json::object();
  for (const auto& [name, by_metric] : collected) {
    json entry = json::object();
    for (const auto& [metric, values] : by_metric) {
      auto [mean, sd] = metrics::mean_std(values);
      entry[metric] = json{{"mean", mean}, {"std", sd}};
    }
    aggregate[name] = entry;
  }
  report["aggregate"] = aggregate;

  {
    std::ofstream out(cfg.output_dir + "/report.json",
                      std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorKind::Stage, "report: cannot write report.json");
    out << report.dump(2) << "\n";
  }
  export_report_csv(report, cfg.output_dir + "/metrics.csv");
  {
    std::ofstream out(cfg.output_dir + "/training_log.csv",
                      std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorKind::Stage, "report: cannot write training_log.csv");
    out << "model,seed,epoch,lr,task_loss,kd_loss,total_loss\n";
    char buf[256];
    for (const auto& run : runs) {
      for (const auto& [name, metrics_row, ledger, log] : run.rows) {
        for (const auto& row : log) {
          std::snprintf(buf, sizeof(buf), "%s,%llu,%d,%.17g,%.17g,%.17g,%.17g\n",
                        name.c_str(),
                        static_cast<unsigned long long>(run.seed), row.epoch,
                        row.lr, row.task_loss, row.kd_loss, row.total_loss);
          out << buf;
        }
      }
    }
  }
  return report;
}

void export_report_csv(const json& report, const std::string& csv_path) {
  std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorKind::Stage, "report: cannot write " + csv_path);
  out << "model,seed,metric,value\n";
  char buf[256];
  for (const auto& row : report.at("rows")) {
    std::string model = row.at("model").get<std::string>();
    auto seed = row.at("seed").get<std::uint64_t>();
    for (const auto& [metric, value] : row.at("metrics").items()) {
      std::snprintf(buf, sizeof(buf), "%s,%llu,%s,%.17g\n", model.c_str(),
                    static_cast<unsigned long long>(seed), metric.c_str(),
                    value.get<double>());
      out << buf;
    }
    for (const auto& [metric, value] : row.at("comm").items()) {
      std::snprintf(buf, sizeof(buf), "%s,%llu,comm.%s,%.17g\n", model.c_str(),
                    static_cast<unsigned long long>(seed), metric.c_str(),
                    value.get<double>());
      out << buf;
    }
  }
}

}  // namespace caml::exp
