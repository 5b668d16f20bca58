// camlforge: deterministic multi-agent distillation testbed CLI.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "caml/errors.hpp"
#include "caml/experiment.hpp"
#include "caml/info_theory.hpp"

using namespace caml;
using io::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;
constexpr int kExitCheckFailed = 4;

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::Config, "cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    raise(ErrorKind::Config, path + ": " + e.what());
  }
  return j;
}

json load_config(const std::string& path,
                 const std::vector<std::string>& overrides) {
  json j = load_json(path);
  for (const auto& assignment : overrides) exp::apply_override(j, assignment);
  return j;
}

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Config:
    case ErrorKind::Format:
      return kExitConfig;
    default:
      return kExitStage;
  }
}

// ---- subcommand bodies -----------------------------------------------------

int cmd_gen_data(const json& cfg_json, const std::string& out_base,
                 int episodes, std::int64_t seed_flag, bool eval_split) {
  exp::ExperimentConfig cfg = exp::config_from_json(cfg_json);
  std::uint64_t seed = seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag)
                                      : cfg.seed;
  std::uint64_t data_seed = eval_split ? exp::eval_data_seed(seed)
                                       : exp::train_data_seed(seed);
  int count = episodes > 0
                  ? episodes
                  : (eval_split ? cfg.eval_episodes : cfg.train_episodes);
  world::Dataset ds = world::generate_dataset(cfg.world, data_seed, count);
  io::save_dataset(ds, out_base);
  std::printf("wrote %d episodes to %s.{manifest.json,shard.bin}\n", count,
              out_base.c_str());
  return kExitOk;
}

int cmd_train_teacher(const json& cfg_json, const std::string& data_base,
                      const std::string& out_path, std::int64_t seed_flag) {
  exp::ExperimentConfig cfg = exp::config_from_json(cfg_json);
  world::Dataset ds = io::load_dataset(data_base);
  train::TrainConfig tc = cfg.train;
  tc.seed = seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : cfg.seed;
  train::Checkpoint ck = train::train_teacher(cfg.teacher, ds, tc);
  ck.config_hash = exp::experiment_hash(cfg);
  io::save_checkpoint(ck, out_path);
  std::printf("teacher trained: final task_loss %.6f -> %s\n",
              ck.log.empty() ? 0.0 : ck.log.back().task_loss, out_path.c_str());
  return kExitOk;
}

int cmd_train_student(const json& cfg_json, const std::string& data_base,
                      const std::string& teacher_path,
                      const std::string& out_path, std::int64_t seed_flag) {
  exp::ExperimentConfig cfg = exp::config_from_json(cfg_json);
  world::Dataset ds = io::load_dataset(data_base);
  train::Checkpoint teacher = io::load_checkpoint(teacher_path);
  train::TrainConfig tc = cfg.train;
  tc.seed = seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : cfg.seed;
  train::Checkpoint ck = train::distill_student(cfg.student, teacher, ds, tc);
  ck.config_hash = exp::experiment_hash(cfg);
  io::save_checkpoint(ck, out_path);
  std::printf("student distilled: final total_loss %.6f -> %s\n",
              ck.log.empty() ? 0.0 : ck.log.back().total_loss,
              out_path.c_str());
  return kExitOk;
}

int cmd_train_baseline(const json& cfg_json, const std::string& data_base,
                       const std::string& name, const std::string& out_path,
                       const std::string& teacher_path,
                       std::int64_t seed_flag) {
  exp::ExperimentConfig cfg = exp::config_from_json(cfg_json);
  const exp::BaselineJob* job = nullptr;
  for (const auto& [n, j] : cfg.baselines)
    if (n == name) job = &j;
  if (job == nullptr)
    raise(ErrorKind::Config, "config defines no baseline named '" + name + "'");
  world::Dataset ds = io::load_dataset(data_base);
  train::TrainConfig tc = cfg.train;
  tc.seed = seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : cfg.seed;

  train::Checkpoint ck;
  if (job->mode == "bc") {
    ck = train::train_bc_baseline(job->spec, ds, tc);
  } else if (job->mode == "teacher") {
    ck = train::train_teacher(job->spec, ds, tc);
  } else {
    if (teacher_path.empty())
      raise(ErrorKind::Config,
            "baseline '" + name + "' distills; pass --teacher <ckpt>");
    train::Checkpoint teacher = io::load_checkpoint(teacher_path);
    ck = train::distill_student(job->spec, teacher, ds, tc);
  }
  ck.config_hash = exp::experiment_hash(cfg);
  io::save_checkpoint(ck, out_path);
  std::printf("baseline '%s' trained -> %s\n", name.c_str(), out_path.c_str());
  return kExitOk;
}

int cmd_eval(const json& cfg_json, const std::string& data_base,
             const std::string& ckpt_path, const std::string& report_path) {
  exp::ExperimentConfig cfg = exp::config_from_json(cfg_json);
  world::Dataset ds = io::load_dataset(data_base);
  train::Checkpoint ck = io::load_checkpoint(ckpt_path);
  train::MetricsRow row = exp::evaluate_model(ck.spec, ck.params, ds);
  comms::CommLedger ledger = exp::ledger_for(cfg, ck.spec, 0.0);
  json out = {{"metrics", row},
              {"comm",
               {{"messages", ledger.messages},
                {"bytes_per_step", ledger.bytes},
                {"predicted_time_units", ledger.predicted_time_units},
                {"predicted_space_units", ledger.predicted_space_units}}}};
  if (!report_path.empty()) {
    std::ofstream f(report_path, std::ios::binary | std::ios::trunc);
    f << out.dump(2) << "\n";
  }
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

int cmd_run(const json& cfg_json, bool strict, bool parallel) {
  exp::ExperimentConfig cfg = exp::config_from_json(cfg_json);
  exp::RunOptions opts;
  opts.strict_deterministic = strict;
  opts.parallel_repeats = parallel;
  json report = exp::run_experiment(cfg, opts);
  std::printf("experiment complete: %s/report.json\n", cfg.output_dir.c_str());
  for (const auto& [name, entry] : report.at("aggregate").items())
    for (const auto& [metric, ms] : entry.items())
      std::printf("  %-14s %-12s mean %.4f std %.4f\n", name.c_str(),
                  metric.c_str(), ms.at("mean").get<double>(),
                  ms.at("std").get<double>());
  return kExitOk;
}

int cmd_verify_mi(const std::string& table_path, const std::string& world_path,
                  int n_seeds) {
  info::JointTable table;
  if (!table_path.empty()) {
    json j = load_json(table_path);
    io::require_keys(j, {"cards", "probs"}, "joint table");
    table.cards = j.at("cards").get<std::vector<int>>();
    table.probs = j.at("probs").get<std::vector<double>>();
    info::validate(table);
  } else if (!world_path.empty()) {
    json j = load_json(world_path);
    world::WorldConfig wc = io::world_config_from_json(
        j.contains("world") ? j.at("world") : j);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < n_seeds; ++i)
      seeds.push_back(world::dataset_episode_seed(1, i));
    table = world::export_discrete_abstraction(wc, seeds);
  } else {
    raise(ErrorKind::Config, "verify-mi needs --table or --from-world");
  }

  info::ChainRuleReport report = info::chain_rule_check(table);
  std::printf("I(y;X) = %.9f bits, H(y) = %.9f bits\n", report.total_bits,
              info::entropy_y(table));
  for (std::size_t k = 0; k < report.term_bits.size(); ++k)
    std::printf("  term %zu: I(y;x%zu|x1..x%zu) = %.9f   I(y;x%zu) = %.9f\n",
                k + 1, k + 1, k, report.term_bits[k], k + 1,
                report.single_bits[k]);
  std::printf("chain-rule identity & monotonicity: %s\n",
              report.ok ? "PASS" : "FAIL");
  if (!report.ok) {
    std::printf("  %s\n", report.detail.c_str());
    return kExitCheckFailed;
  }
  return kExitOk;
}

int cmd_verify_comms(int n_max) {
  bool ok = true;
  for (int n = 2; n <= n_max; ++n) {
    world::ModalityMask mask;
    for (int a = 0; a < n; ++a) mask[a] = {world::Modality::Appearance};
    std::vector<comms::Topology> tops = {
        {comms::TopologyKind::Centralized, n},
        {comms::TopologyKind::DecentralizedFull, n}};
    for (int k = 1; k < n; ++k)
      tops.push_back({comms::TopologyKind::DecentralizedK, n, k});
    for (const auto& t : tops) {
      long long measured =
          static_cast<long long>(comms::message_plan(t, mask).size());
      long long predicted = comms::predicted_message_count(t);
      if (measured != predicted) {
        std::printf("MISMATCH N=%d kind=%d k=%d measured=%lld predicted=%lld\n",
                    n, static_cast<int>(t.kind), t.k, measured, predicted);
        ok = false;
      }
    }
  }
  std::printf("message plans vs closed forms for N in [2, %d]: %s\n", n_max,
              ok ? "PASS" : "FAIL");
  return ok ? kExitOk : kExitCheckFailed;
}

int cmd_report(const std::string& in_path, const std::string& csv_path) {
  json report = load_json(in_path);
  exp::export_report_csv(report, csv_path);
  std::printf("wrote %s\n", csv_path.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic multi-agent multi-modal distillation testbed"};
  app.require_subcommand(1);

  std::string config_path, out_base, data_base, teacher_path, ckpt_path;
  std::string out_path, name, report_path, table_path, world_path, csv_path;
  std::string in_path;
  std::vector<std::string> overrides;
  int episodes = 0, n_seeds = 4096, n_max = 16;
  std::int64_t seed_flag = -1;
  bool eval_split = false, strict = false, parallel = false;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config JSON")
        ->required();
    cmd->add_option("--set", overrides, "override config keys (a.b.c=value)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate an episode dataset");
  add_config(gen);
  gen->add_option("--out", out_base, "output basename")->required();
  gen->add_option("--episodes", episodes, "episode count override");
  gen->add_option("--seed", seed_flag, "seed override");
  gen->add_flag("--eval", eval_split, "use the eval-split data seed");

  auto* tt = app.add_subcommand("train-teacher", "train the teacher model");
  add_config(tt);
  tt->add_option("--data", data_base, "dataset basename")->required();
  tt->add_option("--out", out_path, "checkpoint path")->required();
  tt->add_option("--seed", seed_flag, "seed override");

  auto* ts = app.add_subcommand("train-student", "distill the student model");
  add_config(ts);
  ts->add_option("--data", data_base, "dataset basename")->required();
  ts->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  ts->add_option("--out", out_path, "checkpoint path")->required();
  ts->add_option("--seed", seed_flag, "seed override");

  auto* tb = app.add_subcommand("train-baseline", "train a named baseline");
  add_config(tb);
  tb->add_option("--data", data_base, "dataset basename")->required();
  tb->add_option("--name", name, "baseline name from the config")->required();
  tb->add_option("--out", out_path, "checkpoint path")->required();
  tb->add_option("--teacher", teacher_path, "teacher checkpoint (distill mode)");
  tb->add_option("--seed", seed_flag, "seed override");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_config(ev);
  ev->add_option("--data", data_base, "dataset basename")->required();
  ev->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  ev->add_option("--report", report_path, "also write metrics JSON here");

  auto* vm = app.add_subcommand("verify-mi",
                                "check the information-gain properties");
  vm->add_option("--table", table_path, "JointTable JSON ({cards, probs})");
  vm->add_option("--from-world", world_path,
                 "world config JSON; enumerate the seeded episode family");
  vm->add_option("--seeds", n_seeds, "episodes to enumerate (default 4096)");

  auto* vc = app.add_subcommand(
      "verify-comms", "check message plans against the closed forms");
  vc->add_option("--n-max", n_max, "largest agent count to sweep");

  auto* rp = app.add_subcommand("report", "re-export a report as CSV");
  rp->add_option("--in", in_path, "report.json path")->required();
  rp->add_option("--csv", csv_path, "output CSV path")->required();

  auto* run = app.add_subcommand("run", "run the full experiment pipeline");
  add_config(run);
  run->add_flag("--strict-deterministic", strict,
                "zero out wall-clock fields for byte-identical reports");
  run->add_flag("--parallel-repeats", parallel,
                "run repeat seeds on separate threads");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_data(load_config(config_path, overrides), out_base,
                          episodes, seed_flag, eval_split);
    if (tt->parsed())
      return cmd_train_teacher(load_config(config_path, overrides), data_base,
                               out_path, seed_flag);
    if (ts->parsed())
      return cmd_train_student(load_config(config_path, overrides), data_base,
                               teacher_path, out_path, seed_flag);
    if (tb->parsed())
      return cmd_train_baseline(load_config(config_path, overrides), data_base,
                                name, out_path, teacher_path, seed_flag);
    if (ev->parsed())
      return cmd_eval(load_config(config_path, overrides), data_base,
                      ckpt_path, report_path);
    if (vm->parsed()) return cmd_verify_mi(table_path, world_path, n_seeds);
    if (vc->parsed()) return cmd_verify_comms(n_max);
    if (rp->parsed()) return cmd_report(in_path, csv_path);
    if (run->parsed())
      return cmd_run(load_config(config_path, overrides), strict, parallel);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitStage;
  }
  return kExitOk;
}
