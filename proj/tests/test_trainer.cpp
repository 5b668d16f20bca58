#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "caml/errors.hpp"
#include "caml/serialize.hpp"
#include "caml/trainer.hpp"

using namespace caml;
using world::Modality;

namespace {

world::WorldConfig smoke_world() {
  world::WorldConfig cfg;
  cfg.grid_size = 8;
  cfg.n_agents = 2;
  cfg.sensing_radius = 6;
  cfg.n_occluders = 3;
  cfg.n_background = 2;
  return cfg;
}

model::ModelSpec smoke_spec() {
  model::ModelSpec spec;
  spec.grid = 8;
  spec.embed_dim = 8;
  spec.head_hidden = 16;
  spec.agents = {0, 1};
  spec.modalities = {Modality::Appearance, Modality::Range};
  spec.mask = model::full_mask(spec);
  return spec;
}

train::TrainConfig smoke_train(int epochs, std::uint64_t seed) {
  train::TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = epochs;
  cfg.seed = seed;
  cfg.repeats = 2;
  return cfg;
}

const world::Dataset& smoke_dataset() {
  static world::Dataset ds = world::generate_dataset(smoke_world(), 123, 24);
  return ds;
}

}  // namespace

TEST_CASE("teacher loss decreases from the first step on a one-episode set") {
  world::Dataset one;
  one.cfg = smoke_world();
  one.seed = 5;
  one.episodes.push_back(world::generate_episode(one.cfg, 5));

  auto cfg = smoke_train(2, 7);
  cfg.batch_size = 1;
  auto ck = train::train_teacher(smoke_spec(), one, cfg);
  REQUIRE(ck.log.size() == 2);
  CHECK(ck.log[1].task_loss < ck.log[0].task_loss);
}

TEST_CASE("epochs = 0 leaves the checkpoint at initialization") {
  auto cfg = smoke_train(0, 11);
  auto ck = train::train_teacher(smoke_spec(), smoke_dataset(), cfg);
  auto init = model::init_params(smoke_spec(), mix_seed({cfg.seed, 0x696e6974}));
  CHECK(nn::bitwise_equal(ck.params, init.store));
  CHECK(ck.epoch == 0);
  CHECK(ck.opt.step == 0);
}

TEST_CASE("same seed gives bitwise-identical checkpoints") {
  auto cfg = smoke_train(2, 17);
  auto a = train::train_teacher(smoke_spec(), smoke_dataset(), cfg);
  auto b = train::train_teacher(smoke_spec(), smoke_dataset(), cfg);
  CHECK(train::bitwise_equal(a, b));

  auto cfg2 = smoke_train(2, 18);
  auto c = train::train_teacher(smoke_spec(), smoke_dataset(), cfg2);
  CHECK_FALSE(train::bitwise_equal(a, c));
}

TEST_CASE("teacher training requires the full mask") {
  auto spec = smoke_spec();
  spec.mask = {{0, {Modality::Appearance}}, {1, {Modality::Appearance}}};
  CHECK_THROWS_AS(
      train::train_teacher(spec, smoke_dataset(), smoke_train(1, 1)), Error);
  // the same masked spec trains fine as a baseline
  auto ck = train::train_bc_baseline(spec, smoke_dataset(), smoke_train(1, 1));
  CHECK(ck.epoch == 1);
}

TEST_CASE("alpha = 0 distillation reproduces plain behavior cloning bitwise") {
  auto teacher = train::train_teacher(smoke_spec(), smoke_dataset(),
                                      smoke_train(2, 23));
  auto student_spec = smoke_spec();
  student_spec.mask = {{0, {Modality::Appearance}}, {1, {Modality::Appearance}}};

  auto cfg = smoke_train(2, 29);
  cfg.distill.alpha = 0.0;
  auto distilled = train::distill_student(student_spec, teacher,
                                          smoke_dataset(), cfg);
  auto cloned = train::train_bc_baseline(student_spec, smoke_dataset(), cfg);
  CHECK(train::bitwise_equal(distilled, cloned));
}

TEST_CASE("teacher parameters are bitwise unchanged by distillation") {
  auto teacher = train::train_teacher(smoke_spec(), smoke_dataset(),
                                      smoke_train(2, 31));
  auto before = teacher.params;
  auto student_spec = smoke_spec();
  student_spec.mask = {{0, {Modality::Appearance}}, {1, {Modality::Appearance}}};
  auto cfg = smoke_train(2, 37);
  train::distill_student(student_spec, teacher, smoke_dataset(), cfg);
  CHECK(nn::bitwise_equal(teacher.params, before));
}

TEST_CASE("same-mask full-alpha distillation halves the distillation loss") {
  // the teacher must be confident for its soft targets to carry signal:
  // near-uniform targets put the KD floor at their own entropy, so this
  // fixture trains a noiseless separable set to saturation first
  auto wc = smoke_world();
  wc.sigma_appearance = 0.0;
  wc.p_class_flip = 0.0;
  auto ds = world::generate_dataset(wc, 123, 16);
  auto tc = smoke_train(200, 41);
  tc.lr0 = 3e-3;
  auto teacher = train::train_teacher(smoke_spec(), ds, tc);

  auto cfg = smoke_train(200, 43);
  cfg.lr0 = 3e-3;
  cfg.distill.alpha = 1.0;
  auto student = train::distill_student(smoke_spec(), teacher, ds, cfg);
  REQUIRE(student.log.size() == 200);
  CHECK(student.log.back().kd_loss <= 0.5 * student.log.front().kd_loss);
}

TEST_CASE("distillation contract errors") {
  auto teacher = train::train_teacher(smoke_spec(), smoke_dataset(),
                                      smoke_train(1, 47));
  // mask violation: student asks for more than the teacher provides
  auto bigger = smoke_spec();
  bigger.mask = model::full_mask(bigger);
  auto narrow_teacher = teacher;
  narrow_teacher.spec.mask = {{0, {Modality::Appearance}}};
  CHECK_THROWS_AS(train::distill_student(bigger, narrow_teacher,
                                         smoke_dataset(), smoke_train(1, 1)),
                  Error);
  // non-homologous student
  auto other = smoke_spec();
  other.embed_dim = 16;
  other.mask = model::full_mask(other);
  CHECK_THROWS_AS(train::distill_student(other, teacher, smoke_dataset(),
                                         smoke_train(1, 1)),
                  Error);
  // empty dataset
  world::Dataset empty;
  empty.cfg = smoke_world();
  CHECK_THROWS_AS(
      train::train_bc_baseline(smoke_spec(), empty, smoke_train(1, 1)), Error);
}

TEST_CASE("logged loss components recombine to the logged total") {
  auto teacher = train::train_teacher(smoke_spec(), smoke_dataset(),
                                      smoke_train(2, 53));
  auto student_spec = smoke_spec();
  student_spec.mask = {{0, {Modality::Appearance}}, {1, {Modality::Appearance}}};
  auto cfg = smoke_train(3, 59);  // alpha 0.9, t 4
  auto student = train::distill_student(student_spec, teacher, smoke_dataset(),
                                        cfg);
  for (const auto& row : student.log) {
    double want = (1.0 - cfg.distill.alpha) * row.task_loss +
                  cfg.distill.alpha * cfg.distill.temperature *
                      cfg.distill.temperature * row.kd_loss;
    CHECK(std::fabs(row.total_loss - want) < 1e-12);
  }
}

TEST_CASE("run_repeats aggregates per-seed metrics") {
  train::TrainConfig cfg;
  cfg.repeats = 2;
  cfg.seed = 100;
  auto job = [](std::uint64_t seed) {
    train::MetricsRow row;
    row["adr"] = seed == 100 ? 0.8 : 0.9;
    return row;
  };
  auto summary = train::run_repeats(job, cfg);
  CHECK(summary.per_seed.size() == 2);
  CHECK(summary.mean.at("adr") == doctest::Approx(0.85).epsilon(1e-15));
  CHECK(summary.std_dev.at("adr") == doctest::Approx(0.05).epsilon(1e-12));

  cfg.repeats = 1;
  auto single = train::run_repeats(job, cfg);
  CHECK(single.std_dev.at("adr") == 0.0);

  cfg.repeats = 4;
  auto four = train::run_repeats(job, cfg);
  CHECK(four.per_seed.size() == 4);
}

TEST_CASE("parallel repeats match sequential execution exactly") {
  train::TrainConfig cfg;
  cfg.repeats = 3;
  cfg.seed = 7;
  auto job = [](std::uint64_t seed) {
    // a real (small) training so the parallel contract is meaningful
    world::WorldConfig wc;
    wc.grid_size = 8;
    wc.n_agents = 2;
    auto ds = world::generate_dataset(wc, seed, 8);
    model::ModelSpec spec;
    spec.grid = 8;
    spec.embed_dim = 8;
    spec.head_hidden = 8;
    spec.agents = {0, 1};
    spec.mask = model::full_mask(spec);
    train::TrainConfig tc;
    tc.batch_size = 8;
    tc.epochs = 1;
    tc.seed = seed;
    auto ck = train::train_teacher(spec, ds, tc);
    train::MetricsRow row;
    row["loss"] = ck.log.back().task_loss;
    return row;
  };
  auto seq = train::run_repeats(job, cfg, false);
  auto par = train::run_repeats(job, cfg, true);
  for (int r = 0; r < 3; ++r)
    CHECK(seq.per_seed[static_cast<std::size_t>(r)].at("loss") ==
          par.per_seed[static_cast<std::size_t>(r)].at("loss"));
}

TEST_CASE("checkpoint round-trips bitwise through the file format") {
  auto cfg = smoke_train(2, 61);
  auto ck = train::train_teacher(smoke_spec(), smoke_dataset(), cfg);
  ck.config_hash = 0xdeadbeefcafe1234ull;
  std::string path = "/tmp/caml_test_ck.bin";
  io::save_checkpoint(ck, path);
  auto back = io::load_checkpoint(path);
  CHECK(train::bitwise_equal(ck, back));
  CHECK(back.config_hash == ck.config_hash);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint format and integrity errors") {
  auto cfg = smoke_train(1, 67);
  auto ck = train::train_teacher(smoke_spec(), smoke_dataset(), cfg);
  std::string path = "/tmp/caml_test_ck2.bin";
  io::save_checkpoint(ck, path);

  SUBCASE("version mismatch") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    std::uint32_t bad = 99;
    f.write(reinterpret_cast<const char*>(&bad), 4);
    f.close();
    try {
      io::load_checkpoint(path);
      FAIL("expected format error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Format);
    }
  }

  SUBCASE("truncated payload") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    try {
      io::load_checkpoint(path);
      FAIL("expected integrity error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Integrity);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("dataset round-trips bitwise through manifest and shard") {
  auto ds = world::generate_dataset(smoke_world(), 71, 6);
  std::string base = "/tmp/caml_test_ds";
  io::save_dataset(ds, base);
  auto back = io::load_dataset(base);
  REQUIRE(back.episodes.size() == ds.episodes.size());
  CHECK(back.seed == ds.seed);
  for (std::size_t i = 0; i < ds.episodes.size(); ++i) {
    const auto& a = ds.episodes[i];
    const auto& b = back.episodes[i];
    CHECK(a.expert_action == b.expert_action);
    CHECK(a.seg_labels == b.seg_labels);
    CHECK(a.world.occluders == b.world.occluders);
    REQUIRE(a.observations.size() == b.observations.size());
    for (const auto& [key, obs] : a.observations) {
      auto da = obs.payload.data();
      auto db = b.observations.at(key).payload.data();
      REQUIRE(da.size() == db.size());
      for (std::size_t j = 0; j < da.size(); ++j) CHECK(da[j] == db[j]);
    }
  }
  std::remove((base + ".manifest.json").c_str());
  std::remove((base + ".shard.bin").c_str());
}

TEST_CASE("model spec json round-trip") {
  auto spec = smoke_spec();
  spec.variant = model::Variant::PreFusion;
  spec.mask = {{0, {Modality::Appearance}}, {1, {Modality::Range}}};
  auto j = io::to_json(spec);
  auto back = io::model_spec_from_json(j);
  CHECK(back == spec);

  io::json full = j;
  full["mask"] = "full";
  CHECK(io::model_spec_from_json(full).mask == model::full_mask(spec));

  io::json bad = j;
  bad["unknown_field"] = 1;
  CHECK_THROWS_AS(io::model_spec_from_json(bad), Error);
}
