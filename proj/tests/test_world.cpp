#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "caml/errors.hpp"
#include "caml/world.hpp"
#include "test_support.hpp"

using namespace caml;
using world::Cell;

namespace {

// Oracle visibility: exact rational geometry instead of the supercover walk.
bool visible_oracle(const world::WorldState& w, const world::AgentPose& agent,
                    Cell target) {
  int dx = target.x - agent.pos.x, dy = target.y - agent.pos.y;
  if (target.x < 0 || target.x >= w.grid || target.y < 0 || target.y >= w.grid)
    return false;
  if (dx * dx + dy * dy > agent.radius * agent.radius) return false;
  if (target == agent.pos) return true;
  for (const Cell& o : w.occluders) {
    if (o == target || o == agent.pos) continue;
    if (testing::los::ray_crosses_cell(agent.pos.x, agent.pos.y, target.x,
                                       target.y, o.x, o.y))
      return false;
  }
  return true;
}

world::WorldConfig small_cfg() {
  world::WorldConfig cfg;
  cfg.grid_size = 10;
  cfg.n_agents = 2;
  cfg.sensing_radius = 6;
  cfg.n_occluders = 4;
  cfg.n_background = 2;
  return cfg;
}

bool equal_records(const world::EpisodeRecord& a, const world::EpisodeRecord& b) {
  if (a.expert_action != b.expert_action || a.seg_labels != b.seg_labels ||
      a.episode_seed != b.episode_seed)
    return false;
  if (a.world.occluders != b.world.occluders) return false;
  if (a.observations.size() != b.observations.size()) return false;
  for (const auto& [key, obs] : a.observations) {
    auto it = b.observations.find(key);
    if (it == b.observations.end()) return false;
    auto da = obs.payload.data();
    auto db = it->second.payload.data();
    if (da.size() != db.size()) return false;
    for (std::size_t i = 0; i < da.size(); ++i)
      if (da[i] != db[i]) return false;  // bitwise
  }
  return true;
}

}  // namespace

TEST_CASE("visibility matches the exact rational oracle exhaustively") {
  Rng rng(404);
  for (int trial = 0; trial < 30; ++trial) {
    world::WorldState w;
    w.grid = 9;
    int n_occ = 3 + static_cast<int>(rng.uniform_int(6));
    for (int i = 0; i < n_occ; ++i)
      w.occluders.insert(Cell{static_cast<int>(rng.uniform_int(9)),
                              static_cast<int>(rng.uniform_int(9))});
    world::AgentPose agent;
    do {
      agent.pos = Cell{static_cast<int>(rng.uniform_int(9)),
                       static_cast<int>(rng.uniform_int(9))};
    } while (w.occluders.count(agent.pos));
    agent.radius = 12;  // whole grid in range
    w.agents.push_back(agent);

    for (int y = 0; y < 9; ++y) {
      for (int x = 0; x < 9; ++x) {
        Cell t{x, y};
        bool impl = world::visible(w, agent, t);
        bool oracle = visible_oracle(w, agent, t);
        CHECK_MESSAGE(impl == oracle,
                      "trial ", trial, " agent (", agent.pos.x, ",",
                      agent.pos.y, ") target (", x, ",", y, ")");
      }
    }
  }
}

TEST_CASE("corner-touching diagonal rays are blocked") {
  // occluders at (1,0) and (0,1) pinch the diagonal from (0,0) to (2,2)
  world::WorldState w;
  w.grid = 8;
  w.occluders.insert(Cell{1, 0});
  world::AgentPose agent{Cell{0, 0}, world::Heading::North, 8};
  w.agents.push_back(agent);
  // the diagonal passes exactly through the corner shared by (0,0),(1,0),(0,1),(1,1)
  CHECK_FALSE(world::visible(w, agent, Cell{2, 2}));
  CHECK_FALSE(visible_oracle(w, agent, Cell{2, 2}));
}

TEST_CASE("determinism: same config and seed give bitwise-identical episodes") {
  auto cfg = small_cfg();
  for (std::uint64_t seed : {1ull, 77ull, 424242ull}) {
    auto a = world::generate_episode(cfg, seed);
    auto b = world::generate_episode(cfg, seed);
    CHECK(equal_records(a, b));
  }
}

TEST_CASE("unobstructed wide-radius view covers every non-occluder cell") {
  auto cfg = small_cfg();
  cfg.n_occluders = 0;
  cfg.n_agents = 1;
  cfg.ensure_blindspot = false;
  cfg.sensing_radius = 15;  // >= G * sqrt(2)
  auto ep = world::generate_episode(cfg, 5);
  auto report = world::coverage(ep.world);
  CHECK(report.union_set.size() ==
        static_cast<std::size_t>(cfg.grid_size * cfg.grid_size));
}

TEST_CASE("expert action zone semantics") {
  world::WorldState w;
  w.grid = 16;
  w.zone_depth = 5;
  w.zone_width = 3;
  w.agents.push_back({Cell{8, 2}, world::Heading::North, 7});

  SUBCASE("hazard two cells ahead in lane means brake") {
    w.entities.push_back({Cell{8, 4}, 0, 0, true});
    CHECK(world::expert_action(w) == world::ActionLabel::Brake);
  }
  SUBCASE("no hazards means go") {
    CHECK(world::expert_action(w) == world::ActionLabel::Go);
  }
  SUBCASE("benign entity in zone does not brake") {
    w.entities.push_back({Cell{8, 4}, 0, 0, false});
    CHECK(world::expert_action(w) == world::ActionLabel::Go);
  }
  SUBCASE("hazard exactly on the zone boundary brakes (closed zone)") {
    w.entities.push_back({Cell{7, 7}, 0, 0, true});  // far corner of the zone
    CHECK(world::expert_action(w) == world::ActionLabel::Brake);
  }
  SUBCASE("hazard just outside the zone does not brake") {
    w.entities.push_back({Cell{6, 7}, 0, 0, true});
    w.entities.push_back({Cell{8, 8}, 0, 0, true});
    CHECK(world::expert_action(w) == world::ActionLabel::Go);
  }
  SUBCASE("occluded hazards still brake: labels come from ground truth") {
    w.occluders.insert(Cell{8, 3});
    w.entities.push_back({Cell{8, 4}, 0, 0, true});
    CHECK_FALSE(world::visible(w, w.agents[0], Cell{8, 4}));
    CHECK(world::expert_action(w) == world::ActionLabel::Brake);
  }
}

TEST_CASE("coverage set arithmetic") {
  world::WorldState w;
  w.grid = 12;
  w.agents.push_back({Cell{2, 2}, world::Heading::North, 2});

  SUBCASE("one agent: union equals its own set") {
    auto r = world::coverage(w);
    CHECK(r.union_set == r.per_agent.at(0));
  }
  SUBCASE("union is at least the largest per-agent set") {
    w.agents.push_back({Cell{9, 9}, world::Heading::North, 3});
    auto r = world::coverage(w);
    std::size_t largest = 0;
    for (const auto& [id, cells] : r.per_agent)
      largest = std::max(largest, cells.size());
    CHECK(r.union_set.size() >= largest);
  }
}

TEST_CASE("coverage union bound on generated episodes") {
  auto cfg = small_cfg();
  cfg.n_agents = 3;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto ep = world::generate_episode(cfg, seed);
    auto r = world::coverage(ep.world);
    std::size_t largest = 0;
    for (const auto& [id, cells] : r.per_agent) {
      largest = std::max(largest, cells.size());
      // per-agent sets match the oracle definition of the union
      for (const Cell& c : cells) CHECK(r.union_set.count(c) == 1);
    }
    CHECK(r.union_set.size() >= largest);
  }
}

TEST_CASE("noiseless appearance equals ground truth on visible cells") {
  auto cfg = small_cfg();
  cfg.sigma_appearance = 0.0;
  cfg.p_class_flip = 0.0;
  auto ep = world::generate_episode(cfg, 9);
  int g = cfg.grid_size;
  for (int a = 0; a < cfg.n_agents; ++a) {
    auto obs = ep.observations.at({a, world::Modality::Appearance});
    auto data = obs.payload.data();
    const world::AgentPose& agent = ep.world.agents[static_cast<std::size_t>(a)];
    std::vector<double> want(static_cast<std::size_t>(g * g), 0.0);
    for (const auto& e : ep.world.entities)
      if (world::visible(ep.world, agent, e.pos))
        want[static_cast<std::size_t>(e.pos.y * g + e.pos.x)] +=
            e.is_hazard ? 1.0 : -1.0;
    for (int i = 0; i < g * g; ++i)
      CHECK(data[static_cast<std::size_t>(i)] == want[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("range occupancy is exact and occluded cells are zeroed everywhere") {
  auto cfg = small_cfg();
  auto ep = world::generate_episode(cfg, 21);
  int g = cfg.grid_size;
  for (int a = 0; a < cfg.n_agents; ++a) {
    const world::AgentPose& agent = ep.world.agents[static_cast<std::size_t>(a)];
    auto range = ep.observations.at({a, world::Modality::Range}).payload.data();
    auto app = ep.observations.at({a, world::Modality::Appearance}).payload.data();
    for (int y = 0; y < g; ++y) {
      for (int x = 0; x < g; ++x) {
        Cell c{x, y};
        std::size_t i = static_cast<std::size_t>(y * g + x);
        bool vis = world::visible(ep.world, agent, c);
        CHECK(range[static_cast<std::size_t>(g * g) + i] == (vis ? 1.0 : 0.0));
        CHECK(app[static_cast<std::size_t>(g * g) + i] == (vis ? 1.0 : 0.0));
        if (!vis) {
          CHECK(range[i] == 0.0);
          CHECK(app[i] == 0.0);
        } else {
          bool occupied = ep.world.occluders.count(c) > 0;
          for (const auto& e : ep.world.entities)
            if (e.pos == c) occupied = true;
          CHECK(range[i] == (occupied ? 1.0 : 0.0));
        }
      }
    }
  }
}

TEST_CASE("state modality lists nearest visible entities, zero-padded") {
  auto cfg = small_cfg();
  cfg.modalities = {world::Modality::Appearance, world::Modality::Range,
                    world::Modality::State};
  auto ep = world::generate_episode(cfg, 33);
  auto st = ep.observations.at({0, world::Modality::State}).payload;
  CHECK(st.shape() == ad::Shape{cfg.state_slots * 5});
  const world::AgentPose& ego = ep.world.agents[0];
  int n_visible = 0;
  for (const auto& e : ep.world.entities)
    if (world::visible(ep.world, ego, e.pos)) ++n_visible;
  int slots = std::min(n_visible, cfg.state_slots);
  for (int s = 0; s < cfg.state_slots; ++s) {
    double present = st.at(s * 5 + 4);
    CHECK(present == (s < slots ? 1.0 : 0.0));
    if (s >= slots)
      for (int k = 0; k < 5; ++k) CHECK(st.at(s * 5 + k) == 0.0);
  }
  // nearest-first ordering
  double prev = -1.0;
  for (int s = 0; s < slots; ++s) {
    double dx = st.at(s * 5 + 0), dy = st.at(s * 5 + 1);
    double d = dx * dx + dy * dy;
    CHECK(d >= prev);
    prev = d;
  }
}

TEST_CASE("render_observation rejects disabled modalities") {
  auto cfg = small_cfg();  // APPEARANCE + RANGE only
  auto ep = world::generate_episode(cfg, 2);
  CHECK_THROWS_AS(world::render_observation(cfg, ep.world, 0,
                                            world::Modality::State, 2),
                  Error);
}

TEST_CASE("blindspot episodes hide the planted hazard from the ego only") {
  auto cfg = small_cfg();
  cfg.grid_size = 16;
  cfg.n_agents = 3;
  cfg.ensure_blindspot = true;
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto ep = world::generate_episode(cfg, seed);
    const auto& planted = ep.world.entities.front();
    CHECK(planted.is_hazard);
    // against the independent oracle, not the library walk
    CHECK_FALSE(visible_oracle(ep.world, ep.world.agents[0], planted.pos));
    bool collab = false;
    for (std::size_t i = 1; i < ep.world.agents.size(); ++i)
      collab = collab || visible_oracle(ep.world, ep.world.agents[i], planted.pos);
    CHECK(collab);
    // coverage sets tell the same story
    auto r = world::coverage(ep.world);
    CHECK(r.per_agent.at(0).count(planted.pos) == 0);
    CHECK(r.union_set.count(planted.pos) == 1);
    ++checked;
  }
  CHECK(checked == 200);
}

TEST_CASE("brake prevalence stays balanced under the default config") {
  world::WorldConfig cfg;  // defaults: G=16, N=3
  int brakes = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    auto seed = world::dataset_episode_seed(99, i);
    auto ep = world::generate_episode(cfg, seed);
    brakes += ep.expert_action == world::ActionLabel::Brake ? 1 : 0;
  }
  double rate = static_cast<double>(brakes) / n;
  CHECK(rate >= 0.3);
  CHECK(rate <= 0.7);
}

TEST_CASE("xor worlds: each agent sees only its own indicator bit") {
  world::WorldConfig cfg;
  cfg.grid_size = 8;
  cfg.n_agents = 2;
  cfg.xor_task = true;
  cfg.sigma_appearance = 0.0;
  cfg.p_class_flip = 0.0;
  cfg.modalities = {world::Modality::Appearance};
  int braked = 0;
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    auto ep = world::generate_episode(cfg, seed);
    bool b0 = ep.world.entities[0].is_hazard;
    bool b1 = ep.world.entities[1].is_hazard;
    CHECK((ep.expert_action == world::ActionLabel::Brake) == (b0 != b1));
    braked += b0 != b1;

    // visibility structure: own indicator only, zone hazard hidden from both
    const auto& ego = ep.world.agents[0];
    const auto& other = ep.world.agents[1];
    CHECK(world::visible(ep.world, ego, ep.world.entities[0].pos));
    CHECK_FALSE(world::visible(ep.world, ego, ep.world.entities[1].pos));
    CHECK(world::visible(ep.world, other, ep.world.entities[1].pos));
    CHECK_FALSE(world::visible(ep.world, other, ep.world.entities[0].pos));
    if (b0 != b1) {
      CHECK_FALSE(world::visible(ep.world, ego, ep.world.entities[2].pos));
      CHECK_FALSE(world::visible(ep.world, other, ep.world.entities[2].pos));
    }
  }
  CHECK(braked > 16);
  CHECK(braked < 48);
}

TEST_CASE("abstraction: agent that always sees the hazard carries H(y) bits") {
  world::WorldConfig cfg;
  cfg.grid_size = 10;
  cfg.n_agents = 1;
  cfg.n_occluders = 0;
  cfg.n_background = 0;
  cfg.benign_zone_rate = 0.0;
  cfg.sensing_radius = 15;
  cfg.sigma_appearance = 0.0;
  cfg.p_class_flip = 0.0;
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < 400; ++i) seeds.push_back(world::dataset_episode_seed(7, i));
  auto table = world::export_discrete_abstraction(cfg, seeds);
  std::vector<int> v1 = {1};
  CHECK(info::mutual_information(table, v1) ==
        doctest::Approx(info::entropy_y(table)).epsilon(1e-9));
}

TEST_CASE("abstraction: xor worlds give zero individual, one bit joint") {
  world::WorldConfig cfg;
  cfg.grid_size = 8;
  cfg.n_agents = 2;
  cfg.xor_task = true;
  cfg.sigma_appearance = 0.0;
  cfg.p_class_flip = 0.0;
  cfg.modalities = {world::Modality::Appearance};

  // enumerate the four (b0, b1) combinations by collecting enough seeds, then
  // weight them into a table; the family is exactly uniform over observed draws
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < 4096; ++i) seeds.push_back(world::dataset_episode_seed(3, i));
  auto table = world::export_discrete_abstraction(cfg, seeds);

  std::vector<int> v1 = {1}, v2 = {2}, both = {1, 2};
  // individual informations are exactly zero only if the bit counts are
  // balanced; with seeded draws they are near zero and the joint is near H(y)
  CHECK(std::fabs(info::mutual_information(table, v1)) < 0.005);
  CHECK(std::fabs(info::mutual_information(table, v2)) < 0.005);
  CHECK(info::mutual_information(table, both) ==
        doctest::Approx(info::entropy_y(table)).epsilon(1e-9));
}

TEST_CASE("abstraction: duplicated agent adds no information") {
  world::WorldConfig cfg;
  cfg.grid_size = 10;
  cfg.n_agents = 1;
  cfg.n_occluders = 2;
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < 300; ++i) seeds.push_back(world::dataset_episode_seed(11, i));
  auto table = world::export_discrete_abstraction(cfg, seeds);

  // mechanically duplicate x1 into an x2 == x1 column
  info::JointTable dup;
  dup.cards = {table.cards[0], table.cards[1], table.cards[1]};
  dup.probs.assign(static_cast<std::size_t>(dup.cards[0]) *
                       static_cast<std::size_t>(dup.cards[1]) *
                       static_cast<std::size_t>(dup.cards[2]),
                   0.0);
  for (int y = 0; y < table.cards[0]; ++y) {
    for (int x = 0; x < table.cards[1]; ++x) {
      double p = table.probs[static_cast<std::size_t>(y * table.cards[1] + x)];
      dup.probs[static_cast<std::size_t>((y * table.cards[1] + x) *
                                             table.cards[1] +
                                         x)] = p;
    }
  }
  std::vector<int> v1 = {1}, both = {1, 2};
  CHECK(info::mutual_information(dup, both) ==
        doctest::Approx(info::mutual_information(table, v1)).epsilon(1e-12));
}

TEST_CASE("config validation errors") {
  world::WorldConfig cfg;
  cfg.grid_size = 4;
  CHECK_THROWS_AS(world::generate_episode(cfg, 1), Error);
  cfg = world::WorldConfig{};
  cfg.n_agents = 0;
  CHECK_THROWS_AS(world::generate_episode(cfg, 1), Error);
  cfg = world::WorldConfig{};
  cfg.sensing_radius = 1;
  CHECK_THROWS_AS(world::generate_episode(cfg, 1), Error);
  cfg = world::WorldConfig{};
  cfg.ensure_blindspot = true;
  cfg.n_agents = 1;
  CHECK_THROWS_AS(world::generate_episode(cfg, 1), Error);
}

TEST_CASE("generation error reports the failed constraint") {
  world::WorldConfig cfg;
  cfg.grid_size = 8;
  cfg.n_agents = 2;
  cfg.ensure_blindspot = true;
  cfg.max_retries = 2;
  cfg.sensing_radius = 2;  // collaborators almost never reach the hazard
  bool saw_generation_error = false;
  for (std::uint64_t seed = 0; seed < 40 && !saw_generation_error; ++seed) {
    try {
      world::generate_episode(cfg, seed);
    } catch (const Error& e) {
      saw_generation_error = e.kind() == ErrorKind::Generation;
      CHECK(std::string(e.what()).find("blindspot") != std::string::npos);
    }
  }
  CHECK(saw_generation_error);
}
