#include "caml/world.hpp"

#include <algorithm>
#include <cmath>

#include "caml/errors.hpp"
#include "caml/rng.hpp"

namespace caml::world {

namespace {

// Stream tags keep every random purpose on its own seed-derived stream.
constexpr std::uint64_t kWorldTag = 0x77726c64;    // world layout
constexpr std::uint64_t kFlipTag = 0x666c6970;     // per-entity class flips
constexpr std::uint64_t kJitterTag = 0x6a697474;   // per-entity position jitter
constexpr std::uint64_t kNoiseTag = 0x6e6f6973;    // per-cell gaussian noise
constexpr std::uint64_t kDatasetTag = 0x64617461;  // dataset episode seeds

bool in_bounds(int grid, Cell c) {
  return c.x >= 0 && c.x < grid && c.y >= 0 && c.y < grid;
}

int dist2(Cell a, Cell b) {
  int dx = a.x - b.x, dy = a.y - b.y;
  return dx * dx + dy * dy;
}

}  // namespace

std::string to_string(Modality m) {
  switch (m) {
    case Modality::Appearance: return "APPEARANCE";
    case Modality::Range: return "RANGE";
    case Modality::State: return "STATE";
  }
  raise(ErrorKind::Modality, "unknown modality value");
}

Modality modality_from_string(const std::string& s) {
  if (s == "APPEARANCE") return Modality::Appearance;
  if (s == "RANGE") return Modality::Range;
  if (s == "STATE") return Modality::State;
  raise(ErrorKind::Modality, "unknown modality '" + s + "'");
}

void validate(const WorldConfig& cfg) {
  if (cfg.grid_size < 8)
    raise(ErrorKind::Config, "grid_size must be >= 8");
  if (cfg.n_agents < 1 || cfg.n_agents > 8)
    raise(ErrorKind::Config, "n_agents must be in [1, 8]");
  if (cfg.sensing_radius < 2)
    raise(ErrorKind::Config, "sensing_radius must be >= 2");
  if (cfg.zone_depth < 1 || cfg.zone_width < 1 || cfg.zone_width % 2 == 0)
    raise(ErrorKind::Config, "zone must have positive depth and odd width");
  if (cfg.modalities.empty())
    raise(ErrorKind::Config, "at least one modality required");
  if (cfg.brake_rate < 0.0 || cfg.brake_rate > 1.0)
    raise(ErrorKind::Config, "brake_rate must be in [0, 1]");
  if (cfg.ensure_blindspot && cfg.n_agents < 2)
    raise(ErrorKind::Config, "ensure_blindspot needs at least 2 agents");
  if (cfg.xor_task && cfg.n_agents != 2)
    raise(ErrorKind::Config, "xor_task uses exactly 2 agents");
  if (cfg.state_slots < 1)
    raise(ErrorKind::Config, "state_slots must be positive");
}

std::vector<Cell> zone_cells(const WorldState& w) {
  const AgentPose& ego = w.agents.at(0);
  int half = (w.zone_width - 1) / 2;
  std::vector<Cell> cells;
  auto push = [&](int x, int y) {
    Cell c{x, y};
    if (in_bounds(w.grid, c)) cells.push_back(c);
  };
  for (int depth = 1; depth <= w.zone_depth; ++depth) {
    for (int lat = -half; lat <= half; ++lat) {
      switch (ego.heading) {
        case Heading::North: push(ego.pos.x + lat, ego.pos.y + depth); break;
        case Heading::South: push(ego.pos.x + lat, ego.pos.y - depth); break;
        case Heading::East: push(ego.pos.x + depth, ego.pos.y + lat); break;
        case Heading::West: push(ego.pos.x - depth, ego.pos.y + lat); break;
      }
    }
  }
  return cells;
}

bool in_zone(const WorldState& w, Cell c) {
  for (Cell z : zone_cells(w))
    if (z == c) return true;
  return false;
}

// Supercover line walk between cell centers. Emits every cell the segment
// passes through; when the segment crosses a lattice corner exactly, both
// side cells are emitted too, so all four cells around the corner count as
// crossed (conservative tie-break).
std::vector<Cell> ray_cells(Cell from, Cell to) {
  std::vector<Cell> cells;
  int x = from.x, y = from.y;
  int dx = to.x - from.x, dy = to.y - from.y;
  int xstep = dx >= 0 ? 1 : -1;
  int ystep = dy >= 0 ? 1 : -1;
  dx = std::abs(dx);
  dy = std::abs(dy);
  int ddx = 2 * dx, ddy = 2 * dy;

  auto emit = [&](int cx, int cy) {
    Cell c{cx, cy};
    if (c == from || c == to) return;
    cells.push_back(c);
  };

  if (ddx >= ddy) {
    int errorprev = dx, error = dx;
    for (int i = 0; i < dx; ++i) {
      x += xstep;
      error += ddy;
      if (error > ddx) {
        y += ystep;
        error -= ddx;
        if (error + errorprev < ddx) {
          emit(x, y - ystep);
        } else if (error + errorprev > ddx) {
          emit(x - xstep, y);
        } else {  // exact corner
          emit(x, y - ystep);
          emit(x - xstep, y);
        }
      }
      emit(x, y);
      errorprev = error;
    }
  } else {
    int errorprev = dy, error = dy;
    for (int i = 0; i < dy; ++i) {
      y += ystep;
      error += ddx;
      if (error > ddy) {
        x += xstep;
        error -= ddy;
        if (error + errorprev < ddy) {
          emit(x - xstep, y);
        } else if (error + errorprev > ddy) {
          emit(x, y - ystep);
        } else {
          emit(x - xstep, y);
          emit(x, y - ystep);
        }
      }
      emit(x, y);
      errorprev = error;
    }
  }
  return cells;
}

bool visible(const WorldState& w, const AgentPose& agent, Cell target) {
  if (!in_bounds(w.grid, target)) return false;
  if (dist2(agent.pos, target) > agent.radius * agent.radius) return false;
  if (target == agent.pos) return true;
  for (Cell c : ray_cells(agent.pos, target)) {
    if (w.occluders.count(c)) return false;
  }
  return true;
}

ActionLabel expert_action(const WorldState& w) {
  for (const Entity& e : w.entities) {
    if (e.is_hazard && in_zone(w, e.pos)) return ActionLabel::Brake;
  }
  return ActionLabel::Go;
}

CoverageReport coverage(const WorldState& w) {
  CoverageReport report;
  for (std::size_t i = 0; i < w.agents.size(); ++i) {
    std::set<Cell> seen;
    for (int y = 0; y < w.grid; ++y) {
      for (int x = 0; x < w.grid; ++x) {
        Cell c{x, y};
        if (visible(w, w.agents[i], c)) seen.insert(c);
      }
    }
    report.union_set.insert(seen.begin(), seen.end());
    report.per_agent.emplace(static_cast<int>(i), std::move(seen));
  }
  return report;
}

bool perceived_hazard_bit(const WorldConfig& cfg, std::uint64_t episode_seed,
                          int agent_id, int entity_index, bool true_hazard) {
  Rng rng(mix_seed({episode_seed, kFlipTag,
                    static_cast<std::uint64_t>(agent_id),
                    static_cast<std::uint64_t>(entity_index)}));
  bool flip = rng.bernoulli(cfg.p_class_flip);
  return true_hazard != flip;
}

namespace {

std::vector<bool> visibility_map(const WorldState& w, const AgentPose& agent) {
  std::vector<bool> vis(static_cast<std::size_t>(w.grid * w.grid), false);
  for (int y = 0; y < w.grid; ++y)
    for (int x = 0; x < w.grid; ++x)
      vis[static_cast<std::size_t>(y * w.grid + x)] =
          visible(w, agent, Cell{x, y});
  return vis;
}

}  // namespace

Observation render_observation(const WorldConfig& cfg, const WorldState& w,
                               int agent_id, Modality modality,
                               std::uint64_t episode_seed) {
  if (std::find(cfg.modalities.begin(), cfg.modalities.end(), modality) ==
      cfg.modalities.end())
    raise(ErrorKind::Modality,
          "modality " + to_string(modality) + " not enabled in config");
  if (agent_id < 0 || agent_id >= static_cast<int>(w.agents.size()))
    raise(ErrorKind::Data, "agent id out of range");

  const AgentPose& agent = w.agents[static_cast<std::size_t>(agent_id)];
  int g = w.grid;
  auto vis = visibility_map(w, agent);
  auto vis_at = [&](Cell c) {
    return vis[static_cast<std::size_t>(c.y * g + c.x)];
  };

  Observation obs;
  obs.agent_id = agent_id;
  obs.modality = modality;

  if (modality == Modality::Appearance) {
    // Under ensure_modality_split the appearance channel must not carry
    // exact positions, so a floor on the jitter rate is forced.
    double jitter_rate = cfg.ensure_modality_split
                             ? std::max(cfg.p_position_jitter, 0.35)
                             : cfg.p_position_jitter;
    std::vector<double> payload(static_cast<std::size_t>(2 * g * g), 0.0);
    double* cls = payload.data();
    double* mask = payload.data() + g * g;
    for (int i = 0; i < g * g; ++i)
      mask[i] = vis[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

    for (std::size_t e = 0; e < w.entities.size(); ++e) {
      const Entity& ent = w.entities[e];
      if (!vis_at(ent.pos)) continue;
      Cell where = ent.pos;
      Rng jit(mix_seed({episode_seed, kJitterTag,
                        static_cast<std::uint64_t>(agent_id),
                        static_cast<std::uint64_t>(e)}));
      if (jit.bernoulli(jitter_rate)) {
        static const int dxs[4] = {1, -1, 0, 0};
        static const int dys[4] = {0, 0, 1, -1};
        int dir = static_cast<int>(jit.uniform_int(4));
        Cell cand{ent.pos.x + dxs[dir], ent.pos.y + dys[dir]};
        // keep the blob inside the visible field so masked cells stay zero
        if (in_bounds(g, cand) && vis_at(cand)) where = cand;
      }
      bool hz = perceived_hazard_bit(cfg, episode_seed, agent_id,
                                     static_cast<int>(e), ent.is_hazard);
      cls[where.y * g + where.x] += hz ? 1.0 : -1.0;
    }

    if (cfg.sigma_appearance > 0.0) {
      Rng noise(mix_seed({episode_seed, kNoiseTag,
                          static_cast<std::uint64_t>(agent_id),
                          static_cast<std::uint64_t>(modality)}));
      for (int i = 0; i < g * g; ++i)
        if (vis[static_cast<std::size_t>(i)])
          cls[i] += noise.normal(0.0, cfg.sigma_appearance);
    }
    obs.payload = ad::Tensor({2, g, g}, std::move(payload));
    return obs;
  }

  if (modality == Modality::Range) {
    std::vector<double> payload(static_cast<std::size_t>(2 * g * g), 0.0);
    double* occ = payload.data();
    double* mask = payload.data() + g * g;
    for (int i = 0; i < g * g; ++i)
      mask[i] = vis[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    for (const Cell& c : w.occluders)
      if (vis_at(c)) occ[c.y * g + c.x] = 1.0;
    for (const Entity& e : w.entities)
      if (vis_at(e.pos)) occ[e.pos.y * g + e.pos.x] = 1.0;
    obs.payload = ad::Tensor({2, g, g}, std::move(payload));
    return obs;
  }

  // STATE: nearest-first visible entities, agent-relative, zero-padded.
  std::vector<std::size_t> order;
  for (std::size_t e = 0; e < w.entities.size(); ++e)
    if (vis_at(w.entities[e].pos)) order.push_back(e);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    int da = dist2(w.entities[a].pos, agent.pos);
    int db = dist2(w.entities[b].pos, agent.pos);
    if (da != db) return da < db;
    if (w.entities[a].pos.x != w.entities[b].pos.x)
      return w.entities[a].pos.x < w.entities[b].pos.x;
    return w.entities[a].pos.y < w.entities[b].pos.y;
  });
  std::vector<double> payload(static_cast<std::size_t>(cfg.state_slots * 5), 0.0);
  for (std::size_t s = 0;
       s < order.size() && s < static_cast<std::size_t>(cfg.state_slots); ++s) {
    const Entity& e = w.entities[order[s]];
    payload[s * 5 + 0] = e.pos.x - agent.pos.x;
    payload[s * 5 + 1] = e.pos.y - agent.pos.y;
    payload[s * 5 + 2] = e.vx;
    payload[s * 5 + 3] = e.vy;
    payload[s * 5 + 4] = 1.0;
  }
  obs.payload =
      ad::Tensor({static_cast<std::int64_t>(cfg.state_slots) * 5}, std::move(payload));
  return obs;
}

namespace {

std::vector<std::uint8_t> seg_labels_of(const WorldState& w) {
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(w.grid * w.grid),
                                   kSegFree);
  for (const Cell& c : w.occluders)
    labels[static_cast<std::size_t>(c.y * w.grid + c.x)] = kSegOccluder;
  for (const Entity& e : w.entities)
    labels[static_cast<std::size_t>(e.pos.y * w.grid + e.pos.x)] =
        e.is_hazard ? kSegHazard : kSegBenign;
  return labels;
}

struct WorldDraw {
  WorldState world;
  bool ok = false;
};

WorldDraw draw_xor_world(const WorldConfig& cfg, std::uint64_t seed) {
  int g = cfg.grid_size;
  WorldState w;
  w.grid = g;
  w.zone_depth = cfg.zone_depth;
  w.zone_width = cfg.zone_width;
  w.agents.push_back({Cell{2, 2}, Heading::North, cfg.sensing_radius});
  w.agents.push_back({Cell{g - 3, 2}, Heading::North, cfg.sensing_radius});
  // wall ahead of the ego seals its own zone; center column splits the map
  for (int x = 0; x <= g / 2; ++x) w.occluders.insert(Cell{x, 4});
  for (int y = 0; y < g; ++y) w.occluders.insert(Cell{g / 2, y});

  Rng rng(mix_seed({seed, kWorldTag}));
  bool b0 = rng.bernoulli(0.5);
  bool b1 = rng.bernoulli(0.5);
  w.entities.push_back({Cell{0, 2}, 0, 0, b0});
  w.entities.push_back({Cell{g - 1, 2}, 0, 0, b1});
  if (b0 != b1) w.entities.push_back({Cell{2, 6}, 0, 0, true});
  return {std::move(w), true};
}

WorldDraw draw_world(const WorldConfig& cfg, std::uint64_t seed,
                     std::uint64_t attempt) {
  int g = cfg.grid_size;
  Rng rng(mix_seed({seed, kWorldTag, attempt}));
  WorldState w;
  w.grid = g;
  w.zone_depth = cfg.zone_depth;
  w.zone_width = cfg.zone_width;

  // ego anchored at the bottom center, facing up the grid; scenario variety
  // comes from occluders, collaborators, and entities
  int ex = g / 2;
  int ey = 2;
  w.agents.push_back({Cell{ex, ey}, Heading::North, cfg.sensing_radius});

  auto agent_at = [&](Cell c) {
    for (const AgentPose& a : w.agents)
      if (a.pos == c) return true;
    return false;
  };

  // collaborators spread around the scene ahead of the ego
  int ymax = std::min(g - 1, ey + cfg.zone_depth + 3);
  for (int i = 1; i < cfg.n_agents; ++i) {
    for (int tries = 0; tries < 64; ++tries) {
      Cell c{static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g))),
             1 + static_cast<int>(rng.uniform_int(
                     static_cast<std::uint64_t>(ymax)))};
      if (agent_at(c)) continue;
      w.agents.push_back({c, Heading::North, cfg.sensing_radius});
      break;
    }
    if (static_cast<int>(w.agents.size()) != i + 1) return {};
  }

  // occluder rectangles, kept off agent cells
  for (int i = 0; i < cfg.n_occluders; ++i) {
    int ox = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g)));
    int oy = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g)));
    int ow = 1 + static_cast<int>(rng.uniform_int(2));
    int oh = 1 + static_cast<int>(rng.uniform_int(2));
    for (int x = ox; x < std::min(g, ox + ow); ++x)
      for (int y = oy; y < std::min(g, oy + oh); ++y)
        if (!agent_at(Cell{x, y})) w.occluders.insert(Cell{x, y});
  }

  auto free_cell = [&](Cell c) {
    if (!in_bounds(g, c) || w.occluders.count(c) || agent_at(c)) return false;
    for (const Entity& e : w.entities)
      if (e.pos == c) return false;
    return true;
  };

  std::vector<Cell> zone = zone_cells(w);
  std::vector<Cell> free_zone;
  for (Cell c : zone)
    if (free_cell(c)) free_zone.push_back(c);

  bool brake = rng.bernoulli(cfg.brake_rate);
  bool planted_hazard = false;
  if (brake) {
    if (free_zone.empty()) return {};
    Cell c = free_zone[rng.uniform_int(free_zone.size())];
    w.entities.push_back({c, 0, 0, true});
    planted_hazard = true;
  } else if (cfg.ensure_blindspot) {
    // GO episodes still carry one planted out-of-zone hazard so the
    // blind-spot guarantee applies to every episode
    for (int tries = 0; tries < 128 && !planted_hazard; ++tries) {
      Cell c{static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g))),
             static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g)))};
      if (!free_cell(c) || in_zone(w, c)) continue;
      w.entities.push_back({c, 0, 0, true});
      planted_hazard = true;
    }
    if (!planted_hazard) return {};
  }
  if (!brake && rng.bernoulli(cfg.benign_zone_rate)) {
    std::vector<Cell> still_free;
    for (Cell c : free_zone)
      if (free_cell(c)) still_free.push_back(c);
    if (!still_free.empty()) {
      Cell c = still_free[rng.uniform_int(still_free.size())];
      w.entities.push_back({c, 0, 0, false});
    }
  }

  // background entities outside the zone
  for (int i = 0; i < cfg.n_background; ++i) {
    for (int tries = 0; tries < 64; ++tries) {
      Cell c{static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g))),
             static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g)))};
      if (!free_cell(c) || in_zone(w, c)) continue;
      w.entities.push_back({c, 0, 0, rng.bernoulli(0.5)});
      break;
    }
  }

  for (Entity& e : w.entities) {
    e.vx = static_cast<int>(rng.uniform_int(3)) - 1;
    e.vy = static_cast<int>(rng.uniform_int(3)) - 1;
  }

  if (cfg.ensure_blindspot) {
    // entity 0 is the planted hazard in both branches above
    const Entity& planted = w.entities.front();
    auto ego_blind = [&] { return !visible(w, w.agents[0], planted.pos); };
    auto collab_sees = [&] {
      for (std::size_t i = 1; i < w.agents.size(); ++i)
        if (visible(w, w.agents[i], planted.pos)) return true;
      return false;
    };
    if (!ego_blind()) {
      // drop an occluder onto the ego->hazard ray midpoint
      auto ray = ray_cells(w.agents[0].pos, planted.pos);
      if (ray.empty()) return {};
      Cell mid = ray[ray.size() / 2];
      if (!free_cell(mid)) return {};
      w.occluders.insert(mid);
    }
    if (!ego_blind() || !collab_sees()) return {};
  }

  ActionLabel intended = brake ? ActionLabel::Brake : ActionLabel::Go;
  if (expert_action(w) != intended) return {};
  return {std::move(w), true};
}

WorldDraw draw_any_world(const WorldConfig& cfg, std::uint64_t seed) {
  if (cfg.xor_task) return draw_xor_world(cfg, seed);
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    WorldDraw d = draw_world(cfg, seed, static_cast<std::uint64_t>(attempt));
    if (d.ok) return d;
  }
  raise(ErrorKind::Generation,
        "no world satisfying constraints (blindspot=" +
            std::to_string(cfg.ensure_blindspot) + ") after " +
            std::to_string(cfg.max_retries + 1) + " attempts, seed " +
            std::to_string(seed));
}

}  // namespace

EpisodeRecord generate_episode(const WorldConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  WorldDraw draw = draw_any_world(cfg, seed);

  EpisodeRecord ep;
  ep.world = std::move(draw.world);
  ep.episode_seed = seed;
  ep.expert_action = expert_action(ep.world);
  ep.seg_labels = seg_labels_of(ep.world);
  for (int a = 0; a < static_cast<int>(ep.world.agents.size()); ++a) {
    for (Modality m : cfg.modalities) {
      ep.observations.emplace(std::make_pair(a, m),
                              render_observation(cfg, ep.world, a, m, seed));
    }
  }
  return ep;
}

std::uint64_t dataset_episode_seed(std::uint64_t seed, int index) {
  return mix_seed({seed, kDatasetTag, static_cast<std::uint64_t>(index)});
}

Dataset generate_dataset(const WorldConfig& cfg, std::uint64_t seed,
                         int n_episodes) {
  if (n_episodes < 1) raise(ErrorKind::Config, "need at least one episode");
  Dataset ds;
  ds.cfg = cfg;
  ds.seed = seed;
  ds.episodes.reserve(static_cast<std::size_t>(n_episodes));
  for (int i = 0; i < n_episodes; ++i)
    ds.episodes.push_back(generate_episode(cfg, dataset_episode_seed(seed, i)));
  return ds;
}

info::JointTable export_discrete_abstraction(
    const WorldConfig& cfg, std::span<const std::uint64_t> seeds) {
  validate(cfg);
  if (seeds.empty())
    raise(ErrorKind::Parameter, "abstraction needs at least one seed");
  int n = cfg.n_agents;
  std::int64_t entries = 2;
  for (int i = 0; i < n; ++i) {
    entries *= 4;
    if (entries > info::kMaxJointSupport)
      raise(ErrorKind::Abstraction, "abstraction support too large");
  }

  std::vector<double> weights(static_cast<std::size_t>(entries), 0.0);
  for (std::uint64_t seed : seeds) {
    WorldDraw draw = draw_any_world(cfg, seed);
    const WorldState& w = draw.world;
    int y = expert_action(w) == ActionLabel::Brake ? 1 : 0;

    std::int64_t idx = y;
    for (int a = 0; a < n; ++a) {
      const AgentPose& agent = w.agents[static_cast<std::size_t>(a)];
      int v = 0;
      for (const Entity& e : w.entities) {
        if (e.is_hazard && in_zone(w, e.pos) && visible(w, agent, e.pos)) {
          v = 1;
          break;
        }
      }
      int best = -1;
      for (std::size_t e = 0; e < w.entities.size(); ++e) {
        if (!visible(w, agent, w.entities[e].pos)) continue;
        if (best < 0) {
          best = static_cast<int>(e);
          continue;
        }
        const Entity& cur = w.entities[e];
        const Entity& prev = w.entities[static_cast<std::size_t>(best)];
        int dc = dist2(cur.pos, agent.pos), dp = dist2(prev.pos, agent.pos);
        if (dc < dp ||
            (dc == dp && (cur.pos.x < prev.pos.x ||
                          (cur.pos.x == prev.pos.x && cur.pos.y < prev.pos.y))))
          best = static_cast<int>(e);
      }
      int c = 0;
      if (best >= 0) {
        c = perceived_hazard_bit(cfg, seed, a, best,
                                 w.entities[static_cast<std::size_t>(best)]
                                     .is_hazard)
                ? 1
                : 0;
      }
      idx = idx * 4 + (v * 2 + c);
    }
    weights[static_cast<std::size_t>(idx)] += 1.0;
  }

  std::vector<int> cards(static_cast<std::size_t>(n + 1), 4);
  cards[0] = 2;
  return info::from_weights(std::move(cards), std::move(weights));
}

}  // namespace caml::world
