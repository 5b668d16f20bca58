#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "caml/info_theory.hpp"
#include "caml/tensor.hpp"

namespace caml::world {

enum class Modality { Appearance, Range, State };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

// Which modalities each agent supplies at inference time.
using ModalityMask = std::map<int, std::set<Modality>>;

enum class ActionLabel { Go = 0, Brake = 1 };

struct Cell {
  int x = 0;
  int y = 0;
  auto operator<=>(const Cell&) const = default;
};

enum class Heading { North, East, South, West };

struct AgentPose {
  Cell pos;
  Heading heading = Heading::North;
  int radius = 7;
};

struct Entity {
  Cell pos;
  int vx = 0;
  int vy = 0;
  bool is_hazard = false;
};

struct WorldConfig {
  int grid_size = 16;
  int n_agents = 3;
  int sensing_radius = 7;
  int n_occluders = 5;
  int n_background = 4;
  double sigma_appearance = 0.3;   // gaussian noise on visible class cells
  double p_class_flip = 0.15;      // per-entity class corruption probability
  double p_position_jitter = 0.0;  // per-entity one-cell displacement prob.
  double brake_rate = 0.5;         // fraction of episodes with a zone hazard
  double benign_zone_rate = 0.5;   // GO episodes that still get a zone entity
  int zone_depth = 5;
  int zone_width = 3;
  bool ensure_blindspot = false;
  bool ensure_modality_split = false;
  bool xor_task = false;
  std::vector<Modality> modalities = {Modality::Appearance, Modality::Range};
  int state_slots = 8;
  int max_retries = 200;
};

void validate(const WorldConfig& cfg);

struct WorldState {
  int grid = 16;
  int zone_depth = 5;
  int zone_width = 3;
  std::set<Cell> occluders;
  std::vector<Entity> entities;
  std::vector<AgentPose> agents;  // agents[0] is the ego
};

struct Observation {
  int agent_id = 0;
  Modality modality = Modality::Appearance;
  ad::Tensor payload;
};

// Segmentation classes over the grid.
enum SegClass : std::uint8_t {
  kSegFree = 0,
  kSegOccluder = 1,
  kSegBenign = 2,
  kSegHazard = 3,
};
inline constexpr int kSegClasses = 4;

struct EpisodeRecord {
  WorldState world;
  std::map<std::pair<int, Modality>, Observation> observations;
  ActionLabel expert_action = ActionLabel::Go;
  std::vector<std::uint8_t> seg_labels;  // grid*grid class ids, row-major by y
  std::uint64_t episode_seed = 0;
};

struct CoverageReport {
  std::map<int, std::set<Cell>> per_agent;
  std::set<Cell> union_set;
};

// The ego's critical zone: a closed axis-aligned box directly ahead of the
// ego (boundary cells included, so a boundary hazard means BRAKE).
std::vector<Cell> zone_cells(const WorldState& w);
bool in_zone(const WorldState& w, Cell c);

// Integer supercover line of sight between cell centers; any occluder cell
// the ray crosses blocks everything behind it, and rays through lattice
// corners are blocked conservatively (all four surrounding cells count as
// crossed). The target cell itself may be an occluder and still be seen.
bool visible(const WorldState& w, const AgentPose& agent, Cell target);

// Cells the open segment between the two cell centers passes through,
// endpoints excluded (the supercover crossing set used by `visible`).
std::vector<Cell> ray_cells(Cell from, Cell to);

ActionLabel expert_action(const WorldState& w);
CoverageReport coverage(const WorldState& w);

Observation render_observation(const WorldConfig& cfg, const WorldState& w,
                               int agent_id, Modality modality,
                               std::uint64_t episode_seed);

EpisodeRecord generate_episode(const WorldConfig& cfg, std::uint64_t seed);

struct Dataset {
  WorldConfig cfg;
  std::uint64_t seed = 0;
  std::vector<EpisodeRecord> episodes;
};

Dataset generate_dataset(const WorldConfig& cfg, std::uint64_t seed,
                         int n_episodes);

// Per-episode seed used by generate_dataset for episode index i.
std::uint64_t dataset_episode_seed(std::uint64_t seed, int index);

// Perceived (post-corruption) appearance class of an entity in agent view;
// shared by render_observation and the discrete abstraction so both tell the
// same story about the sensed class bit.
bool perceived_hazard_bit(const WorldConfig& cfg, std::uint64_t episode_seed,
                          int agent_id, int entity_index, bool true_hazard);

// Exact joint distribution over (y, x_1..x_N) where x_i packs agent i's
// sees-zone-hazard bit and its perceived class bit of the nearest visible
// entity, enumerated over the seeded episode family.
info::JointTable export_discrete_abstraction(const WorldConfig& cfg,
                                             std::span<const std::uint64_t> seeds);

}  // namespace caml::world
