#pragma once

#include <cstdint>
#include <vector>

#include "caml/world.hpp"

namespace caml::comms {

enum class TopologyKind { Centralized, DecentralizedFull, DecentralizedK };

struct Topology {
  TopologyKind kind = TopologyKind::Centralized;
  int n_agents = 1;
  int k = 1;    // DecentralizedK only
  int ego = 0;  // Centralized sink
};

void validate(const Topology& t);

// Unit cost constants instantiating the closed-form complexity expressions.
struct CostModel {
  double t_collab = 1.0;  // per-collaborator local compute time
  double s_collab = 1.0;
  double t_ego = 1.0;  // ego aggregation compute
  double s_ego = 1.0;
  double t_local = 1.0;  // per-agent compute, decentralized
  double s_local = 1.0;
  double d_msg = 1.0;   // per-message time
  double m_comm = 1.0;  // per-message space
};

struct Message {
  int sender = 0;
  int receiver = 0;
  world::Modality modality = world::Modality::Appearance;
  auto operator<=>(const Message&) const = default;
};

// Deterministic embedding-exchange plan. Centralized: every non-ego provider
// sends each provided modality to the ego. DecentralizedFull: every provider
// sends to all other agents. DecentralizedK: to its ring neighbors (offsets
// +1, -1, +2, -2, ... taking the first k distinct agents mod N).
std::vector<Message> message_plan(const Topology& t,
                                  const world::ModalityMask& mask);

// Ring neighbors of `agent` under the deterministic k-neighbor rule.
std::vector<int> ring_neighbors(int agent, int n_agents, int k);

struct CostPrediction {
  double time_units = 0.0;
  double space_units = 0.0;
};

// Instantiates the asymptotic complexity expressions with the unit costs:
// Centralized   : T_c(N-1) + D(N-1) + T_e   |  S_c(N-1) + M(N-1) + S_e
// Decentralized : NT + N^2 D                |  NS + N^2 M
// K-neighbor    : NT + NkD                  |  NS + NkM
CostPrediction predict_cost(const Topology& t, const CostModel& model);

// Exact closed-form directed message count for a single shared modality:
// N-1 (centralized), N(N-1) (full pairwise), N*k (k-neighbor). The full
// case's asymptotic D-term is N^2; the exact pairwise count is N(N-1).
long long predicted_message_count(const Topology& t);

struct CommLedger {
  long long messages = 0;
  long long bytes = 0;
  double predicted_time_units = 0.0;
  double predicted_space_units = 0.0;
  double measured_wall_latency = 0.0;  // informational, never gated
};

CommLedger account(const std::vector<Message>& plan, long long embedding_bytes,
                   const Topology& t, const CostModel& model = {});

}  // namespace caml::comms
