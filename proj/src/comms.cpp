#include "caml/comms.hpp"

#include <algorithm>

#include "caml/errors.hpp"

namespace caml::comms {

void validate(const Topology& t) {
  if (t.n_agents < 1)
    raise(ErrorKind::Topology, "topology needs at least one agent");
  if (t.kind == TopologyKind::DecentralizedK &&
      (t.k < 1 || t.k > t.n_agents - 1))
    raise(ErrorKind::Topology, "k must satisfy 1 <= k <= N-1, got k=" +
                                   std::to_string(t.k) + " with N=" +
                                   std::to_string(t.n_agents));
  if (t.ego < 0 || t.ego >= t.n_agents)
    raise(ErrorKind::Topology, "ego agent outside [0, N)");
}

std::vector<int> ring_neighbors(int agent, int n_agents, int k) {
  std::vector<int> out;
  for (int step = 1; static_cast<int>(out.size()) < k && step < n_agents;
       ++step) {
    for (int sign : {+1, -1}) {
      int neighbor = ((agent + sign * step) % n_agents + n_agents) % n_agents;
      if (neighbor == agent) continue;
      if (std::find(out.begin(), out.end(), neighbor) != out.end()) continue;
      out.push_back(neighbor);
      if (static_cast<int>(out.size()) == k) break;
    }
  }
  return out;
}

std::vector<Message> message_plan(const Topology& t,
                                  const world::ModalityMask& mask) {
  validate(t);
  std::vector<Message> plan;
  for (const auto& [agent, modalities] : mask) {
    if (agent < 0 || agent >= t.n_agents)
      raise(ErrorKind::Topology, "mask agent " + std::to_string(agent) +
                                     " outside topology of " +
                                     std::to_string(t.n_agents));
    for (world::Modality m : modalities) {
      switch (t.kind) {
        case TopologyKind::Centralized:
          if (agent != t.ego) plan.push_back({agent, t.ego, m});
          break;
        case TopologyKind::DecentralizedFull:
          for (int r = 0; r < t.n_agents; ++r)
            if (r != agent) plan.push_back({agent, r, m});
          break;
        case TopologyKind::DecentralizedK:
          for (int r : ring_neighbors(agent, t.n_agents, t.k))
            plan.push_back({agent, r, m});
          break;
      }
    }
  }
  return plan;
}

CostPrediction predict_cost(const Topology& t, const CostModel& model) {
  validate(t);
  double n = static_cast<double>(t.n_agents);
  switch (t.kind) {
    case TopologyKind::Centralized:
      return {model.t_collab * (n - 1) + model.d_msg * (n - 1) + model.t_ego,
              model.s_collab * (n - 1) + model.m_comm * (n - 1) + model.s_ego};
    case TopologyKind::DecentralizedFull:
      return {n * model.t_local + n * n * model.d_msg,
              n * model.s_local + n * n * model.m_comm};
    case TopologyKind::DecentralizedK: {
      double k = static_cast<double>(t.k);
      return {n * model.t_local + n * k * model.d_msg,
              n * model.s_local + n * k * model.m_comm};
    }
  }
  raise(ErrorKind::Topology, "unknown topology kind");
}

long long predicted_message_count(const Topology& t) {
  validate(t);
  long long n = t.n_agents;
  switch (t.kind) {
    case TopologyKind::Centralized: return n - 1;
    case TopologyKind::DecentralizedFull: return n * (n - 1);
    case TopologyKind::DecentralizedK: return n * t.k;
  }
  raise(ErrorKind::Topology, "unknown topology kind");
}

CommLedger account(const std::vector<Message>& plan, long long embedding_bytes,
                   const Topology& t, const CostModel& model) {
  if (embedding_bytes < 0)
    raise(ErrorKind::Parameter, "embedding_bytes must be non-negative");
  CommLedger ledger;
  ledger.messages = static_cast<long long>(plan.size());
  ledger.bytes = ledger.messages * embedding_bytes;
  CostPrediction pred = predict_cost(t, model);
  ledger.predicted_time_units = pred.time_units;
  ledger.predicted_space_units = pred.space_units;
  return ledger;
}

}  // namespace caml::comms
