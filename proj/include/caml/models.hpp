#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "caml/nn.hpp"
#include "caml/world.hpp"

namespace caml::model {

enum class Variant {
  CamlIntermediate,  // per-modality cross-agent attention, concat across modalities
  PreFusion,         // per-agent cross-modality attention, concat across agents
  LateCoop,          // per-(agent, modality) heads, logits averaged
  SingleAgent,       // intermediate path restricted to the ego
};

enum class Task { Decision, Segmentation };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct ModelSpec {
  Variant variant = Variant::CamlIntermediate;
  Task task = Task::Decision;
  std::vector<world::Modality> modalities = {world::Modality::Appearance,
                                             world::Modality::Range};
  std::vector<int> agents = {0, 1, 2};  // participating agents, ego first
  world::ModalityMask mask;             // inference-time providers
  int embed_dim = 32;
  int head_hidden = 64;
  int patch = 4;
  int grid = 16;
  int seg_classes = world::kSegClasses;
  int state_slots = 8;

  bool operator==(const ModelSpec&) const = default;
};

void validate(const ModelSpec& spec);

// Every participating agent provides every spec modality.
world::ModalityMask full_mask(const ModelSpec& spec);
bool is_full_mask(const ModelSpec& spec);
// a's providers are a subset of b's, agent by agent.
bool mask_subset(const world::ModalityMask& a, const world::ModalityMask& b);
// Identical in everything but the ModalityMask.
bool spec_homologous(const ModelSpec& a, const ModelSpec& b);

// Side of the coarse segmentation map (upsampled x2 to the grid).
int seg_coarse(const ModelSpec& spec);
// Output width of the prediction head.
std::int64_t head_out_dim(const ModelSpec& spec);
// Per-embedding wire size for the communication ledger.
long long embedding_bytes(const ModelSpec& spec);

struct ModelParams {
  ModelSpec spec;
  nn::ParamStore store;
};

ModelParams init_params(const ModelSpec& spec, std::uint64_t seed);

using EmbeddingMap = std::map<std::pair<int, world::Modality>, ad::Tensor>;

// One embedding per (agent, modality) pair in the mask.
EmbeddingMap encode(const ModelSpec& spec, const nn::BoundParams& params,
                    const world::EpisodeRecord& episode);

// Per modality: ego query (or learned null) cross-attends over all providers;
// results concatenated across modalities in spec order.

ad::Tensor aggregate_intermediate(const EmbeddingMap& embeddings,
                                  const ModelSpec& spec,
                                  const nn::BoundParams& params);

// Per agent: learned query cross-attends over its own modality embeddings;
// agent vectors concatenated and projected back to d.
ad::Tensor aggregate_prefusion(const EmbeddingMap& embeddings,
                               const ModelSpec& spec,
                               const nn::BoundParams& params);

// Per (agent, modality): own head; mean over providers per modality, then
// mean over modalities.
ad::Tensor late_coop_logits(const ModelSpec& spec, const nn::BoundParams& params,
                            const world::EpisodeRecord& episode);

// Full forward pass. Decision: [2] logits. Segmentation: [G x G x C] logits.
ad::Tensor forward(const ModelSpec& spec, const nn::BoundParams& params,
                   const world::EpisodeRecord& episode);

// Batched task heads used by the trainer: Decision -> [B x 2] logits,
// Segmentation -> [(B*G*G) x C] logits in episode-major row order.
ad::Tensor batch_logits(const ModelSpec& spec, const nn::BoundParams& params,
                        std::span<const world::EpisodeRecord* const> episodes);

world::ActionLabel predict_decision(const ad::Tensor& logits);
std::vector<std::uint8_t> predict_segmentation(const ad::Tensor& logits,
                                               const ModelSpec& spec);

}  // namespace caml::model
