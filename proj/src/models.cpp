#include "caml/models.hpp"

#include <algorithm>

#include "caml/errors.hpp"
#include "caml/rng.hpp"

namespace caml::model {

using ad::Tensor;
using world::Modality;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::CamlIntermediate: return "CAML_INTERMEDIATE";
    case Variant::PreFusion: return "PRE_FUSION";
    case Variant::LateCoop: return "LATE_COOP";
    case Variant::SingleAgent: return "SINGLE_AGENT";
  }
  raise(ErrorKind::Model, "unknown variant value");
}

Variant variant_from_string(const std::string& s) {
  if (s == "CAML_INTERMEDIATE") return Variant::CamlIntermediate;
  if (s == "PRE_FUSION") return Variant::PreFusion;
  if (s == "LATE_COOP") return Variant::LateCoop;
  if (s == "SINGLE_AGENT") return Variant::SingleAgent;
  raise(ErrorKind::Config, "unknown variant '" + s + "'");
}

std::string to_string(Task t) {
  return t == Task::Decision ? "DECISION" : "SEGMENTATION";
}

Task task_from_string(const std::string& s) {
  if (s == "DECISION") return Task::Decision;
  if (s == "SEGMENTATION") return Task::Segmentation;
  raise(ErrorKind::Config, "unknown task '" + s + "'");
}

void validate(const ModelSpec& spec) {
  if (spec.modalities.empty())
    raise(ErrorKind::Model, "model needs at least one modality");
  for (std::size_t i = 1; i < spec.modalities.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (spec.modalities[i] == spec.modalities[j])
        raise(ErrorKind::Model, "duplicate modality in spec");
  if (spec.agents.empty() || spec.agents.front() != 0)
    raise(ErrorKind::Model, "agent list must start with the ego (agent 0)");
  if (!std::is_sorted(spec.agents.begin(), spec.agents.end()) ||
      std::adjacent_find(spec.agents.begin(), spec.agents.end()) !=
          spec.agents.end())
    raise(ErrorKind::Model, "agent list must be sorted and unique");
  if (spec.variant == Variant::SingleAgent && spec.agents.size() != 1)
    raise(ErrorKind::Model, "SINGLE_AGENT uses exactly the ego agent");
  if (spec.embed_dim < 1 || spec.head_hidden < 1)
    raise(ErrorKind::Model, "embed_dim and head_hidden must be positive");
  if (spec.patch < 1 || spec.grid % spec.patch != 0)
    raise(ErrorKind::Model, "patch size must divide the grid");
  if (spec.grid % 2 != 0)
    raise(ErrorKind::Model, "grid must be even for the coarse seg map");
  if (spec.task == Task::Segmentation && spec.seg_classes < 2)
    raise(ErrorKind::Model, "segmentation needs at least 2 classes");
  for (const auto& [agent, mods] : spec.mask) {
    if (std::find(spec.agents.begin(), spec.agents.end(), agent) ==
        spec.agents.end())
      raise(ErrorKind::Model, "mask lists agent " + std::to_string(agent) +
                                  " outside the spec's agent set");
    for (Modality m : mods)
      if (std::find(spec.modalities.begin(), spec.modalities.end(), m) ==
          spec.modalities.end())
        raise(ErrorKind::Model, "mask modality " + world::to_string(m) +
                                    " outside the spec's modality set");
  }
  bool any_provider = false;
  for (const auto& [agent, mods] : spec.mask) any_provider |= !mods.empty();
  if ((spec.variant == Variant::PreFusion || spec.variant == Variant::LateCoop) &&
      !any_provider)
    raise(ErrorKind::Model, "variant needs at least one providing agent");
}

world::ModalityMask full_mask(const ModelSpec& spec) {
  world::ModalityMask mask;
  for (int a : spec.agents)
    mask[a] = std::set<Modality>(spec.modalities.begin(), spec.modalities.end());
  return mask;
}

bool is_full_mask(const ModelSpec& spec) {
  for (int a : spec.agents) {
    auto it = spec.mask.find(a);
    if (it == spec.mask.end() || it->second.size() != spec.modalities.size())
      return false;
  }
  return true;
}

bool mask_subset(const world::ModalityMask& a, const world::ModalityMask& b) {
  for (const auto& [agent, mods] : a) {
    if (mods.empty()) continue;
    auto it = b.find(agent);
    if (it == b.end()) return false;
    for (Modality m : mods)
      if (!it->second.count(m)) return false;
  }
  return true;
}

bool spec_homologous(const ModelSpec& a, const ModelSpec& b) {
  ModelSpec am = a, bm = b;
  am.mask.clear();
  bm.mask.clear();
  return am == bm;
}

int seg_coarse(const ModelSpec& spec) { return spec.grid / 2; }

std::int64_t head_out_dim(const ModelSpec& spec) {
  if (spec.task == Task::Decision) return 2;
  std::int64_t c = seg_coarse(spec);
  return c * c * spec.seg_classes;
}

long long embedding_bytes(const ModelSpec& spec) {
  return static_cast<long long>(spec.embed_dim) * 8;
}

namespace {

std::int64_t token_count(const ModelSpec& spec, Modality m) {
  if (m == Modality::State) return spec.state_slots;
  std::int64_t side = spec.grid / spec.patch;
  return side * side;
}

std::int64_t token_features(const ModelSpec& spec, Modality m) {
  if (m == Modality::State) return 5;
  return 2 * spec.patch * spec.patch;
}

std::uint64_t layer_seed(std::uint64_t model_seed, const std::string& name) {
  return mix_seed({model_seed, fnv1a64(name.data(), name.size())});
}

void add_linear(nn::ParamStore& store, const std::string& prefix,
                std::int64_t in, std::int64_t out, std::uint64_t model_seed) {
  nn::Linear layer = nn::make_linear(in, out, layer_seed(model_seed, prefix));
  store.add(prefix + ".w", layer.weight);
  store.add(prefix + ".b", layer.bias);
}

void add_attention(nn::ParamStore& store, const std::string& prefix,
                   std::int64_t dim, std::uint64_t model_seed) {
  add_linear(store, prefix + ".q", dim, dim, model_seed);
  add_linear(store, prefix + ".k", dim, dim, model_seed);
  add_linear(store, prefix + ".v", dim, dim, model_seed);
}

void add_head(nn::ParamStore& store, const std::string& prefix, std::int64_t in,
              std::int64_t out, const ModelSpec& spec,
              std::uint64_t model_seed) {
  add_linear(store, prefix + ".l1", in, spec.head_hidden, model_seed);
  add_linear(store, prefix + ".l2", spec.head_hidden, spec.head_hidden,
             model_seed);
  add_linear(store, prefix + ".l3", spec.head_hidden, out, model_seed);
}

// Agents that provide at least one modality, ascending.
std::vector<int> present_agents(const ModelSpec& spec) {
  std::vector<int> out;
  for (int a : spec.agents) {
    auto it = spec.mask.find(a);
    if (it != spec.mask.end() && !it->second.empty()) out.push_back(a);
  }
  return out;
}

std::vector<int> providers_of(const ModelSpec& spec, Modality m) {
  std::vector<int> out;
  for (int a : spec.agents) {
    auto it = spec.mask.find(a);
    if (it != spec.mask.end() && it->second.count(m)) out.push_back(a);
  }
  return out;
}

Tensor head_forward(const nn::BoundParams& params, const std::string& prefix,
                    const Tensor& x) {
  Tensor h1 = ad::relu(nn::linear_forward(params.linear(prefix + ".l1"), x));
  Tensor h2 = ad::relu(nn::linear_forward(params.linear(prefix + ".l2"), h1));
  return nn::linear_forward(params.linear(prefix + ".l3"), h2);
}

// Rearranges a [2 x G x G] observation into patch tokens [S x (2*p*p)], or a
// STATE vector into [slots x 5].
Tensor tokenize(const ModelSpec& spec, Modality m, const Tensor& payload) {
  if (m == Modality::State)
    return ad::reshape(payload, {spec.state_slots, 5});
  int g = spec.grid, p = spec.patch;
  int side = g / p;
  auto src = payload.data();
  std::vector<double> tokens(
      static_cast<std::size_t>(side * side * 2 * p * p));
  std::size_t out = 0;
  for (int ty = 0; ty < side; ++ty) {
    for (int tx = 0; tx < side; ++tx) {
      for (int c = 0; c < 2; ++c) {
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            int y = ty * p + py, x = tx * p + px;
            tokens[out++] = src[static_cast<std::size_t>((c * g + y) * g + x)];
          }
        }
      }
    }
  }
  return Tensor({static_cast<std::int64_t>(side) * side, 2 * p * p},
                std::move(tokens));
}

Tensor encode_one(const ModelSpec& spec, const nn::BoundParams& params,
                  Modality m, const Tensor& payload) {
  std::string enc = "enc." + world::to_string(m);
  Tensor tokens = tokenize(spec, m, payload);
  Tensor embedded =
      ad::relu(nn::linear_forward(params.linear(enc + ".patch"), tokens));
  Tensor attended = nn::scaled_dot_attention(
      params.attention(enc + ".attn", nn::AttnMode::Self), embedded, embedded);
  Tensor mixed = ad::add(attended, embedded);
  Tensor pooled = ad::reshape(ad::mean(mixed, 0), {1, spec.embed_dim});
  return nn::linear_forward(params.linear(enc + ".out"), pooled);
}

Tensor null_embedding(const ModelSpec& spec, const nn::BoundParams& params,
                      Modality m) {
  return ad::reshape(params.get("null." + world::to_string(m)),
                     {1, spec.embed_dim});
}

}  // namespace

ModelParams init_params(const ModelSpec& spec, std::uint64_t seed) {
  validate(spec);
  ModelParams mp;
  mp.spec = spec;
  nn::ParamStore& store = mp.store;
  std::int64_t d = spec.embed_dim;

  for (Modality m : spec.modalities) {
    std::string enc = "enc." + world::to_string(m);
    add_linear(store, enc + ".patch", token_features(spec, m), d, seed);
    add_attention(store, enc + ".attn", d, seed);
    add_linear(store, enc + ".out", d, d, seed);
    std::string null_name = "null." + world::to_string(m);
    Rng rng(layer_seed(seed, null_name));
    double bound = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> null_v(static_cast<std::size_t>(d));
    for (double& v : null_v) v = rng.uniform(-bound, bound);
    store.add(null_name, Tensor({d}, std::move(null_v)));
  }

  switch (spec.variant) {
    case Variant::CamlIntermediate:
    case Variant::SingleAgent: {
      for (Modality m : spec.modalities)
        add_attention(store, "fuse." + world::to_string(m) + ".attn", d, seed);
      std::int64_t fused = d * static_cast<std::int64_t>(spec.modalities.size());
      add_head(store, "head", fused, head_out_dim(spec), spec, seed);
      break;
    }
    case Variant::PreFusion: {
      add_attention(store, "prefuse.attn", d, seed);
      Rng rng(layer_seed(seed, "prefuse.query"));
      double bound = 1.0 / std::sqrt(static_cast<double>(d));
      std::vector<double> q(static_cast<std::size_t>(d));
      for (double& v : q) v = rng.uniform(-bound, bound);
      store.add("prefuse.query", Tensor({d}, std::move(q)));
      std::int64_t n_present =
          static_cast<std::int64_t>(present_agents(spec).size());
      add_linear(store, "prefuse.proj", n_present * d, d, seed);
      add_head(store, "head", d, head_out_dim(spec), spec, seed);
      break;
    }
    case Variant::LateCoop: {
      for (Modality m : spec.modalities)
        add_head(store, "head." + world::to_string(m), d, head_out_dim(spec),
                 spec, seed);
      break;
    }
  }
  return mp;
}

EmbeddingMap encode(const ModelSpec& spec, const nn::BoundParams& params,
                    const world::EpisodeRecord& episode) {
  EmbeddingMap out;
  for (int a : spec.agents) {
    auto it = spec.mask.find(a);
    if (it == spec.mask.end()) continue;
    for (Modality m : spec.modalities) {
      if (!it->second.count(m)) continue;
      auto obs = episode.observations.find({a, m});
      if (obs == episode.observations.end())
        raise(ErrorKind::Data, "episode has no observation for agent " +
                                   std::to_string(a) + ", modality " +
                                   world::to_string(m));
      out.emplace(std::make_pair(a, m),
                  encode_one(spec, params, m, obs->second.payload));
    }
  }
  return out;
}

Tensor aggregate_intermediate(const EmbeddingMap& embeddings,
                              const ModelSpec& spec,
                              const nn::BoundParams& params) {
  if (spec.variant != Variant::CamlIntermediate &&
      spec.variant != Variant::SingleAgent)
    raise(ErrorKind::Contract, "aggregate_intermediate on wrong variant");
  std::vector<Tensor> parts;
  for (Modality m : spec.modalities) {
    std::vector<int> providers = providers_of(spec, m);
    if (providers.empty()) {
      parts.push_back(null_embedding(spec, params, m));
      continue;
    }
    std::vector<Tensor> rows;
    bool ego_provides = false;
    for (int a : providers) {
      rows.push_back(embeddings.at({a, m}));
      ego_provides |= a == 0;
    }
    Tensor kv = rows.size() == 1 ? rows[0] : ad::concat(rows, 0);
    Tensor q = ego_provides ? embeddings.at({0, m})
                            : null_embedding(spec, params, m);
    parts.push_back(nn::scaled_dot_attention(
        params.attention("fuse." + world::to_string(m) + ".attn",
                         nn::AttnMode::Cross),
        q, kv));
  }
  return parts.size() == 1 ? parts[0] : ad::concat(parts, 1);
}

Tensor aggregate_prefusion(const EmbeddingMap& embeddings, const ModelSpec& spec,
                           const nn::BoundParams& params) {
  if (spec.variant != Variant::PreFusion)
    raise(ErrorKind::Contract, "aggregate_prefusion on wrong variant");
  std::vector<int> agents = present_agents(spec);
  if (agents.empty())
    raise(ErrorKind::Model, "pre-fusion model with no providing agents");
  Tensor query = ad::reshape(params.get("prefuse.query"), {1, spec.embed_dim});
  auto block = params.attention("prefuse.attn", nn::AttnMode::Cross);
  std::vector<Tensor> per_agent;
  for (int a : agents) {
    std::vector<Tensor> rows;
    for (Modality m : spec.modalities)
      if (spec.mask.at(a).count(m)) rows.push_back(embeddings.at({a, m}));
    Tensor kv = rows.size() == 1 ? rows[0] : ad::concat(rows, 0);
    per_agent.push_back(nn::scaled_dot_attention(block, query, kv));
  }
  Tensor cat = per_agent.size() == 1 ? per_agent[0] : ad::concat(per_agent, 1);
  return nn::linear_forward(params.linear("prefuse.proj"), cat);
}

namespace {

Tensor mean_of_rows(std::vector<Tensor> rows) {
  Tensor acc = rows[0];
  for (std::size_t i = 1; i < rows.size(); ++i) acc = ad::add(acc, rows[i]);
  return ad::scalar_mul(acc, 1.0 / static_cast<double>(rows.size()));
}

Tensor late_coop_row(const ModelSpec& spec, const nn::BoundParams& params,
                     const world::EpisodeRecord& episode) {
  EmbeddingMap embeddings = encode(spec, params, episode);
  std::vector<Tensor> per_modality;
  for (Modality m : spec.modalities) {
    std::vector<int> providers = providers_of(spec, m);
    if (providers.empty()) continue;
    std::vector<Tensor> logits;
    for (int a : providers)
      logits.push_back(head_forward(params, "head." + world::to_string(m),
                                    embeddings.at({a, m})));
    per_modality.push_back(mean_of_rows(std::move(logits)));
  }
  if (per_modality.empty())
    raise(ErrorKind::Model, "late cooperation with no providers at all");
  return mean_of_rows(std::move(per_modality));
}

// Unified per-episode head output as a [1 x out] row.
Tensor forward_row(const ModelSpec& spec, const nn::BoundParams& params,
                   const world::EpisodeRecord& episode) {
  switch (spec.variant) {
    case Variant::CamlIntermediate:
    case Variant::SingleAgent: {
      EmbeddingMap embeddings = encode(spec, params, episode);
      return head_forward(params, "head",
                          aggregate_intermediate(embeddings, spec, params));
    }
    case Variant::PreFusion: {
      EmbeddingMap embeddings = encode(spec, params, episode);
      return head_forward(params, "head",
                          aggregate_prefusion(embeddings, spec, params));
    }
    case Variant::LateCoop:
      return late_coop_row(spec, params, episode);
  }
  raise(ErrorKind::Model, "unknown variant");
}

}  // namespace

ad::Tensor late_coop_logits(const ModelSpec& spec, const nn::BoundParams& params,
                            const world::EpisodeRecord& episode) {
  if (spec.variant != Variant::LateCoop)
    raise(ErrorKind::Contract, "late_coop_logits on wrong variant");
  Tensor row = late_coop_row(spec, params, episode);
  return ad::reshape(row, {row.size()});
}

Tensor forward(const ModelSpec& spec, const nn::BoundParams& params,
               const world::EpisodeRecord& episode) {
  validate(spec);
  if (episode.world.grid != spec.grid)
    raise(ErrorKind::Contract, "episode grid does not match the model spec");
  Tensor row = forward_row(spec, params, episode);
  if (spec.task == Task::Decision) return ad::reshape(row, {2});
  std::int64_t c = seg_coarse(spec);
  Tensor coarse = ad::reshape(row, {c, c, spec.seg_classes});
  return ad::upsample_nn(coarse, 2);
}

Tensor batch_logits(const ModelSpec& spec, const nn::BoundParams& params,
                    std::span<const world::EpisodeRecord* const> episodes) {
  if (episodes.empty()) raise(ErrorKind::Data, "empty batch");
  std::vector<Tensor> rows;
  rows.reserve(episodes.size());
  for (const world::EpisodeRecord* ep : episodes) {
    Tensor row = forward_row(spec, params, *ep);
    if (spec.task == Task::Decision) {
      rows.push_back(row);
    } else {
      std::int64_t c = seg_coarse(spec);
      Tensor coarse = ad::reshape(row, {c, c, spec.seg_classes});
      Tensor up = ad::upsample_nn(coarse, 2);
      rows.push_back(ad::reshape(
          up, {static_cast<std::int64_t>(spec.grid) * spec.grid,
               spec.seg_classes}));
    }
  }
  return rows.size() == 1 ? rows[0] : ad::concat(rows, 0);
}

world::ActionLabel predict_decision(const ad::Tensor& logits) {
  if (logits.size() != 2)
    raise(ErrorKind::Dimension, "decision logits must have two entries");
  // tie goes to BRAKE (safety-side, same closed convention as the zone)
  return logits.at(1) >= logits.at(0) ? world::ActionLabel::Brake
                                      : world::ActionLabel::Go;
}

std::vector<std::uint8_t> predict_segmentation(const ad::Tensor& logits,
                                               const ModelSpec& spec) {
  if (logits.shape() !=
      ad::Shape{spec.grid, spec.grid, spec.seg_classes})
    raise(ErrorKind::Dimension, "segmentation logits must be [GxGxC]");
  std::vector<std::uint8_t> out(
      static_cast<std::size_t>(spec.grid * spec.grid));
  for (int i = 0; i < spec.grid * spec.grid; ++i) {
    int best = 0;
    double best_v = logits.at(i * spec.seg_classes);
    for (int c = 1; c < spec.seg_classes; ++c) {
      double v = logits.at(i * spec.seg_classes + c);
      if (v > best_v) {  // tie keeps the lower class id
        best_v = v;
        best = c;
      }
    }
    out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace caml::model
