#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include <json.hpp>

#include "caml/models.hpp"
#include "caml/nn.hpp"
#include "caml/tensor.hpp"
#include "caml/world.hpp"

namespace caml::train {
struct Checkpoint;
}

namespace caml::io {

using json = nlohmann::json;

// One tensor: u32 rank, i64 dims, then a little-endian f64 payload.
void write_tensor(std::ostream& out, const ad::Tensor& t);
ad::Tensor read_tensor(std::istream& in);

// ---- JSON conversions ------------------------------------------------------

json to_json(const world::WorldConfig& cfg);
world::WorldConfig world_config_from_json(const json& j);

json to_json(const model::ModelSpec& spec);
// `mask` may be the string "full" or a {"agent": [modalities]} object.
model::ModelSpec model_spec_from_json(const json& j);

json to_json(const world::ModalityMask& mask);
world::ModalityMask mask_from_json(const json& j,
                                   const model::ModelSpec& spec);

// FNV-1a of the canonical (sorted-key) dump; hex string for reports.
std::uint64_t config_hash(const json& j);
std::string hash_hex(std::uint64_t h);

// Rejects unknown keys anywhere in the object tree (strict schema).
void require_keys(const json& j, std::initializer_list<const char*> known,
                  const std::string& where);

// ---- dataset shards --------------------------------------------------------

// Writes <base>.manifest.json and <base>.shard.bin.
void save_dataset(const world::Dataset& ds, const std::string& base_path);
world::Dataset load_dataset(const std::string& base_path);

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const train::Checkpoint& ck, const std::string& path);
train::Checkpoint load_checkpoint(const std::string& path);

}  // namespace caml::io
