#include "caml/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "caml/errors.hpp"
#include "caml/rng.hpp"
#include "caml/trainer.hpp"

namespace caml::io {

namespace {

constexpr char kDatasetMagic[4] = {'C', 'F', 'D', 'S'};
constexpr char kCheckpointMagic[4] = {'C', 'F', 'C', 'K'};
constexpr std::uint32_t kFormatVersion = 1;

// Explicit little-endian scalar IO; x86 is LE but the format should not
// depend on it.
template <class T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
  std::reverse(bytes, bytes + sizeof(T));
#endif
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) raise(ErrorKind::Integrity, "unexpected end of file");
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
  std::reverse(bytes, bytes + sizeof(T));
#endif
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void write_magic(std::ostream& out, const char (&magic)[4]) {
  out.write(magic, 4);
}

void check_magic(std::istream& in, const char (&magic)[4], const char* what) {
  char got[4];
  in.read(got, 4);
  if (!in || std::memcmp(got, magic, 4) != 0)
    raise(ErrorKind::Format, std::string(what) + ": bad magic");
}

void check_version(std::istream& in, const char* what) {
  std::uint32_t v = read_le<std::uint32_t>(in);
  if (v != kFormatVersion)
    raise(ErrorKind::Format, std::string(what) + ": format version " +
                                 std::to_string(v) + ", expected " +
                                 std::to_string(kFormatVersion));
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorKind::Data, "cannot write " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorKind::Data, "cannot read " + path);
  return in;
}

}  // namespace

void write_tensor(std::ostream& out, const ad::Tensor& t) {
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::int64_t d : t.shape()) write_le<std::int64_t>(out, d);
  for (double v : t.data()) write_le<double>(out, v);
}

ad::Tensor read_tensor(std::istream& in) {
  std::uint32_t rank = read_le<std::uint32_t>(in);
  if (rank > 16) raise(ErrorKind::Integrity, "tensor rank implausible");
  ad::Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i)
    shape.push_back(read_le<std::int64_t>(in));
  std::int64_t n = ad::numel(shape);
  if (n < 0 || n > (1 << 28)) raise(ErrorKind::Integrity, "tensor size implausible");
  std::vector<double> data(static_cast<std::size_t>(n));
  for (double& v : data) v = read_le<double>(in);
  return ad::Tensor(std::move(shape), std::move(data));
}

// ---- JSON -----------------------------------------------------------------

json to_json(const world::WorldConfig& cfg) {
  json mods = json::array();
  for (auto m : cfg.modalities) mods.push_back(world::to_string(m));
  return json{{"grid_size", cfg.grid_size},
              {"n_agents", cfg.n_agents},
              {"sensing_radius", cfg.sensing_radius},
              {"n_occluders", cfg.n_occluders},
              {"n_background", cfg.n_background},
              {"sigma_appearance", cfg.sigma_appearance},
              {"p_class_flip", cfg.p_class_flip},
              {"p_position_jitter", cfg.p_position_jitter},
              {"brake_rate", cfg.brake_rate},
              {"benign_zone_rate", cfg.benign_zone_rate},
              {"zone_depth", cfg.zone_depth},
              {"zone_width", cfg.zone_width},
              {"ensure_blindspot", cfg.ensure_blindspot},
              {"ensure_modality_split", cfg.ensure_modality_split},
              {"xor_task", cfg.xor_task},
              {"modalities", mods},
              {"state_slots", cfg.state_slots},
              {"max_retries", cfg.max_retries}};
}

void require_keys(const json& j, std::initializer_list<const char*> known,
                  const std::string& where) {
  if (!j.is_object())
    raise(ErrorKind::Config, where + ": expected an object");
  for (const auto& [key, unused] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) raise(ErrorKind::Config, where + ": unknown key '" + key + "'");
  }
}

world::WorldConfig world_config_from_json(const json& j) {
  require_keys(j,
               {"grid_size", "n_agents", "sensing_radius", "n_occluders",
                "n_background", "sigma_appearance", "p_class_flip",
                "p_position_jitter", "brake_rate", "benign_zone_rate",
                "zone_depth", "zone_width", "ensure_blindspot",
                "ensure_modality_split", "xor_task", "modalities",
                "state_slots", "max_retries"},
               "world");
  world::WorldConfig cfg;
  cfg.grid_size = j.value("grid_size", cfg.grid_size);
  cfg.n_agents = j.value("n_agents", cfg.n_agents);
  cfg.sensing_radius = j.value("sensing_radius", cfg.sensing_radius);
  cfg.n_occluders = j.value("n_occluders", cfg.n_occluders);
  cfg.n_background = j.value("n_background", cfg.n_background);
  cfg.sigma_appearance = j.value("sigma_appearance", cfg.sigma_appearance);
  cfg.p_class_flip = j.value("p_class_flip", cfg.p_class_flip);
  cfg.p_position_jitter = j.value("p_position_jitter", cfg.p_position_jitter);
  cfg.brake_rate = j.value("brake_rate", cfg.brake_rate);
  cfg.benign_zone_rate = j.value("benign_zone_rate", cfg.benign_zone_rate);
  cfg.zone_depth = j.value("zone_depth", cfg.zone_depth);
  cfg.zone_width = j.value("zone_width", cfg.zone_width);
  cfg.ensure_blindspot = j.value("ensure_blindspot", cfg.ensure_blindspot);
  cfg.ensure_modality_split =
      j.value("ensure_modality_split", cfg.ensure_modality_split);
  cfg.xor_task = j.value("xor_task", cfg.xor_task);
  cfg.state_slots = j.value("state_slots", cfg.state_slots);
  cfg.max_retries = j.value("max_retries", cfg.max_retries);
  if (j.contains("modalities")) {
    cfg.modalities.clear();
    for (const auto& m : j.at("modalities"))
      cfg.modalities.push_back(world::modality_from_string(m.get<std::string>()));
  }
  world::validate(cfg);
  return cfg;
}

json to_json(const world::ModalityMask& mask) {
  json out = json::object();
  for (const auto& [agent, mods] : mask) {
    json arr = json::array();
    for (auto m : mods) arr.push_back(world::to_string(m));
    out[std::to_string(agent)] = arr;
  }
  return out;
}

world::ModalityMask mask_from_json(const json& j, const model::ModelSpec& spec) {
  if (j.is_string()) {
    if (j.get<std::string>() == "full") return model::full_mask(spec);
    raise(ErrorKind::Config, "mask string must be \"full\"");
  }
  if (!j.is_object()) raise(ErrorKind::Config, "mask must be \"full\" or an object");
  world::ModalityMask mask;
  for (const auto& [key, mods] : j.items()) {
    int agent = 0;
    try {
      agent = std::stoi(key);
    } catch (...) {
      raise(ErrorKind::Config, "mask agent key '" + key + "' is not an integer");
    }
    std::set<world::Modality> set;
    for (const auto& m : mods)
      set.insert(world::modality_from_string(m.get<std::string>()));
    mask[agent] = std::move(set);
  }
  return mask;
}

json to_json(const model::ModelSpec& spec) {
  json mods = json::array();
  for (auto m : spec.modalities) mods.push_back(world::to_string(m));
  return json{{"variant", model::to_string(spec.variant)},
              {"task", model::to_string(spec.task)},
              {"modalities", mods},
              {"agents", spec.agents},
              {"mask", to_json(spec.mask)},
              {"embed_dim", spec.embed_dim},
              {"head_hidden", spec.head_hidden},
              {"patch", spec.patch},
              {"grid", spec.grid},
              {"seg_classes", spec.seg_classes},
              {"state_slots", spec.state_slots}};
}

model::ModelSpec model_spec_from_json(const json& j) {
  require_keys(j,
               {"variant", "task", "modalities", "agents", "mask", "embed_dim",
                "head_hidden", "patch", "grid", "seg_classes", "state_slots"},
               "model");
  model::ModelSpec spec;
  if (j.contains("variant"))
    spec.variant = model::variant_from_string(j.at("variant").get<std::string>());
  if (j.contains("task"))
    spec.task = model::task_from_string(j.at("task").get<std::string>());
  if (j.contains("modalities")) {
    spec.modalities.clear();
    for (const auto& m : j.at("modalities"))
      spec.modalities.push_back(
          world::modality_from_string(m.get<std::string>()));
  }
  if (j.contains("agents"))
    spec.agents = j.at("agents").get<std::vector<int>>();
  spec.embed_dim = j.value("embed_dim", spec.embed_dim);
  spec.head_hidden = j.value("head_hidden", spec.head_hidden);
  spec.patch = j.value("patch", spec.patch);
  spec.grid = j.value("grid", spec.grid);
  spec.seg_classes = j.value("seg_classes", spec.seg_classes);
  spec.state_slots = j.value("state_slots", spec.state_slots);
  if (j.contains("mask"))
    spec.mask = mask_from_json(j.at("mask"), spec);
  else
    spec.mask = model::full_mask(spec);
  model::validate(spec);
  return spec;
}

std::uint64_t config_hash(const json& j) {
  std::string dump = j.dump();
  return fnv1a64(dump.data(), dump.size());
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---- dataset ---------------------------------------------------------------

namespace {

void write_episode(std::ostream& out, const world::EpisodeRecord& ep) {
  write_le<std::uint64_t>(out, ep.episode_seed);
  write_le<std::uint8_t>(out, ep.expert_action == world::ActionLabel::Brake);
  const world::WorldState& w = ep.world;
  write_le<std::int32_t>(out, w.grid);
  write_le<std::int32_t>(out, w.zone_depth);
  write_le<std::int32_t>(out, w.zone_width);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.occluders.size()));
  for (const auto& c : w.occluders) {
    write_le<std::int32_t>(out, c.x);
    write_le<std::int32_t>(out, c.y);
  }
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.entities.size()));
  for (const auto& e : w.entities) {
    write_le<std::int32_t>(out, e.pos.x);
    write_le<std::int32_t>(out, e.pos.y);
    write_le<std::int32_t>(out, e.vx);
    write_le<std::int32_t>(out, e.vy);
    write_le<std::uint8_t>(out, e.is_hazard);
  }
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.agents.size()));
  for (const auto& a : w.agents) {
    write_le<std::int32_t>(out, a.pos.x);
    write_le<std::int32_t>(out, a.pos.y);
    write_le<std::uint8_t>(out, static_cast<std::uint8_t>(a.heading));
    write_le<std::int32_t>(out, a.radius);
  }
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ep.seg_labels.size()));
  out.write(reinterpret_cast<const char*>(ep.seg_labels.data()),
            static_cast<std::streamsize>(ep.seg_labels.size()));
  write_le<std::uint32_t>(out,
                          static_cast<std::uint32_t>(ep.observations.size()));
  for (const auto& [key, obs] : ep.observations) {
    write_le<std::int32_t>(out, key.first);
    write_le<std::uint8_t>(out, static_cast<std::uint8_t>(key.second));
    write_tensor(out, obs.payload);
  }
}

world::EpisodeRecord read_episode(std::istream& in) {
  world::EpisodeRecord ep;
  ep.episode_seed = read_le<std::uint64_t>(in);
  ep.expert_action = read_le<std::uint8_t>(in) ? world::ActionLabel::Brake
                                               : world::ActionLabel::Go;
  world::WorldState& w = ep.world;
  w.grid = read_le<std::int32_t>(in);
  w.zone_depth = read_le<std::int32_t>(in);
  w.zone_width = read_le<std::int32_t>(in);
  std::uint32_t n_occ = read_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_occ; ++i) {
    int x = read_le<std::int32_t>(in);
    int y = read_le<std::int32_t>(in);
    w.occluders.insert(world::Cell{x, y});
  }
  std::uint32_t n_ent = read_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_ent; ++i) {
    world::Entity e;
    e.pos.x = read_le<std::int32_t>(in);
    e.pos.y = read_le<std::int32_t>(in);
    e.vx = read_le<std::int32_t>(in);
    e.vy = read_le<std::int32_t>(in);
    e.is_hazard = read_le<std::uint8_t>(in) != 0;
    w.entities.push_back(e);
  }
  std::uint32_t n_agents = read_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_agents; ++i) {
    world::AgentPose a;
    a.pos.x = read_le<std::int32_t>(in);
    a.pos.y = read_le<std::int32_t>(in);
    a.heading = static_cast<world::Heading>(read_le<std::uint8_t>(in));
    a.radius = read_le<std::int32_t>(in);
    w.agents.push_back(a);
  }
  std::uint32_t n_seg = read_le<std::uint32_t>(in);
  ep.seg_labels.resize(n_seg);
  in.read(reinterpret_cast<char*>(ep.seg_labels.data()), n_seg);
  if (!in) raise(ErrorKind::Integrity, "truncated segmentation labels");
  std::uint32_t n_obs = read_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_obs; ++i) {
    world::Observation obs;
    obs.agent_id = read_le<std::int32_t>(in);
    obs.modality = static_cast<world::Modality>(read_le<std::uint8_t>(in));
    obs.payload = read_tensor(in);
    ep.observations.emplace(std::make_pair(obs.agent_id, obs.modality),
                            std::move(obs));
  }
  return ep;
}

}  // namespace

void save_dataset(const world::Dataset& ds, const std::string& base_path) {
  std::string shard_name = base_path + ".shard.bin";
  {
    auto out = open_out(shard_name);
    write_magic(out, kDatasetMagic);
    write_le<std::uint32_t>(out, kFormatVersion);
    write_le<std::uint64_t>(out, ds.episodes.size());
    for (const auto& ep : ds.episodes) write_episode(out, ep);
    out.write("END!", 4);
  }
  json manifest = {{"format_version", kFormatVersion},
                   {"kind", "dataset"},
                   {"world", to_json(ds.cfg)},
                   {"seed", ds.seed},
                   {"count", ds.episodes.size()},
                   {"shard", shard_name.substr(shard_name.find_last_of('/') + 1)}};
  manifest["config_hash"] = hash_hex(config_hash(manifest.at("world")));
  auto out = open_out(base_path + ".manifest.json");
  out << manifest.dump(2) << "\n";
}

world::Dataset load_dataset(const std::string& base_path) {
  json manifest;
  {
    auto in = open_in(base_path + ".manifest.json");
    try {
      in >> manifest;
    } catch (const std::exception& e) {
      raise(ErrorKind::Format, std::string("bad dataset manifest: ") + e.what());
    }
  }
  if (manifest.value("kind", "") != "dataset")
    raise(ErrorKind::Format, "not a dataset manifest");
  if (manifest.value("format_version", 0u) != kFormatVersion)
    raise(ErrorKind::Format, "dataset manifest version mismatch");

  world::Dataset ds;
  ds.cfg = world_config_from_json(manifest.at("world"));
  ds.seed = manifest.value("seed", 0ull);

  auto in = open_in(base_path + ".shard.bin");
  check_magic(in, kDatasetMagic, "dataset shard");
  check_version(in, "dataset shard");
  std::uint64_t count = read_le<std::uint64_t>(in);
  if (count != manifest.at("count").get<std::uint64_t>())
    raise(ErrorKind::Integrity, "manifest/shard episode count mismatch");
  for (std::uint64_t i = 0; i < count; ++i)
    ds.episodes.push_back(read_episode(in));
  char tail[4];
  in.read(tail, 4);
  if (!in || std::memcmp(tail, "END!", 4) != 0)
    raise(ErrorKind::Integrity, "dataset shard truncated");
  return ds;
}

// ---- checkpoint ------------------------------------------------------------

void save_checkpoint(const train::Checkpoint& ck, const std::string& path) {
  json header = {{"format_version", kFormatVersion},
                 {"kind", "checkpoint"},
                 {"spec", to_json(ck.spec)},
                 {"config_hash", hash_hex(ck.config_hash)},
                 {"epoch", ck.epoch},
                 {"param_names", ck.params.names},
                 {"adam_step", ck.opt.step}};
  json log = json::array();
  for (const auto& row : ck.log)
    log.push_back({row.epoch, row.lr, row.task_loss, row.kd_loss,
                   row.total_loss});
  header["log"] = log;
  std::string dump = header.dump();

  auto out = open_out(path);
  write_magic(out, kCheckpointMagic);
  write_le<std::uint32_t>(out, kFormatVersion);
  write_le<std::uint64_t>(out, dump.size());
  out.write(dump.data(), static_cast<std::streamsize>(dump.size()));
  for (const auto& t : ck.params.values) write_tensor(out, t);
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& shape = ck.params.values[i].shape();
    write_tensor(out, ad::Tensor(shape, ck.opt.m[i]));
    write_tensor(out, ad::Tensor(shape, ck.opt.v[i]));
  }
  out.write("END!", 4);
}

train::Checkpoint load_checkpoint(const std::string& path) {
  auto in = open_in(path);
  check_magic(in, kCheckpointMagic, "checkpoint");
  check_version(in, "checkpoint");
  std::uint64_t header_len = read_le<std::uint64_t>(in);
  if (header_len > (1u << 24))
    raise(ErrorKind::Integrity, "checkpoint header length implausible");
  std::string dump(header_len, '\0');
  in.read(dump.data(), static_cast<std::streamsize>(header_len));
  if (!in) raise(ErrorKind::Integrity, "checkpoint header truncated");
  json header;
  try {
    header = json::parse(dump);
  } catch (const std::exception& e) {
    raise(ErrorKind::Format, std::string("bad checkpoint header: ") + e.what());
  }
  if (header.value("kind", "") != "checkpoint")
    raise(ErrorKind::Format, "not a checkpoint file");

  train::Checkpoint ck;
  ck.spec = model_spec_from_json(header.at("spec"));
  ck.epoch = header.value("epoch", 0);
  ck.config_hash =
      std::stoull(header.value("config_hash", std::string("0")), nullptr, 16);
  ck.opt.step = header.value("adam_step", 0ll);
  for (const auto& row : header.value("log", json::array())) {
    train::LogRow r;
    r.epoch = row.at(0).get<int>();
    r.lr = row.at(1).get<double>();
    r.task_loss = row.at(2).get<double>();
    r.kd_loss = row.at(3).get<double>();
    r.total_loss = row.at(4).get<double>();
    ck.log.push_back(r);
  }
  auto names = header.at("param_names").get<std::vector<std::string>>();
  for (const auto& name : names) ck.params.add(name, read_tensor(in));
  for (std::size_t i = 0; i < names.size(); ++i) {
    ad::Tensor m = read_tensor(in);
    ad::Tensor v = read_tensor(in);
    if (m.shape() != ck.params.values[i].shape() ||
        v.shape() != ck.params.values[i].shape())
      raise(ErrorKind::Integrity, "optimizer state shape mismatch");
    ck.opt.m.emplace_back(m.data().begin(), m.data().end());
    ck.opt.v.emplace_back(v.data().begin(), v.data().end());
  }
  char tail[4];
  in.read(tail, 4);
  if (!in || std::memcmp(tail, "END!", 4) != 0)
    raise(ErrorKind::Integrity, "checkpoint truncated");
  return ck;
}

}  // namespace caml::io
