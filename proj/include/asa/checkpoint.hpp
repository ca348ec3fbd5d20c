#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "asa/config.hpp"
#include "asa/volume.hpp"

namespace asa {

/// Named f64 tensor stored in a checkpoint.
struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const CheckpointRecord&) const = default;
};

/// ASAC container: magic "ASAC", version byte, u32-length-prefixed UTF-8 JSON
/// header, then records (u32 name length, name, u32 rank, u32 dims..., f64
/// payload), terminated by a zero-length name. All integers little-endian.
struct Checkpoint {
  nlohmann::json header;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const {
    auto it = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.name == name; });
    return it == records.end() ? nullptr : &*it;
  }
};

inline constexpr std::array<char, 4> kCheckpointMagic{'A', 'S', 'A', 'C'};
inline constexpr std::uint8_t kCheckpointVersion = 0x01;

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  out.push_back(kCheckpointVersion);
  const std::string header = ck.header.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& r : ck.records) {
    if (r.name.empty()) throw ContractViolation("checkpoint record names must be non-empty");
    if (shape_numel(r.shape) != r.values.size())
      throw ContractViolation("checkpoint record '" + r.name + "' shape does not match its payload");
    detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : r.values) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  }
  detail::put_u32(out, 0);
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() >= 4 && !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw FormatError("not an ASAC checkpoint (bad magic)");
  std::size_t pos = 4;
  auto need = [&](std::size_t n) {
    if (bytes.size() < pos + n) throw CorruptionError("checkpoint truncated at byte " + std::to_string(pos));
  };
  auto u32 = [&] {
    need(4);
    const auto v = detail::get_u32(&bytes[pos]);
    pos += 4;
    return v;
  };
  need(1);
  if (bytes[pos] != kCheckpointVersion) throw FormatError("unsupported ASAC version " + std::to_string(bytes[pos]));
  ++pos;
  Checkpoint ck;
  const std::size_t header_len = u32();
  need(header_len);
  try {
    ck.header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptionError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  pos += header_len;
  for (;;) {
    const std::size_t name_len = u32();
    if (name_len == 0) break;
    need(name_len);
    CheckpointRecord r;
    r.name.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + name_len));
    pos += name_len;
    const std::size_t rank = u32();
    for (std::size_t i = 0; i < rank; ++i) r.shape.push_back(u32());
    const std::size_t n = shape_numel(r.shape);
    need(8 * n);
    r.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[pos + 8 * i + b]) << (8 * b);
      r.values[i] = std::bit_cast<double>(bits);
    }
    pos += 8 * n;
    ck.records.push_back(std::move(r));
  }
  if (pos != bytes.size()) throw CorruptionError("trailing bytes after checkpoint terminator");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

// --- model <-> checkpoint --------------------------------------------------

inline void append_parameters(Checkpoint& ck, const ParameterList& params, const std::string& prefix = "param/") {
  for (const auto& p : params)
    ck.records.push_back({prefix + p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
}

inline void append_state(Checkpoint& ck, const ParameterList& params, const std::vector<std::vector<double>>& state,
                         const std::string& prefix) {
  for (std::size_t k = 0; k < params.size() && k < state.size(); ++k)
    if (!state[k].empty()) ck.records.push_back({prefix + params[k].name, params[k].tensor.shape(), state[k]});
}

/// Overwrites each parameter with the record named prefix + name.
inline void restore_parameters(const Checkpoint& ck, ParameterList params, const std::string& prefix = "param/") {
  for (auto& p : params) {
    const auto* r = ck.find(prefix + p.name);
    if (!r) throw CorruptionError("checkpoint lacks record '" + prefix + p.name + "'");
    if (r->shape != p.tensor.shape())
      throw CorruptionError("checkpoint record '" + r->name + "' has shape " + shape_str(r->shape) + ", expected " +
                            shape_str(p.tensor.shape()));
    std::copy(r->values.begin(), r->values.end(), p.tensor.mutable_data().begin());
  }
}

inline std::vector<std::vector<double>> restore_state(const Checkpoint& ck, const ParameterList& params,
                                                      const std::string& prefix) {
  std::vector<std::vector<double>> out(params.size());
  for (std::size_t k = 0; k < params.size(); ++k)
    if (const auto* r = ck.find(prefix + params[k].name)) out[k] = r->values;
  return out;
}

inline nlohmann::json checkpoint_header(const std::string& kind, const RunConfig& cfg, std::size_t step,
                                        const std::string& rng_state) {
  return {{"format", "asa-checkpoint"}, {"kind", kind}, {"config", to_json(cfg)}, {"step", step}, {"rng", rng_state}};
}

inline Checkpoint make_pretrain_checkpoint(const Pretrainer& trainer, const RunConfig& cfg, std::size_t step,
                                           const std::string& rng_state) {
  Checkpoint ck;
  ck.header = checkpoint_header("pretrain", cfg, step, rng_state);
  const auto params = trainer.model().parameters();
  append_parameters(ck, params);
  append_state(ck, params, trainer.optimizer_state().m, "adam_m/");
  append_state(ck, params, trainer.optimizer_state().v, "adam_v/");
  return ck;
}

inline Checkpoint make_finetune_checkpoint(const Finetuner& trainer, const RunConfig& cfg, std::size_t step,
                                           const std::string& rng_state) {
  Checkpoint ck;
  ck.header = checkpoint_header("finetune", cfg, step, rng_state);
  append_parameters(ck, trainer.model().parameters());
  append_state(ck, trainer.parameters(), trainer.optimizer_state().velocity, "momentum/");
  return ck;
}

inline RunConfig checkpoint_config(const Checkpoint& ck) {
  if (!ck.header.contains("config")) throw CorruptionError("checkpoint header has no config");
  return run_config_from_json(ck.header.at("config"));
}

inline std::string checkpoint_kind(const Checkpoint& ck) { return ck.header.value("kind", std::string{}); }

/// Rebuilds an autoencoder (weights only) from a pretraining checkpoint.
inline AsaModel asa_model_from_checkpoint(const Checkpoint& ck) {
  const RunConfig cfg = checkpoint_config(ck);
  AsaModel model = AsaModel::init(cfg.model_config(), cfg.seed);
  restore_parameters(ck, model.parameters());
  return model;
}

inline SegModel seg_model_from_checkpoint(const Checkpoint& ck) {
  const RunConfig cfg = checkpoint_config(ck);
  SegModel model = SegModel::init(cfg.seg_config(), cfg.seed);
  restore_parameters(ck, model.parameters());
  return model;
}

/// Loads the encoder of a pretraining checkpoint into a segmentation model.
inline void load_pretrained_encoder(SegModel& model, const Checkpoint& ck) {
  restore_parameters(ck, model.encoder_parameters());
}

}  // namespace asa
