#pragma once

// SPCK checkpoint files.
//
//   "SPCK" | u32 version | u32 len, config text | u64 step
//   weights table
//   u8 has_ema   [ema table]
//   u8 has_optim [u64 optimizer step, m table, v table]
//
// A table is u32 count followed by, per tensor, u32 len + name, u32 rank,
// rank x u32 dims and numel little-endian f32 values. All integers are
// little-endian.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sprout/binio.hpp"
#include "sprout/config_file.hpp"
#include "sprout/error.hpp"
#include "sprout/udit.hpp"

namespace sprout {

inline constexpr char kCheckpointMagic[4] = {'S', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

using TensorTable = std::vector<NamedTensor>;

struct OptimizerState {
  std::uint64_t step = 0;
  TensorTable m, v;
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct Checkpoint {
  std::string config_text;
  std::uint64_t step = 0;
  TensorTable weights;
  std::optional<TensorTable> ema;
  std::optional<OptimizerState> optimizer;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline TensorTable table_from_flat(const nn::ParamLayout& layout, std::span<const float> flat) {
  if (flat.size() != layout.total()) throw ShapeError("flat buffer does not match layout");
  TensorTable t;
  t.reserve(layout.slots().size());
  for (const auto& s : layout.slots())
    t.push_back({s.name, s.shape, std::vector<float>(flat.begin() + s.offset, flat.begin() + s.offset + s.size)});
  return t;
}

// Flattens a table in layout order; every layout tensor must be present with
// its exact shape.
inline std::vector<float> flat_from_table(const nn::ParamLayout& layout, const TensorTable& table,
                                          std::string_view section) {
  std::vector<float> flat(layout.total());
  if (table.size() != layout.slots().size())
    throw FormatError(std::string(section) + " table has " + std::to_string(table.size()) + " tensors, model needs " +
                      std::to_string(layout.slots().size()));
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& s = layout.slots()[i];
    const auto& nt = table[i];
    if (nt.name != s.name || nt.shape != s.shape)
      throw FormatError(std::string(section) + " table entry '" + nt.name + "' " + shape_str(nt.shape) +
                        " does not match model tensor '" + s.name + "' " + shape_str(s.shape));
    std::copy(nt.values.begin(), nt.values.end(), flat.begin() + s.offset);
  }
  return flat;
}

namespace detail {

inline void write_table(ByteWriter& w, const TensorTable& table) {
  w.u32(static_cast<std::uint32_t>(table.size()));
  for (const auto& t : table) {
    if (shape_numel(t.shape) != t.values.size()) throw ShapeError("tensor '" + t.name + "' shape/value mismatch");
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values) w.f32(v);
  }
}

inline TensorTable read_table(ByteReader& r, const std::string& section) {
  const auto count = r.u32(section + " table count");
  TensorTable table;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = section + " tensor " + std::to_string(i);
    NamedTensor t;
    t.name = r.str(where + " name");
    const auto rank = r.u32(where + " rank");
    if (rank > 8) throw FormatError(r.file() + ": " + where + " has implausible rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.u32(where + " dims"));
    const std::size_t n = shape_numel(t.shape);
    r.need(n * 4, where + " values ('" + t.name + "')");
    t.values.resize(n);
    for (auto& v : t.values) v = r.f32(where + " values");
    table.push_back(std::move(t));
  }
  return table;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.str(ck.config_text);
  w.u64(ck.step);
  detail::write_table(w, ck.weights);
  w.u8(ck.ema ? 1 : 0);
  if (ck.ema) detail::write_table(w, *ck.ema);
  w.u8(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    w.u64(ck.optimizer->step);
    detail::write_table(w, ck.optimizer->m);
    detail::write_table(w, ck.optimizer->v);
  }
  return w.data();
}

inline Checkpoint decode_checkpoint(std::string_view data, const std::string& file = "<memory>") {
  ByteReader r(data, file);
  const auto magic = r.bytes(4, "magic");
  if (magic != std::string_view(kCheckpointMagic, 4)) throw FormatError(file + ": bad magic, not an SPCK checkpoint");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError(file + ": version mismatch, file has " + std::to_string(version) + ", reader supports " +
                      std::to_string(kCheckpointVersion));
  Checkpoint ck;
  ck.config_text = r.str("config text");
  ck.step = r.u64("global step");
  ck.weights = detail::read_table(r, "weights");
  if (r.u8("ema flag")) ck.ema = detail::read_table(r, "ema");
  if (r.u8("optimizer flag")) {
    OptimizerState st;
    st.step = r.u64("optimizer step");
    st.m = detail::read_table(r, "optimizer m");
    st.v = detail::read_table(r, "optimizer v");
    ck.optimizer = std::move(st);
  }
  if (r.remaining() != 0)
    throw FormatError(file + ": " + std::to_string(r.remaining()) + " trailing bytes after optimizer section");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  atomic_write(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path), path.string());
}

inline Checkpoint checkpoint_from_model(const UDiT<float>& model, std::uint64_t step = 0,
                                        std::string config_text = {}) {
  Checkpoint ck;
  ck.config_text = config_text.empty() ? model.config().to_text() : std::move(config_text);
  ck.step = step;
  ck.weights = table_from_flat(model.layout(), model.weights());
  return ck;
}

inline void save_checkpoint(const UDiT<float>& model, const std::filesystem::path& path) {
  save_checkpoint(checkpoint_from_model(model), path);
}

inline UDiTConfig checkpoint_model_config(const Checkpoint& ck) {
  return UDiTConfig::from_config(KeyValueConfig::parse(ck.config_text, "checkpoint config"));
}

// Rebuilds the model; `use_ema` selects the EMA table when one is stored.
inline UDiT<float> model_from_checkpoint(const Checkpoint& ck, bool use_ema = false) {
  const auto cfg = checkpoint_model_config(ck);
  auto probe = UDiT<float>::from_weights(cfg, std::vector<float>(config_param_count(cfg)));
  const bool ema = use_ema && ck.ema.has_value();
  auto flat = flat_from_table(probe.layout(), ema ? *ck.ema : ck.weights, ema ? "ema" : "weights");
  return UDiT<float>::from_weights(cfg, std::move(flat));
}

inline UDiT<float> load_model(const std::filesystem::path& path, bool use_ema = false) {
  return model_from_checkpoint(load_checkpoint(path), use_ema);
}

}  // namespace sprout
