#pragma once

// Checkpoint file: magic "FTCP" | u32 version | u32 cfg_len | cfg bytes |
// u32 tensor_count | per tensor (lexicographic name order): u32 name_len,
// name, u32 ndim, u32 dims[ndim], f64 values. All integers and floats are
// little-endian; values are stored bit-exactly.

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>

#include "featwise/config.hpp"
#include "featwise/errors.hpp"
#include "featwise/meta_trainer.hpp"
#include "featwise/params.hpp"
#include "featwise/task.hpp"

namespace featwise {

inline constexpr char kCheckpointMagic[4] = {'F', 'T', 'C', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_text;
  ParamStore params;
};

inline std::string encode_checkpoint(const ParamStore& params, std::string_view config_text) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(config_text.size()));
  out.append(config_text);
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) detail::put_f64(out, v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (bytes.size() < 4 || in.bytes(4, "magic") != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError("checkpoint: bad magic (expected FTCP)");
  }
  const std::uint32_t version = in.u32("version");
  if (version > kCheckpointVersion) {
    throw VersionError("checkpoint: version " + std::to_string(version) + " is newer than supported version " +
                       std::to_string(kCheckpointVersion));
  }
  if (version == 0) throw FormatError("checkpoint: invalid version 0");
  Checkpoint ck;
  const std::uint32_t cfg_len = in.u32("config length");
  ck.config_text = std::string(in.bytes(cfg_len, "config text"));
  const std::uint32_t count = in.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = in.u32("tensor name length");
    std::string name(in.bytes(name_len, "tensor name"));
    const std::uint32_t ndim = in.u32("tensor rank");
    Shape shape(ndim);
    for (auto& d : shape) d = in.u32("tensor dims");
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = in.f64("tensor values");
    ck.params.add(name, Tensor(std::move(shape), std::move(values)));
  }
  if (!in.at_end()) throw FormatError("checkpoint: trailing bytes after last tensor");
  return ck;
}

inline void save_checkpoint(const ModelState& model, std::string_view config_text, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(model.params, config_text));
}

// Rebuilds the model from the echoed configuration and the stored tensors.
inline ModelState model_from_checkpoint(const Checkpoint& ck) {
  const TrainConfig cfg = parse_config(ck.config_text);
  if (!ck.params.contains(enc_name(0, "weight"))) throw FormatError("checkpoint: missing encoder weights");
  ModelState m;
  m.encoder = cfg.encoder_config(ck.params.get(enc_name(0, "weight")).dim(0));
  m.encoder.validate();
  m.head = cfg.head;
  for (std::size_t i = 0; i < m.encoder.block_count(); ++i) {
    const std::string w = enc_name(i, "weight");
    if (!ck.params.contains(w) || ck.params.get(w).dim(1) != m.encoder.widths[i]) {
      throw FormatError("checkpoint: encoder tensors do not match the configured widths");
    }
  }
  m.params = ck.params;
  return m;
}

struct LoadedCheckpoint {
  ModelState model;
  std::string config_text;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  Checkpoint ck = decode_checkpoint(detail::read_file(path));
  ModelState m = model_from_checkpoint(ck);
  return {std::move(m), std::move(ck.config_text)};
}

}  // namespace featwise
