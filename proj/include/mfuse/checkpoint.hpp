#pragma once

// Checkpoint file layout (all integers little-endian):
//   8 bytes  magic "MFUSECK1"
//   u32      format version (1)
//   u64      byte length of the model spec JSON, then the JSON (UTF-8)
//   u64      model seed
//   u64      number of stored values
//   f32 * n  parameter values, concatenated in ModelState::visit order:
//            image branch (stem, blocks, feature, classifier), text branch
//            (embedding, blocks, feature, classifier), fusion sites in site
//            order, fusion head. Each tensor is stored row-major.

#include <filesystem>
#include <fstream>
#include <string>

#include "mfuse/config.hpp"

namespace mfuse {

inline constexpr char kCheckpointMagic[8] = {'M', 'F', 'U', 'S', 'E', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const ModelState& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("checkpoint: cannot write '" + path.string() + "'");
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  bin::put_u32(out, kCheckpointVersion);
  const std::string spec = to_json(m.spec).dump();
  bin::put_u64(out, spec.size());
  out.write(spec.data(), static_cast<std::streamsize>(spec.size()));
  bin::put_u64(out, m.seed);
  bin::put_u64(out, m.parameter_count());
  m.visit([&](const Parameter& p) {
    for (double v : p.value.data) bin::put_f32(out, v);
  });
  if (!out) throw ValidationError("checkpoint: write to '" + path.string() + "' failed");
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("checkpoint: cannot open '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw ValidationError("checkpoint: '" + path.string() + "' is not a checkpoint file");
  if (const auto v = bin::get_u32(in); v != kCheckpointVersion)
    throw ValidationError("checkpoint: unsupported version " + std::to_string(v));
  const std::uint64_t len = bin::get_u64(in);
  if (len > (1u << 24)) throw ValidationError("checkpoint: implausible spec length");
  std::string spec(len, '\0');
  in.read(spec.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError("checkpoint: truncated header");
  json doc;
  try {
    doc = json::parse(spec);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("checkpoint: bad spec echo: ") + e.what());
  }
  const std::uint64_t seed = bin::get_u64(in);
  ModelState m = build_model(model_spec_from_json(doc), seed);
  const std::uint64_t n = bin::get_u64(in);
  if (n != m.parameter_count())
    throw ValidationError("checkpoint: stores " + std::to_string(n) + " values but the spec needs " +
                          std::to_string(m.parameter_count()));
  m.visit([&](Parameter& p) {
    for (double& v : p.value.data) v = bin::get_f32(in);
  });
  if (!in) throw ValidationError("checkpoint: truncated payload");
  if (in.peek() != std::char_traits<char>::eof()) throw ValidationError("checkpoint: trailing bytes");
  return m;
}

}  // namespace mfuse
