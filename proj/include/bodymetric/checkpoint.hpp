#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bodymetric/errors.hpp"
#include "bodymetric/io.hpp"
#include "bodymetric/training.hpp"

namespace bodymetric {

// BMCK layout (little-endian):
//   "BMCK" | u32 version | u32 json_len | canonical JSON metadata
//   then per tensor, in ScorerParams::views() order: u32 rows | u32 cols | rows*cols f32
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.raw("BMCK");
  w.u32(kCheckpointVersion);
  const nlohmann::json meta = {
      {"config", train_config_to_json(ck.config)}, {"step", ck.step}, {"val_accuracy", ck.val_accuracy}};
  const std::string text = meta.dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text);
  auto params = ck.params;  // views() needs mutable access
  for (const auto& v : params.views()) {
    w.u32(static_cast<std::uint32_t>(v.rows));
    w.u32(static_cast<std::uint32_t>(v.cols));
    for (double x : v.values) w.f32(static_cast<float>(x));
  }
  return w.take();
}

inline Checkpoint parse_checkpoint(const std::vector<unsigned char>& bytes, const std::string& name) {
  ByteReader r(bytes, name);
  if (bytes.size() < 4 || r.raw(4, "magic") != "BMCK") r.fail("bad magic, expected \"BMCK\"", 0);
  const std::size_t version_offset = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version), version_offset);
  const std::uint32_t json_len = r.u32("metadata length");
  const std::size_t json_offset = r.offset();
  const std::string text = r.raw(json_len, "metadata");

  Checkpoint ck;
  try {
    const auto meta = nlohmann::json::parse(text);
    ck.config = train_config_from_json(meta.at("config"));
    ck.step = meta.at("step").get<std::size_t>();
    ck.val_accuracy = meta.at("val_accuracy").get<double>();
    ck.config.scorer.validate();
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("malformed metadata: ") + e.what(), json_offset);
  } catch (const DataError& e) {
    r.fail(std::string("invalid metadata: ") + e.what(), json_offset);
  }

  ck.params = ScorerParams::zeros(ck.config.scorer);
  for (const auto& v : ck.params.views()) {
    const std::size_t header_offset = r.offset();
    const std::uint32_t rows = r.u32("tensor rows");
    const std::uint32_t cols = r.u32("tensor cols");
    if (rows != v.rows || cols != v.cols) {
      r.fail("tensor shape " + std::to_string(rows) + "x" + std::to_string(cols) + " does not match expected " +
                 std::to_string(v.rows) + "x" + std::to_string(v.cols),
             header_offset);
    }
    for (double& x : v.values) x = static_cast<double>(r.f32("tensor values"));
  }
  if (!r.at_end()) r.fail("trailing bytes after last tensor", r.offset());
  ck.params.touch();
  if (!(ck.params.temperature > 0.0)) r.fail("temperature must be positive", bytes.size() - 4);
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file_bytes(path), path.string());
}

}  // namespace bodymetric
