#pragma once

// Checkpoint archive: magic, a JSON header holding the architecture config
// and a tensor directory, raw little-endian f32 blobs in directory order,
// and a trailing FNV-1a hash of everything before it. Saving and loading
// round-trips the parameter vector bit-exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "propl/model.hpp"
#include "propl/rng.hpp"

namespace propl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts need a swap pass");

inline constexpr char kCheckpointMagic[8] = {'P', 'R', 'O', 'P', 'L', 'C', 'K', '1'};

inline void save_checkpoint(const std::filesystem::path& path, const ArchConfig& arch,
                            const ParamStore<float>& params) {
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  for (const auto& e : params.entries()) {
    dir.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset},
                   {"count", e.count}});
  }
  nlohmann::ordered_json header = {{"format", "propl-checkpoint-1"},
                                   {"arch", arch_to_json(arch)},
                                   {"tensors", dir}};
  const std::string hbytes = header.dump();

  std::string payload;
  payload.reserve(8 + 8 + hbytes.size() + params.size() * sizeof(float));
  payload.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t hlen = hbytes.size();
  payload.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  payload.append(hbytes);
  payload.append(reinterpret_cast<const char*>(params.data()),
                 params.size() * sizeof(float));
  const std::uint64_t hash = fnv1a64(payload.data(), payload.size());

  // write to a sibling temp file first so a failed write never clobbers an
  // existing checkpoint
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(f.good(), "cannot open for write: " + tmp);
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    f.write(reinterpret_cast<const char*>(&hash), sizeof(hash));
    require(f.good(), "write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

struct Checkpoint {
  ArchConfig arch;
  std::vector<ParamEntry> entries;
  AVec<float> values;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), {});
  require(bytes.size() >= sizeof(kCheckpointMagic) + 16,
          "checkpoint truncated: " + path.string());
  require(std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) == 0,
          "not a checkpoint file: " + path.string());

  std::uint64_t stored_hash = 0;
  std::memcpy(&stored_hash, bytes.data() + bytes.size() - 8, 8);
  const std::uint64_t hash = fnv1a64(bytes.data(), bytes.size() - 8);
  require(hash == stored_hash, "checkpoint content hash mismatch: " + path.string());

  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, 8);
  require(16 + hlen <= bytes.size() - 8, "checkpoint header overruns file");
  const nlohmann::json header = nlohmann::json::parse(bytes.substr(16, hlen));

  Checkpoint ck;
  ck.arch = arch_from_json(header.at("arch"));
  std::size_t total = 0;
  for (const auto& jt : header.at("tensors")) {
    ParamEntry e;
    e.name = jt.at("name").get<std::string>();
    e.shape = jt.at("shape").get<std::vector<int>>();
    e.offset = jt.at("offset").get<std::size_t>();
    e.count = jt.at("count").get<std::size_t>();
    require(e.offset == total, "checkpoint tensor directory is not contiguous");
    total += e.count;
    ck.entries.push_back(std::move(e));
  }
  const std::size_t blob_bytes = bytes.size() - 8 - 16 - hlen;
  require(blob_bytes == total * sizeof(float),
          "checkpoint blob size does not match its tensor directory");
  ck.values.resize(total);
  std::memcpy(ck.values.data(), bytes.data() + 16 + hlen, blob_bytes);
  return ck;
}

// Rebuilds the model from a checkpoint, verifying that the stored tensor
// directory matches the architecture's parameter registry exactly.
inline Model<float> model_from_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  Model<float> m(ck.arch);
  const auto& reg = m.params.entries();
  require(reg.size() == ck.entries.size(), "checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < reg.size(); ++i) {
    require(reg[i].name == ck.entries[i].name && reg[i].shape == ck.entries[i].shape &&
                reg[i].offset == ck.entries[i].offset,
            "checkpoint tensor " + ck.entries[i].name +
                " does not match the model registry");
  }
  require(m.params.size() == ck.values.size(), "checkpoint parameter size mismatch");
  m.params.value = ck.values;
  return m;
}

}  // namespace propl
