#pragma once

#include <json.hpp>

#include <map>
#include <string>
#include <vector>

#include "idol/image.hpp"
#include "idol/params.hpp"
#include "idol/tensor.hpp"

namespace idol {

// Checkpoint wire format (all integers little-endian):
//   bytes  "IDOLCKP1"
//   u32    format version (currently 1)
//   u64    manifest byte length, then that many bytes of UTF-8 JSON
//   u32    tensor count
//   per tensor, sorted by name:
//     u32 name length + bytes
//     u32 rank, then i32 per dimension
//     u64 payload byte length, then 32-bit float payload
//     u32 CRC32 of the payload bytes
// The encoding is canonical, so saving the same state twice produces
// byte-identical files.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ParameterStore<float>& params,
                     const nlohmann::json& manifest);

struct LoadedCheckpoint {
  nlohmann::json manifest;
  std::map<std::string, TensorF> tensors;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies loaded tensors into the store. Store names missing from the file are
// freshly initialized from init_seed (their init rules give gated output
// projections exact zeros again); file names the store lacks are reported.
struct ResumeReport {
  std::vector<std::string> restored;
  std::vector<std::string> fresh;
  std::vector<std::string> unused;
};
ResumeReport restore_params(ParameterStore<float>& store,
                            const std::map<std::string, TensorF>& loaded,
                            uint64_t init_seed);

}  // namespace idol
