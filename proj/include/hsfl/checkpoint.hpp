#pragma once

#include <string>
#include <vector>

#include "hsfl/client.hpp"
#include "hsfl/server.hpp"

namespace hsfl {

// Checkpoint layout (all little-endian):
//   magic "HSFL", version u8,
//   entity_count u32,
//   per entity: id u32 (clients 0..N-1, the server 0xFFFFFFFF),
//               block_count u32,
//               per block: depth u32 (0 = head), in u32, out u32,
//                          weights f32[in*out] row-major, bias f32[out].
// Heads are stored last within an entity.
constexpr uint32_t kServerEntityId = 0xFFFFFFFFu;
constexpr uint8_t kCheckpointVersion = 1;

struct CheckpointEntity {
  uint32_t id = 0;
  std::vector<ParamBlock> blocks;  // prefix/trunk blocks, then the head (depth 0)
};

void write_checkpoint(const std::string& path, const std::vector<ClientState>& clients,
                      const ServerState& server);

// Throws Error (naming the path and defect) on bad magic, bad version, or
// truncation.
std::vector<CheckpointEntity> read_checkpoint(const std::string& path);

// Human-readable listing: one line per entity with depths and param counts.
std::string describe_checkpoint(const std::vector<CheckpointEntity>& entities);

}  // namespace hsfl
