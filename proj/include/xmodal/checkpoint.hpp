#pragma once

// Checkpoint container, little-endian binary:
//
//   "XMCK"  u32 version (1)  u32 section count
//   section: u32 kind  str name  u32 entry count
//     kind 1 (parameter group) and 2 (optimizer state):
//       entry: str leaf name  u64 rows  u64 cols  rows*cols float64
//     kind 3 (metadata):
//       entry: str key  str value
//   str = u32 byte length followed by the bytes
//
// Parameter groups are named E1, E2, D, P, C. Optimizer sections are named
// "<group>.<slot>" (for Adam: "E1.m", "E1.v"). Values round-trip bit-exactly.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "xmodal/model.hpp"

namespace xmodal {

struct Checkpoint {
    ParameterStore params;
    std::map<std::string, std::vector<NamedLeaf>> optimizer;
    std::map<std::string, std::string> meta;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpointed values into `target`, which must hold exactly the same
/// groups, leaf names and shapes; throws CheckpointError otherwise.
void restore_params(const ParameterStore& saved, ParameterStore& target);

}  // namespace xmodal
