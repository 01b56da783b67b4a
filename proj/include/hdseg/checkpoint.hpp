#pragma once
// Versioned single-file archive of a network (config + every named
// parameter tensor) and, optionally, the MI head it was trained with.
//
// Layout (little-endian):
//   "HDSEGCKP" | u32 schema | u32 len | config JSON
//   u32 n | n x { u32 len | name | u32 rank | i32 dims[rank] | u64 count | f32[count] }
//   u32 m | m x { u32 len | name | u32 rank | i32 dims[rank] | u64 count | f64[count] }

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "hdseg/losses.hpp"
#include "hdseg/network.hpp"

namespace hdseg::net {

inline constexpr char kCheckpointMagic[8] = {'H', 'D', 'S', 'E', 'G', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointSchema = 1;

struct Checkpoint {
  std::unique_ptr<Network> network;
  std::optional<losses::MIHead> mi_head;
  /// Canonical JSON of the run configuration that produced it, if recorded.
  std::string run_config;
};

void save_checkpoint(const std::filesystem::path& path, const Network& network,
                     const losses::MIHead* mi_head = nullptr, const std::string& run_config = "");
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hdseg::net
