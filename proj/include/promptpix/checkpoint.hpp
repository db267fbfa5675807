#pragma once

// Checkpoint container. Little-endian throughout:
//
//   magic    8 bytes  "PPXCKPT1"
//   u32      metadata length, then that many bytes of UTF-8 (config JSON)
//   u64      tensor count
//   per tensor, in name order:
//     u32    name length, name bytes
//     u8     tag (0 = frozen, 1 = tunable)
//     u32    rank, then rank x u64 extents
//     f64    row-major data

#include "promptpix/backbone.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace promptpix {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The stored tensors do not fit the model they are loaded into.
class IncompatibleCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct Checkpoint {
  std::string metadata;
  std::map<std::string, Parameter> tensors;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Stores the run config as metadata next to every parameter.
void save_model(const ModelParams& model, const RunConfig& cfg, const std::filesystem::path& path);
// Rebuilds the model from the embedded config (or `override_cfg` when given)
// and copies the stored values in; shape or name disagreements raise
// IncompatibleCheckpointError.
ModelParams load_model(const std::filesystem::path& path, RunConfig* cfg_out = nullptr, const RunConfig* override_cfg = nullptr);

}  // namespace promptpix
