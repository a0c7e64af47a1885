#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "trimkit/model.hpp"

namespace trimkit::inline TRIMKIT_NS {

inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'R', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Missing, unreadable or unwritable file.
struct FileError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or unreadable checkpoint; `field` names the offending part.
struct CheckpointError : std::runtime_error {
  CheckpointError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field(std::move(field)) {}
  std::string field;
};

// Layout: "MTRF" | u32 version | u64 header length | JSON header | f32 payload.
// The header holds the ModelConfig and a tensor directory (name, dtype, shape,
// offset relative to the payload start). Everything is little-endian.

/// JSON header text for `model` (offsets assigned in named_tensors() order).
std::string checkpoint_header(const Model& model);

/// Writes atomically via a temporary file and rename.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

/// Replaces `path` with `contents` via temp file + rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace trimkit
