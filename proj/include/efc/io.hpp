#pragma once

// On-disk formats. A checkpoint directory holds checkpoint.json (architecture,
// dims, task ranges, file names) next to one EFMM dump per tensor; the
// prototype store is an index.json plus per-class mean/covariance dumps.

#include "efc/trainer.hpp"

#include <filesystem>
#include <string>

namespace efc {

void save_prototypes(const std::filesystem::path& dir, const PrototypeStore& store);
PrototypeStore load_prototypes(const std::filesystem::path& dir);

void save_checkpoint(const std::filesystem::path& dir, const TaskState& state);
/// Restores model, head, last EFM, prototypes and the completed-task count.
/// The RNG is reseeded by the caller; E-FIM importances are not persisted.
TaskState load_checkpoint(const std::filesystem::path& dir);

/// Writes `text` to `path`, creating parent directories.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace efc
