#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace fsdial {

// Writes content to a sibling temp file and renames it into place, so an
// interrupted run never leaves a truncated file under the final name.
void atomic_write_file(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

}  // namespace fsdial
