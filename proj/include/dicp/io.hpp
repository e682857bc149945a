#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace dicp {

/// Writes `text` to a sibling temp file and renames it over `path`, creating
/// parent directories as needed. Throws IoError.
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

std::string read_text(const std::filesystem::path& path);

}  // namespace dicp
