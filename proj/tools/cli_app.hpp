#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace psm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kManifestFormatVersion = 1;

/// Runs one command line (without the program name). Never throws; returns
/// the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// FNV-1a 64 of a file's bytes, as 16 hex digits.
std::string file_checksum(const std::filesystem::path& path);

/// Checksums of every regular file under `dir` except manifest.json, keyed by
/// generic relative path.
std::map<std::string, std::string> tree_checksums(const std::filesystem::path& dir);

}  // namespace psm::cli
