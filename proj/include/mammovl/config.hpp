#pragma once

#include <json.hpp>

#include <filesystem>
#include <string>

namespace mammovl {

/// Overlays `overrides` onto `base`. Keys missing from `base` are rejected
/// with ConfigError naming the full key path; objects merge recursively,
/// everything else replaces the base value when the JSON types agree.
nlohmann::json strict_merge(const nlohmann::json& base, const nlohmann::json& overrides,
                            const std::string& path = "");

/// Parses a JSON file; ConfigError when missing or malformed.
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace mammovl
