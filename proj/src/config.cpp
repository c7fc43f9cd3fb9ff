#include "mammovl/config.hpp"

#include "mammovl/errors.hpp"

#include <fstream>

namespace mammovl {

namespace {

bool compatible(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) return true;
  if (a.is_null() || b.is_null()) return true;
  return a.type() == b.type();
}

}  // namespace

nlohmann::json strict_merge(const nlohmann::json& base, const nlohmann::json& overrides, const std::string& path) {
  if (!overrides.is_object()) throw ConfigError("config " + (path.empty() ? "root" : "'" + path + "'") + " must be an object");
  nlohmann::json out = base;
  for (const auto& [key, value] : overrides.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + full + "'");
    const auto& current = base.at(key);
    if (current.is_object() && !current.empty()) {
      out[key] = strict_merge(current, value, full);
    } else {
      if (!compatible(current, value))
        throw ConfigError("config key '" + full + "' expects " + std::string(current.type_name()) + ", got " +
                          value.type_name());
      out[key] = value;
    }
  }
  return out;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace mammovl
