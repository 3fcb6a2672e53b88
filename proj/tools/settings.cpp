#include "settings.hpp"

#include <algorithm>
#include <fstream>

#include "deltapress/error.hpp"

namespace deltapress::cli {

using json = nlohmann::json;

Settings::Entry& Settings::add(const std::string& name, Kind kind, json def) {
  auto entry = std::make_unique<Entry>();
  entry->kind = kind;
  entry->def = std::move(def);
  Entry& e = *entry;
  entries_[name] = std::move(entry);
  return e;
}

void Settings::number(const std::string& name, json def, const std::string& help) {
  auto& e = add(name, Kind::kNumber, std::move(def));
  e.option = app_->add_option("--" + name, e.text, help);
}

void Settings::integer(const std::string& name, json def, const std::string& help) {
  auto& e = add(name, Kind::kInteger, std::move(def));
  e.option = app_->add_option("--" + name, e.text, help);
}

void Settings::string(const std::string& name, json def, const std::string& help) {
  auto& e = add(name, Kind::kString, std::move(def));
  e.option = app_->add_option("--" + name, e.text, help);
}

void Settings::flag(const std::string& name, const std::string& help) {
  auto& e = add(name, Kind::kBool, false);
  e.option = app_->add_flag("--" + name, e.set, help);
}

void Settings::list(const std::string& name, const std::string& help) {
  auto& e = add(name, Kind::kList, json::array());
  e.option = app_->add_option("--" + name, e.items, help);
}

json Settings::convert(const std::string& name, Kind kind, const Entry& e) {
  try {
    switch (kind) {
      case Kind::kNumber: {
        std::size_t used = 0;
        const double v = std::stod(e.text, &used);
        if (used != e.text.size()) break;
        return v;
      }
      case Kind::kInteger: {
        std::size_t used = 0;
        const long long v = std::stoll(e.text, &used);
        if (used != e.text.size()) break;
        return v;
      }
      case Kind::kString:
        return e.text;
      case Kind::kBool:
        return e.set;
      case Kind::kList:
        return e.items;
    }
  } catch (const std::logic_error&) {
  }
  throw ConfigError("--" + name + ": cannot parse '" + e.text + "'");
}

json Settings::resolve(const json& config) const {
  json out = json::object();
  for (const auto& [name, e] : entries_) out[name] = e->def;

  for (const auto& [raw_key, value] : config.items()) {
    std::string key = raw_key;
    std::replace(key.begin(), key.end(), '_', '-');
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("config file: unknown key '" + raw_key + "'");
    const Kind kind = it->second->kind;
    const bool ok = value.is_null() || (kind == Kind::kNumber && value.is_number()) ||
                    (kind == Kind::kInteger && value.is_number_integer()) ||
                    (kind == Kind::kString && value.is_string()) ||
                    (kind == Kind::kBool && value.is_boolean()) ||
                    (kind == Kind::kList && value.is_array());
    if (!ok) throw ConfigError("config file: key '" + raw_key + "' has the wrong type");
    out[key] = value;
  }

  for (const auto& [name, e] : entries_) {
    if (e->option->count() > 0) out[name] = convert(name, e->kind, *e);
  }
  return out;
}

json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file '" + path + "' must hold a JSON object");
  return j;
}

}  // namespace deltapress::cli
