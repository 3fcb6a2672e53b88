#pragma once

#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

namespace deltapress::cli {

// Flags registered per subcommand, resolved in the order
// command line > --config JSON file > built-in default.
class Settings {
 public:
  enum class Kind { kNumber, kInteger, kString, kBool, kList };

  explicit Settings(CLI::App* app) : app_(app) {}

  void number(const std::string& name, nlohmann::json def, const std::string& help);
  void integer(const std::string& name, nlohmann::json def, const std::string& help);
  void string(const std::string& name, nlohmann::json def, const std::string& help);
  void flag(const std::string& name, const std::string& help);
  void list(const std::string& name, const std::string& help);

  // Config keys may use '-' or '_'. Unknown keys are a ConfigError.
  nlohmann::json resolve(const nlohmann::json& config) const;

  CLI::App* app() const { return app_; }

 private:
  struct Entry {
    Kind kind;
    nlohmann::json def;
    CLI::Option* option = nullptr;
    std::string text;
    std::vector<std::string> items;
    bool set = false;
  };

  Entry& add(const std::string& name, Kind kind, nlohmann::json def);
  static nlohmann::json convert(const std::string& name, Kind kind, const Entry& e);

  CLI::App* app_;
  std::map<std::string, std::unique_ptr<Entry>> entries_;
};

// Reads a JSON object from `path`; ConfigError when unreadable or not an object.
nlohmann::json load_config(const std::string& path);

}  // namespace deltapress::cli
