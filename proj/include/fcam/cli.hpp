#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace fcam::cli {

enum class ExitCode : int {
  ok = 0,
  usage = 1,
  config = 2,
  dataset = 3,
  checkpoint = 4,
  runtime = 5,
};

std::string to_string(ExitCode c);

class CliError : public std::runtime_error {
 public:
  CliError(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const { return code_; }

 private:
  ExitCode code_;
};

/// The full default document; its key set is the schema.
nlohmann::json default_run_config();

/// Overlays `overlay` onto `base`. Keys absent from `base` are rejected
/// (CliError config), as are type changes other than between numbers.
nlohmann::json merge_config(const nlohmann::json& base, const nlohmann::json& overlay);

/// Applies "dotted.key=value"; the value is parsed as JSON when it parses,
/// otherwise taken as a string.
nlohmann::json apply_override(nlohmann::json config, const std::string& assignment);

/// Checks every section (ranges, enums); throws CliError config.
void validate_run_config(const nlohmann::json& config);

/// Entry point. args excludes the program name. Failures print one JSON
/// object {"error": {...}} to err and return the matching exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fcam::cli
