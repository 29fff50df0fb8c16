#pragma once

// Command-line front end.
//
//   osl <orthocheck|construct|fit|sweep|dgp|selftest> [options]
//
// Exit codes: 0 success, 1 failed verdict, 2 configuration / input error.

#include <iosfwd>
#include <string>
#include <vector>

namespace osl {

struct ConfigEntry {
  std::string key;  // option name without dashes, e.g. "nuisance-learner"
  std::string value;
  int line = 0;
};

// INI-like text: "[section]" headers and "key = value" lines, '#' or ';'
// comments. Keys of section [run] map to plain options; keys of any other
// section S map to "S-key". Underscores become dashes.
std::vector<ConfigEntry> parse_config(const std::string& text);

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace osl
