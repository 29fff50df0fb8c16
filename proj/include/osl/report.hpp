#pragma once

// Byte-stable JSON and CSV output.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "osl/diffcheck.hpp"
#include "osl/experiments.hpp"

namespace osl {

using Json = nlohmann::ordered_json;

// 17 significant digits; non-finite values become null.
std::string format_double(double v);
// Insertion-ordered keys, two-space indent, trailing newline.
std::string dump_json(const Json& j);

// Writes to a temporary sibling and renames it over `path`. Throws IoError.
void atomic_write(const std::filesystem::path& path, const std::string& content);

inline constexpr const char* kSweepCsvHeader = "grid_value,rep,excess_risk,floor,seed";
std::string sweep_csv(const SweepReport& report);

Json to_json(const SweepReport& report, bool include_rows = false);
SweepReport sweep_from_json(const nlohmann::json& j);
Json to_json(const OrthoReport& report);
Json to_json(const OracleGap& gap);
Json to_json(const Diagnostics& d);

}  // namespace osl
