#pragma once

// CSV ingestion with a column-to-role mapping.

#include <string>
#include <vector>

#include "osl/core.hpp"

namespace osl {

struct ColumnMap {
  std::string y;
  std::vector<std::string> t;  // one column (binary) or N columns (one-hot)
  std::vector<std::string> x;  // target covariates, stored first in w
  std::vector<std::string> w;  // extra nuisance covariates
  std::vector<std::string> u;
  std::vector<std::string> v;
};

// Comma-separated list, whitespace trimmed; empty string gives an empty list.
std::vector<std::string> split_list(const std::string& s);

// Header row required. Throws IoError (unreadable) or ConfigError (unknown
// column, non-numeric cell, ragged row) with the offending line number.
std::vector<Sample> read_csv_samples(const std::string& path, const ColumnMap& map);
std::vector<Sample> parse_csv_samples(const std::string& text, const ColumnMap& map);

}  // namespace osl
