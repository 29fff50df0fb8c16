#include "osl/csv_data.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "osl/error.hpp"

namespace osl {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '"') {
      if (quoted && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else {
        quoted = !quoted;
      }
    } else if (c == ',' && !quoted) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

}  // namespace

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::vector<Sample> parse_csv_samples(const std::string& text, const ColumnMap& map) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      header = split_row(line);
      break;
    }
  }
  if (header.empty()) throw ConfigError("csv: missing header row");
  std::unordered_map<std::string, int> col;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (!col.emplace(header[i], static_cast<int>(i)).second) {
      throw ConfigError("csv line " + std::to_string(line_no) + ": duplicate column '" + header[i] + "'");
    }
  }
  auto index_of = [&](const std::string& name) {
    const auto it = col.find(name);
    if (it == col.end()) throw ConfigError("csv: unknown column '" + name + "'");
    return it->second;
  };
  auto indices = [&](const std::vector<std::string>& names) {
    std::vector<int> out;
    for (const auto& n : names) out.push_back(index_of(n));
    return out;
  };
  if (map.y.empty()) throw ConfigError("csv: no outcome column mapped (y)");
  const int iy = index_of(map.y);
  const auto it = indices(map.t), ix = indices(map.x), iw = indices(map.w), iu = indices(map.u), iv = indices(map.v);

  std::vector<Sample> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_row(line);
    if (cells.size() != header.size()) {
      throw ConfigError("csv line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                        " fields, found " + std::to_string(cells.size()));
    }
    auto cell = [&](int c) {
      const std::string& s = cells[static_cast<std::size_t>(c)];
      char* end = nullptr;
      errno = 0;
      const double v = std::strtod(s.c_str(), &end);
      if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v)) {
        throw ConfigError("csv line " + std::to_string(line_no) + ": column '" + header[static_cast<std::size_t>(c)] +
                          "' is not a finite number: '" + s + "'");
      }
      return v;
    };
    auto gather = [&](const std::vector<int>& cols) {
      Vec v(static_cast<Eigen::Index>(cols.size()));
      for (std::size_t k = 0; k < cols.size(); ++k) v[static_cast<Eigen::Index>(k)] = cell(cols[k]);
      return v;
    };
    Sample s;
    s.id = static_cast<std::int64_t>(out.size());
    s.y = cell(iy);
    s.t = gather(it);
    const Vec x = gather(ix), w = gather(iw);
    s.w.resize(x.size() + w.size());
    s.w << x, w;
    s.x_slice = Slice{0, x.size()};
    s.u = gather(iu);
    s.v = gather(iv);
    try {
      validate_sample(s);
    } catch (const Error& e) {
      throw ConfigError("csv line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ConfigError("csv: no data rows");
  return out;
}

std::vector<Sample> read_csv_samples(const std::string& path, const ColumnMap& map) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_csv_samples(ss.str(), map);
}

}  // namespace osl
