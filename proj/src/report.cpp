#include "osl/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "osl/error.hpp"

namespace osl {

std::string format_double(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

void dump_rec(const Json& j, int depth, std::string& out) {
  const std::string pad(static_cast<std::size_t>(2 * (depth + 1)), ' ');
  const std::string close(static_cast<std::size_t>(2 * depth), ' ');
  switch (j.type()) {
    case Json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ",\n";
        first = false;
        out += pad + Json(it.key()).dump() + ": ";
        dump_rec(it.value(), depth + 1, out);
      }
      out += "\n" + close + "}";
      return;
    }
    case Json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      out += "[\n";
      bool first = true;
      for (const auto& v : j) {
        if (!first) out += ",\n";
        first = false;
        out += pad;
        dump_rec(v, depth + 1, out);
      }
      out += "\n" + close + "]";
      return;
    }
    case Json::value_t::number_float:
      out += format_double(j.get<double>());
      return;
    default:
      out += j.dump();
  }
}

}  // namespace

std::string dump_json(const Json& j) {
  std::string out;
  dump_rec(j, 0, out);
  out += "\n";
  return out;
}

void atomic_write(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
    f << content;
    f.flush();
    if (!f) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write to '" + tmp.string() + "' failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move output into place at '" + path.string() + "'");
  }
}

std::string sweep_csv(const SweepReport& r) {
  std::string out = std::string(kSweepCsvHeader) + "\n";
  for (const auto& row : r.rows) {
    out += format_double(row.grid_value) + "," + std::to_string(row.rep) + "," + format_double(row.excess_risk) + "," +
           format_double(row.floor) + "," + std::to_string(row.seed) + "\n";
  }
  return out;
}

Json to_json(const SweepReport& r, bool include_rows) {
  Json j;
  j["kind"] = r.kind;
  j["loss"] = r.loss_id;
  j["dgp"] = r.dgp_id;
  j["learner"] = r.learner_id;
  j["n"] = r.n;
  j["reps"] = r.reps;
  j["seed"] = r.seed;
  j["floor"] = r.floor;
  Json pts = Json::array();
  for (const auto& p : r.points) {
    Json q;
    q["grid_value"] = p.grid_value;
    q["median"] = p.median;
    q["q10"] = p.q10;
    q["q25"] = p.q25;
    q["q75"] = p.q75;
    q["q90"] = p.q90;
    q["adjusted"] = p.adjusted;
    q["used"] = p.used;
    q["median_l2"] = p.median_l2;
    q["median_lambda"] = p.median_lambda;
    pts.push_back(std::move(q));
  }
  j["points"] = std::move(pts);
  j["has_slope"] = r.has_slope;
  j["slope"] = r.slope;
  j["slope_stderr"] = r.slope_stderr;
  j["verdict"] = r.verdict;
  if (r.has_expected) j["expected"] = Json::array({r.expected_lo, r.expected_hi});
  if (include_rows) {
    Json rows = Json::array();
    for (const auto& row : r.rows) rows.push_back(Json::array({row.grid_value, row.rep, row.excess_risk, row.floor, row.seed}));
    j["rows"] = std::move(rows);
  }
  return j;
}

namespace {

double num(const nlohmann::json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

}  // namespace

SweepReport sweep_from_json(const nlohmann::json& j) {
  SweepReport r;
  try {
    r.kind = j.at("kind").get<std::string>();
    r.loss_id = j.at("loss").get<std::string>();
    r.dgp_id = j.at("dgp").get<std::string>();
    r.learner_id = j.at("learner").get<std::string>();
    r.n = j.at("n").get<std::size_t>();
    r.reps = j.at("reps").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.floor = num(j.at("floor"));
    for (const auto& q : j.at("points")) {
      SweepPoint p;
      p.grid_value = num(q.at("grid_value"));
      p.median = num(q.at("median"));
      p.q10 = num(q.at("q10"));
      p.q25 = num(q.at("q25"));
      p.q75 = num(q.at("q75"));
      p.q90 = num(q.at("q90"));
      p.adjusted = num(q.at("adjusted"));
      p.used = q.at("used").get<bool>();
      p.median_l2 = num(q.at("median_l2"));
      p.median_lambda = num(q.at("median_lambda"));
      r.points.push_back(p);
    }
    r.has_slope = j.at("has_slope").get<bool>();
    r.slope = num(j.at("slope"));
    r.slope_stderr = num(j.at("slope_stderr"));
    r.verdict = j.at("verdict").get<std::string>();
    if (j.contains("expected")) {
      r.has_expected = true;
      r.expected_lo = num(j["expected"][0]);
      r.expected_hi = num(j["expected"][1]);
    }
    if (j.contains("rows")) {
      for (const auto& row : j["rows"]) {
        r.rows.push_back({num(row[0]), row[1].get<int>(), num(row[2]), num(row[3]), row[4].get<std::uint64_t>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed sweep report: ") + e.what());
  }
  return r;
}

Json to_json(const OrthoReport& r) {
  Json j;
  j["loss"] = r.loss_id;
  j["assumption"] = r.assumption;
  j["verdict"] = verdict_name(r.verdict);
  j["max_abs"] = r.max_abs;
  j["tolerance"] = r.tolerance;
  j["n_dirs"] = r.n_dirs;
  j["seed"] = r.seed;
  j["richardson_levels"] = r.richardson_levels;
  j["functional_scale"] = r.functional_scale;
  j["values"] = r.values;
  j["error_estimates"] = r.error_estimates;
  return j;
}

Json to_json(const OracleGap& g) {
  Json j;
  j["n"] = g.n;
  j["reps"] = g.reps;
  j["median_full"] = g.median_full;
  j["median_oracle"] = g.median_oracle;
  j["ratio"] = g.ratio;
  return j;
}

Json to_json(const Diagnostics& d) {
  Json j;
  j["iterations"] = d.iterations;
  j["converged"] = d.converged;
  j["objective"] = d.objective;
  j["kkt_residual"] = d.kkt_residual;
  if (d.selected_index) j["selected_index"] = *d.selected_index;
  if (!d.active_set.empty()) j["active_set"] = d.active_set;
  j["warnings"] = d.warnings;
  return j;
}

}  // namespace osl
