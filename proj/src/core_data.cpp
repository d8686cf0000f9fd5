#include "spce/core_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace spce {

ParseError::ParseError(std::size_t r, const std::string& w)
    : Error("parse", "row " + std::to_string(r) + ": " + w), row(r) {}

std::string to_string(Stratum u) {
  switch (u) {
    case Stratum::s00: return "00";
    case Stratum::s01: return "01";
    case Stratum::s10: return "10";
    case Stratum::s11: return "11";
  }
  return "??";
}

Stratum parse_stratum(std::string_view s) {
  if (s.size() == 3 && (s[0] == 'S' || s[0] == 's')) s.remove_prefix(1);
  if (s == "00") return Stratum::s00;
  if (s == "01") return Stratum::s01;
  if (s == "10") return Stratum::s10;
  if (s == "11") return Stratum::s11;
  throw InvalidArgument("unknown stratum label '" + std::string(s) + "'");
}

std::string to_string(Monotonicity m) {
  switch (m) {
    case Monotonicity::none: return "none";
    case Monotonicity::treated_geq_control: return "d1>=d0";
    case Monotonicity::control_geq_treated: return "d0>=d1";
  }
  return "?";
}

Monotonicity parse_monotonicity(std::string_view s) {
  if (s == "none" || s == "off" || s == "false") return Monotonicity::none;
  if (s == "d1>=d0" || s == "on" || s == "true" || s == "treated") return Monotonicity::treated_geq_control;
  if (s == "d0>=d1" || s == "control") return Monotonicity::control_geq_treated;
  throw InvalidArgument("unknown monotonicity '" + std::string(s) +
                        "' (expected none, d1>=d0 or d0>=d1)");
}

void AssumptionConfig::validate() const {
  if (!std::isfinite(zeta) || zeta < 0.0 || zeta >= 1.0)
    throw InvalidArgument("zeta must lie in [0, 1)");
  if (!std::isfinite(xi0) || !std::isfinite(xi1)) throw InvalidArgument("xi must be finite");
  if (zeta > 0.0 && (xi0 != 0.0 || xi1 != 0.0))
    throw InvalidArgument("zeta and xi cannot both depart from their benchmark values");
}

std::vector<Stratum> admissible_strata(Monotonicity m) {
  std::vector<Stratum> out;
  for (Stratum u : kAllStrata) {
    if (m == Monotonicity::treated_geq_control && u == Stratum::s10) continue;
    if (m == Monotonicity::control_geq_treated && u == Stratum::s01) continue;
    out.push_back(u);
  }
  return out;
}

std::vector<Stratum> compatible_strata(Monotonicity m, int arm, int ice) {
  std::vector<Stratum> out;
  for (Stratum u : admissible_strata(m))
    if (ice_under(u, arm) == ice) out.push_back(u);
  return out;
}

TimeGrid::TimeGrid(std::vector<double> points) : points_(std::move(points)) {
  if (points_.empty()) throw InvalidArgument("time grid is empty");
  for (std::size_t i = 0; i < points_.size(); ++i) {
    if (!std::isfinite(points_[i]) || points_[i] < 0.0)
      throw InvalidArgument("time grid points must be finite and nonnegative");
    if (i > 0 && points_[i] <= points_[i - 1])
      throw InvalidArgument("time grid must be strictly increasing");
  }
  if (points_.back() <= 0.0) throw InvalidArgument("time grid t_max must be positive");
}

TimeGrid TimeGrid::equispaced(double t_max, std::size_t m) {
  if (m == 0) throw InvalidArgument("time grid needs at least one point");
  if (!(t_max > 0.0)) throw InvalidArgument("t_max must be positive");
  if (m == 1) return TimeGrid({t_max});
  std::vector<double> pts(m);
  for (std::size_t i = 0; i < m; ++i)
    pts[i] = t_max * static_cast<double>(i) / static_cast<double>(m - 1);
  pts.back() = t_max;
  return TimeGrid(std::move(pts));
}

Dataset::Dataset(std::vector<TrialRecord> records, std::vector<std::string> names)
    : records_(std::move(records)), names_(std::move(names)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if ((r.arm != 0 && r.arm != 1) || (r.ice != 0 && r.ice != 1) || (r.event != 0 && r.event != 1))
      throw DataError("record " + std::to_string(i) + ": arm, ice and event must be 0 or 1");
    if (!std::isfinite(r.time) || r.time < 0.0)
      throw DataError("record " + std::to_string(i) + ": time must be finite and nonnegative");
    if (r.covariates.size() != names_.size())
      throw DataError("record " + std::to_string(i) + ": covariate dimension " +
                      std::to_string(r.covariates.size()) + " != " + std::to_string(names_.size()));
    for (double v : r.covariates)
      if (!std::isfinite(v)) throw DataError("record " + std::to_string(i) + ": non-finite covariate");
  }
}

Eigen::MatrixXd Dataset::covariates() const {
  Eigen::MatrixXd x(size(), num_covariates());
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t j = 0; j < num_covariates(); ++j) x(i, j) = records_[i].covariates[j];
  return x;
}

Eigen::MatrixXd Dataset::covariates(std::span<const std::size_t> columns) const {
  Eigen::MatrixXd x(size(), columns.size());
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t j = 0; j < columns.size(); ++j) x(i, j) = records_[i].covariates.at(columns[j]);
  return x;
}

std::vector<std::size_t> Dataset::column_indices(const std::vector<std::string>& wanted) const {
  std::vector<std::size_t> out;
  for (const auto& w : wanted) {
    auto it = std::find(names_.begin(), names_.end(), w);
    if (it == names_.end()) throw SchemaError("unknown covariate '" + w + "'");
    out.push_back(static_cast<std::size_t>(it - names_.begin()));
  }
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.names_ = names_;
  out.records_.reserve(rows.size());
  for (std::size_t r : rows) out.records_.push_back(records_.at(r));
  return out;
}

Dataset Dataset::with_flipped_arm() const {
  Dataset out = *this;
  for (auto& r : out.records_) r.arm = 1 - r.arm;
  return out;
}

std::vector<double> Dataset::times() const {
  std::vector<double> t;
  t.reserve(size());
  for (const auto& r : records_) t.push_back(r.time);
  return t;
}

CellCounts cell_counts(const Dataset& d) {
  CellCounts c;
  for (const auto& r : d.records()) ++c.n[r.arm][r.ice];
  return c;
}

TimeGrid default_grid(const Dataset& d, std::size_t m) {
  if (d.empty()) throw DataError("cannot build a time grid from an empty dataset");
  auto t = d.times();
  std::sort(t.begin(), t.end());
  // type-7 quantile
  double h = 0.99 * static_cast<double>(t.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(h));
  std::size_t hi = std::min(lo + 1, t.size() - 1);
  double q = t[lo] + (h - static_cast<double>(lo)) * (t[hi] - t[lo]);
  return TimeGrid::equispaced(q, m);
}

Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows(), x.cols() + 1);
  out.col(0).setOnes();
  out.rightCols(x.cols()) = x;
  return out;
}

std::vector<int> dichotomize_ice(std::span<const std::optional<double>> time_off, double cutoff,
                                 MissingPolicy) {
  if (!(cutoff > 0.0)) throw InvalidArgument("ICE cutoff must be positive");
  std::vector<int> d(time_off.size());
  for (std::size_t i = 0; i < time_off.size(); ++i) {
    if (!time_off[i]) {
      d[i] = 1;
      continue;
    }
    double v = *time_off[i];
    if (!std::isfinite(v) || v < 0.0)
      throw ParseError(i + 1, "time off treatment must be a nonnegative number");
    d[i] = v < cutoff ? 1 : 0;
  }
  return d;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::optional<double> parse_number(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

int parse_binary(std::string_view s, std::size_t row, const std::string& col) {
  auto v = parse_number(s);
  if (!v || (*v != 0.0 && *v != 1.0))
    throw ParseError(row, "column '" + col + "' must be 0 or 1, got '" + std::string(trim(s)) + "'");
  return static_cast<int>(*v);
}

}  // namespace

Dataset load_csv(const std::string& path, const ColumnMap& map) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("'" + path + "' has no header row");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);
  auto header = split_csv_line(line);
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t j = 0; j < header.size(); ++j) pos[std::string(trim(header[j]))] = j;

  auto need = [&](const std::string& name) {
    auto it = pos.find(name);
    if (it == pos.end()) throw SchemaError("missing column '" + name + "' in '" + path + "'");
    return it->second;
  };
  std::size_t c_arm = need(map.arm), c_time = need(map.time), c_event = need(map.event);
  std::optional<std::size_t> c_ice, c_off;
  if (map.time_off) c_off = need(*map.time_off);
  else c_ice = need(map.ice);

  std::vector<std::string> cov_names = map.covariates;
  if (cov_names.empty()) {
    for (const auto& h : header) {
      std::string name(trim(h));
      if (name == map.arm || name == map.time || name == map.event || name == map.ice) continue;
      if (map.time_off && name == *map.time_off) continue;
      if (name.rfind("latent_", 0) == 0) continue;
      cov_names.push_back(name);
    }
  }
  std::vector<std::size_t> c_cov;
  for (const auto& n : cov_names) c_cov.push_back(need(n));

  std::vector<TrialRecord> records;
  std::vector<std::optional<double>> time_off;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw ParseError(row, "expected " + std::to_string(header.size()) + " fields, got " +
                                std::to_string(f.size()));
    TrialRecord r;
    r.arm = parse_binary(f[c_arm], row, map.arm);
    r.event = parse_binary(f[c_event], row, map.event);
    if (c_ice) r.ice = parse_binary(f[*c_ice], row, map.ice);
    auto t = parse_number(f[c_time]);
    if (!t || !std::isfinite(*t)) throw ParseError(row, "column '" + map.time + "' is not a number");
    if (*t < 0.0) throw ParseError(row, "column '" + map.time + "' is negative");
    r.time = *t;
    if (c_off) {
      auto v = parse_number(f[*c_off]);
      if (!v && !trim(f[*c_off]).empty() && trim(f[*c_off]) != "NA")
        throw ParseError(row, "column '" + *map.time_off + "' is not a number");
      if (v && *v < 0.0) throw ParseError(row, "column '" + *map.time_off + "' is negative");
      time_off.push_back(v);
    }
    for (std::size_t j = 0; j < c_cov.size(); ++j) {
      auto v = parse_number(f[c_cov[j]]);
      if (!v || !std::isfinite(*v))
        throw ParseError(row, "covariate '" + cov_names[j] + "' is missing or not a number");
      r.covariates.push_back(*v);
    }
    records.push_back(std::move(r));
  }
  if (c_off) {
    auto d = dichotomize_ice(time_off, map.ice_cutoff);
    for (std::size_t i = 0; i < records.size(); ++i) records[i].ice = d[i];
  }
  return Dataset(std::move(records), std::move(cov_names));
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void write_csv(const Dataset& d, const std::string& path, const std::vector<ExtraColumn>& extra) {
  for (const auto& e : extra)
    if (e.values.size() != d.size()) throw InvalidArgument("extra column '" + e.name + "' has wrong length");
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot write '" + path + "'");
  out << "arm,ice,time,event";
  for (const auto& n : d.covariate_names()) out << ',' << n;
  for (const auto& e : extra) out << ',' << e.name;
  out << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& r = d[i];
    out << r.arm << ',' << r.ice << ',' << format_double(r.time) << ',' << r.event;
    for (double v : r.covariates) out << ',' << format_double(v);
    for (const auto& e : extra) out << ',' << format_double(e.values[i]);
    out << '\n';
  }
  if (!out) throw Error("io", "failed writing '" + path + "'");
}

}  // namespace spce
