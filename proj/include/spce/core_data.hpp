#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace spce {

// Error taxonomy. `kind()` is the machine-readable tag surfaced by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

struct SchemaError : Error {
  explicit SchemaError(const std::string& w) : Error("schema", w) {}
};
struct ParseError : Error {
  ParseError(std::size_t row, const std::string& w);
  std::size_t row;
};
struct InvalidArgument : Error {
  explicit InvalidArgument(const std::string& w) : Error("invalid_argument", w) {}
};
struct ModelError : Error {
  using Error::Error;
};
struct ConvergenceError : ModelError {
  explicit ConvergenceError(const std::string& w) : ModelError("convergence", w) {}
};
struct SeparationError : ModelError {
  explicit SeparationError(const std::string& w) : ModelError("separation", w) {}
};
struct RankError : ModelError {
  explicit RankError(const std::string& w) : ModelError("rank_deficient", w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error("data", w) {}
};

// U = (D(0), D(1)).
enum class Stratum : std::uint8_t { s00 = 0, s01 = 1, s10 = 2, s11 = 3 };

inline constexpr std::array<Stratum, 4> kAllStrata = {Stratum::s00, Stratum::s01,
                                                      Stratum::s10, Stratum::s11};

constexpr int index(Stratum u) { return static_cast<int>(u); }
constexpr int ice_under(Stratum u, int arm) {
  return arm == 0 ? (index(u) >> 1) & 1 : index(u) & 1;
}
constexpr Stratum make_stratum(int d0, int d1) {
  return static_cast<Stratum>((d0 << 1) | d1);
}
// 01 <-> 10, used when the arm indicator is flipped.
constexpr Stratum swap_potential(Stratum u) {
  return make_stratum(ice_under(u, 1), ice_under(u, 0));
}
std::string to_string(Stratum u);
Stratum parse_stratum(std::string_view s);

enum class Monotonicity {
  none,
  treated_geq_control,  // D(1) >= D(0): stratum 10 ruled out
  control_geq_treated,  // D(0) >= D(1): stratum 01 ruled out
};
std::string to_string(Monotonicity m);
Monotonicity parse_monotonicity(std::string_view s);

struct AssumptionConfig {
  Monotonicity monotonicity = Monotonicity::treated_geq_control;
  bool exclusion_restriction = false;
  double zeta = 0.0;
  double xi0 = 0.0;
  double xi1 = 0.0;

  bool monotone() const { return monotonicity != Monotonicity::none; }
  void validate() const;
};

std::vector<Stratum> admissible_strata(Monotonicity m);
// Strata u with D_u(arm) == ice that are admissible under m.
std::vector<Stratum> compatible_strata(Monotonicity m, int arm, int ice);

struct TrialRecord {
  int arm = 0;
  int ice = 0;
  double time = 0.0;
  int event = 0;
  std::vector<double> covariates;
};

class TimeGrid {
 public:
  explicit TimeGrid(std::vector<double> points);
  // m equispaced points on [0, t_max]; m == 1 gives {t_max}.
  static TimeGrid equispaced(double t_max, std::size_t m);

  std::size_t size() const { return points_.size(); }
  double t_max() const { return points_.back(); }
  double operator[](std::size_t i) const { return points_[i]; }
  const std::vector<double>& points() const { return points_; }

 private:
  std::vector<double> points_;
};

struct CellCounts {
  // n[z][d]
  std::array<std::array<std::size_t, 2>, 2> n{};
  std::size_t total() const { return n[0][0] + n[0][1] + n[1][0] + n[1][1]; }
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<TrialRecord> records, std::vector<std::string> covariate_names);

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t num_covariates() const { return names_.size(); }
  const std::vector<TrialRecord>& records() const { return records_; }
  const TrialRecord& operator[](std::size_t i) const { return records_[i]; }
  const std::vector<std::string>& covariate_names() const { return names_; }

  // n x p covariate matrix, optionally restricted to the named columns.
  Eigen::MatrixXd covariates() const;
  Eigen::MatrixXd covariates(std::span<const std::size_t> columns) const;
  std::vector<std::size_t> column_indices(const std::vector<std::string>& names) const;

  Dataset subset(std::span<const std::size_t> rows) const;
  // Same records with Z -> 1 - Z.
  Dataset with_flipped_arm() const;
  // Times in records with event == 1 sorted ascending.
  std::vector<double> times() const;

 private:
  std::vector<TrialRecord> records_;
  std::vector<std::string> names_;
};

CellCounts cell_counts(const Dataset& d);

// Default analysis grid: m equispaced points on [0, q_0.99 of observed times].
TimeGrid default_grid(const Dataset& d, std::size_t m = 100);

// Prepends an intercept column.
Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& x);

enum class MissingPolicy { treat_as_event };

std::vector<int> dichotomize_ice(std::span<const std::optional<double>> time_off, double cutoff,
                                 MissingPolicy policy = MissingPolicy::treat_as_event);

struct ColumnMap {
  std::string arm = "arm";
  std::string ice = "ice";
  std::string time = "time";
  std::string event = "event";
  std::vector<std::string> covariates;  // empty: every unmapped column not prefixed "latent_"
  // When set, D is derived from this column by dichotomize_ice with ice_cutoff
  // instead of read from `ice`. Empty cells count as missing.
  std::optional<std::string> time_off;
  double ice_cutoff = 90.0;
};

Dataset load_csv(const std::string& path, const ColumnMap& map = {});

// Extra per-record columns written after the covariates (e.g. simulator latents).
struct ExtraColumn {
  std::string name;
  std::vector<double> values;
};
void write_csv(const Dataset& d, const std::string& path, const std::vector<ExtraColumn>& extra = {});

// Shortest round-trip decimal representation.
std::string format_double(double v);

}  // namespace spce
