#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "spce/weighting.hpp"

namespace spce {

inline constexpr const char* kToolkitVersion = "0.1.0";

// Hex SHA-256 of a byte string or a file.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

void write_text(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);

// Minimal plotting: per-stratum panels with curves and shaded bands.
struct SvgSeries {
  std::string label;
  std::vector<double> x, y;
  std::vector<double> lo, hi;  // optional band, same length as x
  bool step = false;
  bool dashed = false;
  std::string color = "#1f77b4";
};

struct SvgPanel {
  std::string title;
  std::string xlabel = "time";
  std::string ylabel;
  std::vector<SvgSeries> series;
  std::optional<std::pair<double, double>> ylim;
  bool zero_line = false;
};

std::string render_svg(const std::vector<SvgPanel>& panels, std::size_t columns = 2);
const std::vector<std::string>& palette();

nlohmann::json to_json(const MrEstimate& e);
nlohmann::json to_json(const std::vector<SmdRow>& rows);
nlohmann::json to_json(const std::vector<StratumProfile>& p, const std::vector<std::string>& names);
nlohmann::json to_json(const WeightingDiagnostics& d);

// Long format: arm, stratum, t, survival, lo, hi (tau rows use arm "tau").
void write_curves_csv(const MrEstimate& e, const std::string& path);
void write_smd_csv(const std::vector<SmdRow>& rows, const std::string& path);

// One panel per stratum with both arms (and bands when present), plus
// optional truth curves drawn dashed.
std::vector<SvgPanel> survival_panels(const MrEstimate& e, const std::optional<TrueSpce>& truth = std::nullopt);
std::vector<SvgPanel> spce_panels(const MrEstimate& e, const std::optional<TrueSpce>& truth = std::nullopt);

// Manifest of a run directory: command, configuration, seeds, digests of
// inputs and outputs, version, wall time.
struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;  // file names relative to the run directory
  double seconds = 0.0;
};

nlohmann::json manifest_json(const RunManifest& m, const std::string& out_dir);
void write_manifest(const RunManifest& m, const std::string& out_dir);
inline constexpr const char* kManifestName = "manifest.json";

}  // namespace spce
