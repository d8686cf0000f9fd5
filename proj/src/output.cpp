#include "spce/output.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

namespace spce {

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("io", "SHA-256 digest failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return out.str();
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sha256_file(const std::string& path) { return sha256_hex(read_text(path)); }

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path);
  out << content;
  if (!out) throw Error("io", "write failed: " + path);
}

const std::vector<std::string>& palette() {
  static const std::vector<std::string> p = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                             "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  return p;
}

namespace {

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << v;
  return s.str();
}

std::vector<double> ticks(double lo, double hi, int target = 5) {
  double span = hi - lo;
  if (!(span > 0.0)) return {lo};
  double raw = span / target;
  double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0})
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  std::vector<double> out;
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * span; v += step) out.push_back(std::abs(v) < 1e-12 ? 0.0 : v);
  return out;
}

std::string tick_label(double v) {
  std::ostringstream s;
  s << std::setprecision(4) << v;
  return s.str();
}

}  // namespace

std::string render_svg(const std::vector<SvgPanel>& panels, std::size_t columns) {
  const double pw = 420, ph = 300, ml = 55, mr = 15, mt = 30, mb = 45;
  columns = std::max<std::size_t>(1, std::min(columns, panels.size()));
  const std::size_t rows = (panels.size() + columns - 1) / columns;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(pw * columns) << "\" height=\""
    << num(ph * std::max<std::size_t>(rows, 1)) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const auto& panel = panels[p];
    const double ox = pw * static_cast<double>(p % columns), oy = ph * static_cast<double>(p / columns);
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    bool first = true;
    for (const auto& s : panel.series)
      for (std::size_t k = 0; k < s.x.size(); ++k) {
        auto upd = [&](double y) {
          if (!std::isfinite(y)) return;
          if (first) {
            x0 = x1 = s.x[k];
            y0 = y1 = y;
            first = false;
          }
          x0 = std::min(x0, s.x[k]);
          x1 = std::max(x1, s.x[k]);
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
        };
        upd(s.y[k]);
        if (!s.lo.empty()) upd(s.lo[k]);
        if (!s.hi.empty()) upd(s.hi[k]);
      }
    if (panel.ylim) {
      y0 = panel.ylim->first;
      y1 = panel.ylim->second;
    }
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    const double left = ox + ml, right = ox + pw - mr, top = oy + mt, bottom = oy + ph - mb;
    auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * (right - left); };
    auto sy = [&](double y) { return bottom - (std::clamp(y, y0, y1) - y0) / (y1 - y0) * (bottom - top); };
    o << "<g>\n<text x=\"" << num(ox + pw / 2) << "\" y=\"" << num(oy + 18)
      << "\" text-anchor=\"middle\" font-size=\"13\">" << esc(panel.title) << "</text>\n";
    o << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(right - left) << "\" height=\""
      << num(bottom - top) << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (double t : ticks(x0, x1))
      o << "<line x1=\"" << num(sx(t)) << "\" y1=\"" << num(bottom) << "\" x2=\"" << num(sx(t)) << "\" y2=\""
        << num(bottom + 4) << "\" stroke=\"#444\"/><text x=\"" << num(sx(t)) << "\" y=\"" << num(bottom + 16)
        << "\" text-anchor=\"middle\">" << tick_label(t) << "</text>\n";
    for (double t : ticks(y0, y1))
      o << "<line x1=\"" << num(left - 4) << "\" y1=\"" << num(sy(t)) << "\" x2=\"" << num(left) << "\" y2=\""
        << num(sy(t)) << "\" stroke=\"#444\"/><text x=\"" << num(left - 6) << "\" y=\"" << num(sy(t) + 4)
        << "\" text-anchor=\"end\">" << tick_label(t) << "</text>\n";
    o << "<text x=\"" << num((left + right) / 2) << "\" y=\"" << num(bottom + 34) << "\" text-anchor=\"middle\">"
      << esc(panel.xlabel) << "</text>\n";
    o << "<text transform=\"translate(" << num(ox + 14) << "," << num((top + bottom) / 2)
      << ") rotate(-90)\" text-anchor=\"middle\">" << esc(panel.ylabel) << "</text>\n";
    if (panel.zero_line && y0 < 0 && y1 > 0)
      o << "<line x1=\"" << num(left) << "\" y1=\"" << num(sy(0)) << "\" x2=\"" << num(right) << "\" y2=\""
        << num(sy(0)) << "\" stroke=\"#999\" stroke-dasharray=\"2,2\"/>\n";
    for (const auto& s : panel.series) {
      if (s.x.empty()) continue;
      if (!s.lo.empty() && !s.hi.empty()) {
        o << "<polygon fill=\"" << s.color << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
        for (std::size_t k = 0; k < s.x.size(); ++k)
          if (std::isfinite(s.hi[k])) o << num(sx(s.x[k])) << "," << num(sy(s.hi[k])) << " ";
        for (std::size_t k = s.x.size(); k-- > 0;)
          if (std::isfinite(s.lo[k])) o << num(sx(s.x[k])) << "," << num(sy(s.lo[k])) << " ";
        o << "\"/>\n";
      }
      o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\""
        << (s.dashed ? " stroke-dasharray=\"5,3\"" : "") << " points=\"";
      for (std::size_t k = 0; k < s.x.size(); ++k) {
        if (!std::isfinite(s.y[k])) continue;
        if (s.step && k > 0 && std::isfinite(s.y[k - 1])) o << num(sx(s.x[k])) << "," << num(sy(s.y[k - 1])) << " ";
        o << num(sx(s.x[k])) << "," << num(sy(s.y[k])) << " ";
      }
      o << "\"/>\n";
    }
    double ly = top + 12;
    for (const auto& s : panel.series) {
      if (s.label.empty()) continue;
      o << "<line x1=\"" << num(right - 110) << "\" y1=\"" << num(ly - 4) << "\" x2=\"" << num(right - 92) << "\" y2=\""
        << num(ly - 4) << "\" stroke=\"" << s.color << "\" stroke-width=\"2\""
        << (s.dashed ? " stroke-dasharray=\"4,2\"" : "") << "/><text x=\"" << num(right - 88) << "\" y=\""
        << num(ly) << "\">" << esc(s.label) << "</text>\n";
      ly += 14;
    }
    o << "</g>\n";
  }
  o << "</svg>\n";
  return o.str();
}

nlohmann::json to_json(const WeightingDiagnostics& d) {
  return {{"propensity_truncated", d.propensity_truncated}, {"ice_truncated", d.ice_truncated},
          {"negative_scores", d.negative_scores},           {"tilt_clipped", d.tilt_clipped},
          {"tilt_evaluations", d.tilt_evaluations},         {"survival_clipped", d.survival_clipped},
          {"warnings", d.warnings}};
}

nlohmann::json to_json(const MrEstimate& e) {
  nlohmann::json j;
  j["monotonicity"] = to_string(e.monotonicity);
  j["zeta"] = e.point.zeta;
  j["xi0"] = e.point.xi0;
  j["xi1"] = e.point.xi1;
  j["grid"] = e.grid.points();
  j["p0"] = e.p0;
  j["p1"] = e.p1;
  nlohmann::json strata = nlohmann::json::object();
  for (Stratum u : kAllStrata) {
    const int iu = index(u);
    if (!e.present[iu]) continue;
    nlohmann::json s;
    s["proportion"] = e.proportions[iu];
    s["survival_control"] = e.survival[0][iu];
    s["survival_treated"] = e.survival[1][iu];
    s["spce"] = e.tau[iu];
    if (e.bands) {
      const auto& b = *e.bands;
      s["proportion_ci"] = {b.proportion_lo[iu], b.proportion_hi[iu]};
      s["survival_control_ci"] = {{"lo", b.survival_lo[0][iu]}, {"hi", b.survival_hi[0][iu]}};
      s["survival_treated_ci"] = {{"lo", b.survival_lo[1][iu]}, {"hi", b.survival_hi[1][iu]}};
      s["spce_ci"] = {{"lo", b.tau_lo[iu]}, {"hi", b.tau_hi[iu]}};
    }
    strata[to_string(u)] = s;
  }
  j["strata"] = strata;
  if (e.bands)
    j["bootstrap"] = {{"replicates", e.bands->replicates},
                      {"failures", e.bands->failures},
                      {"failure_reasons", e.bands->failure_reasons},
                      {"approximate", e.bands->approximate},
                      {"interval", "percentile 95%"}};
  j["diagnostics"] = to_json(e.diagnostics);
  return j;
}

nlohmann::json to_json(const std::vector<SmdRow>& rows) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : rows)
    a.push_back({{"covariate", r.covariate},
                 {"stratum", r.contrast},
                 {"unweighted", r.unweighted},
                 {"weighted", r.weighted},
                 {"degenerate", r.degenerate}});
  return a;
}

nlohmann::json to_json(const std::vector<StratumProfile>& profiles, const std::vector<std::string>& names) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& p : profiles) {
    nlohmann::json cov = nlohmann::json::object();
    for (std::size_t j = 0; j < names.size() && j < p.mean.size(); ++j)
      cov[names[j]] = {{"mean", p.mean[j]}, {"sd", p.sd[j]}};
    a.push_back({{"stratum", to_string(p.stratum)},
                 {"proportion", p.proportion},
                 {"suppressed", p.suppressed},
                 {"covariates", cov}});
  }
  return a;
}

void write_curves_csv(const MrEstimate& e, const std::string& path) {
  std::ostringstream o;
  o << "arm,stratum,t,estimate,lo,hi\n";
  auto cell = [&](double v) { return std::isfinite(v) ? format_double(v) : std::string(); };
  for (Stratum u : kAllStrata) {
    const int iu = index(u);
    if (!e.present[iu]) continue;
    for (int z = 0; z < 2; ++z)
      for (std::size_t k = 0; k < e.grid.size(); ++k) {
        o << z << "," << to_string(u) << "," << format_double(e.grid[k]) << "," << format_double(e.survival[z][iu][k])
          << ",";
        if (e.bands) o << cell(e.bands->survival_lo[z][iu][k]) << "," << cell(e.bands->survival_hi[z][iu][k]);
        else o << ",";
        o << "\n";
      }
    for (std::size_t k = 0; k < e.grid.size(); ++k) {
      o << "tau," << to_string(u) << "," << format_double(e.grid[k]) << "," << format_double(e.tau[iu][k]) << ",";
      if (e.bands) o << cell(e.bands->tau_lo[iu][k]) << "," << cell(e.bands->tau_hi[iu][k]);
      else o << ",";
      o << "\n";
    }
  }
  write_text(path, o.str());
}

void write_smd_csv(const std::vector<SmdRow>& rows, const std::string& path) {
  std::ostringstream o;
  o << "stratum,covariate,unweighted,weighted,degenerate\n";
  for (const auto& r : rows)
    o << r.contrast << "," << r.covariate << "," << format_double(r.unweighted) << "," << format_double(r.weighted)
      << "," << (r.degenerate ? 1 : 0) << "\n";
  write_text(path, o.str());
}

std::vector<SvgPanel> survival_panels(const MrEstimate& e, const std::optional<TrueSpce>& truth) {
  std::vector<SvgPanel> panels;
  const auto& x = e.grid.points();
  for (Stratum u : kAllStrata) {
    const int iu = index(u);
    if (!e.present[iu]) continue;
    SvgPanel p;
    p.title = "stratum " + to_string(u);
    p.ylabel = "survival";
    p.ylim = std::make_pair(0.0, 1.0);
    for (int z = 0; z < 2; ++z) {
      SvgSeries s;
      s.label = z ? "treated" : "control";
      s.color = palette()[static_cast<std::size_t>(z)];
      s.x = x;
      s.y = e.survival[z][iu];
      if (e.bands) {
        s.lo = e.bands->survival_lo[z][iu];
        s.hi = e.bands->survival_hi[z][iu];
      }
      p.series.push_back(s);
      if (truth && !truth->survival[z][iu].empty()) {
        SvgSeries t;
        t.label = z ? "treated (truth)" : "control (truth)";
        t.color = s.color;
        t.dashed = true;
        t.x = x;
        t.y = truth->survival[z][iu];
        p.series.push_back(t);
      }
    }
    panels.push_back(p);
  }
  return panels;
}

std::vector<SvgPanel> spce_panels(const MrEstimate& e, const std::optional<TrueSpce>& truth) {
  std::vector<SvgPanel> panels;
  const auto& x = e.grid.points();
  for (Stratum u : kAllStrata) {
    const int iu = index(u);
    if (!e.present[iu]) continue;
    SvgPanel p;
    p.title = "SPCE stratum " + to_string(u);
    p.ylabel = "treated - control survival";
    p.zero_line = true;
    SvgSeries s;
    s.label = "estimate";
    s.x = x;
    s.y = e.tau[iu];
    if (e.bands) {
      s.lo = e.bands->tau_lo[iu];
      s.hi = e.bands->tau_hi[iu];
    }
    p.series.push_back(s);
    if (truth && !truth->tau[iu].empty()) {
      SvgSeries t;
      t.label = "truth";
      t.color = "#000000";
      t.dashed = true;
      t.x = x;
      t.y = truth->tau[iu];
      p.series.push_back(t);
    }
    panels.push_back(p);
  }
  return panels;
}

nlohmann::json manifest_json(const RunManifest& m, const std::string& out_dir) {
  nlohmann::json j;
  j["command"] = m.command;
  j["config"] = m.config;
  j["seeds"] = m.seeds;
  j["toolkit_version"] = kToolkitVersion;
  nlohmann::json in = nlohmann::json::array();
  for (const auto& p : m.inputs) in.push_back({{"path", p}, {"sha256", sha256_file(p)}});
  j["inputs"] = in;
  nlohmann::json out = nlohmann::json::array();
  std::vector<std::string> names = m.outputs;
  std::sort(names.begin(), names.end());
  for (const auto& name : names)
    out.push_back({{"file", name}, {"sha256", sha256_file((std::filesystem::path(out_dir) / name).string())}});
  j["outputs"] = out;
  j["seconds"] = m.seconds;
  return j;
}

void write_manifest(const RunManifest& m, const std::string& out_dir) {
  write_text((std::filesystem::path(out_dir) / kManifestName).string(), manifest_json(m, out_dir).dump(2) + "\n");
}

}  // namespace spce
