#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "spce/mixture.hpp"
#include "spce/output.hpp"
#include "spce/sensitivity.hpp"
#include "spce/simulator.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace spce::cli {

namespace {

struct DataOptions {
  std::string path;
  std::string arm = "arm", ice = "ice", time = "time", event = "event";
  std::vector<std::string> covariates;
  std::string time_off;
  double ice_cutoff = 90.0;
  std::size_t grid_size = 100;
  double t_max = 0.0;

  void add(CLI::App* app) {
    app->add_option("--data", path, "trial CSV")->required()->check(CLI::ExistingFile);
    app->add_option("--arm-col", arm, "treatment column");
    app->add_option("--ice-col", ice, "intercurrent-event column");
    app->add_option("--time-col", time, "follow-up time column");
    app->add_option("--event-col", event, "event indicator column");
    app->add_option("--covariates", covariates, "covariate columns (default: all other non-latent columns)")
        ->delimiter(',');
    app->add_option("--time-off-col", time_off, "derive the ICE from this column by a cutoff");
    app->add_option("--ice-cutoff", ice_cutoff, "cutoff for --time-off-col");
    app->add_option("--grid-size", grid_size, "number of analysis grid points")->check(CLI::Range(1, 100000));
    app->add_option("--tmax", t_max, "grid end (default: 0.99 quantile of observed times)");
  }

  Dataset load() const {
    ColumnMap m;
    m.arm = arm;
    m.ice = ice;
    m.time = time;
    m.event = event;
    m.covariates = covariates;
    if (!time_off.empty()) m.time_off = time_off;
    m.ice_cutoff = ice_cutoff;
    return load_csv(path, m);
  }

  TimeGrid grid(const Dataset& d) const {
    return t_max > 0.0 ? TimeGrid::equispaced(t_max, grid_size) : default_grid(d, grid_size);
  }

  json to_json() const {
    return {{"data", path},       {"arm_col", arm},         {"ice_col", ice},       {"time_col", time},
            {"event_col", event}, {"covariates", covariates}, {"time_off_col", time_off},
            {"ice_cutoff", ice_cutoff}, {"grid_size", grid_size}, {"tmax", t_max}};
  }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

double parse_number(const std::string& s) {
  // accepts plain numbers and log(x)
  std::string t = s;
  t.erase(std::remove_if(t.begin(), t.end(), ::isspace), t.end());
  if (t.rfind("log(", 0) == 0 && t.back() == ')') return std::log(parse_number(t.substr(4, t.size() - 5)));
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    throw InvalidArgument("not a number: '" + s + "'");
  }
  if (used != t.size()) throw InvalidArgument("not a number: '" + s + "'");
  return v;
}

std::vector<double> parse_numbers(const std::vector<std::string>& items) {
  std::vector<double> v;
  for (const auto& s : items)
    for (const auto& p : split_list(s)) v.push_back(parse_number(p));
  return v;
}

fs::path prepare_out(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw Error("io", "cannot create output directory '" + dir + "'");
  return p;
}

struct Run {
  RunManifest manifest;
  fs::path out;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  std::string file(const std::string& name) {
    manifest.outputs.push_back(name);
    return (out / name).string();
  }
  void finish() {
    manifest.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(manifest, out.string());
  }
};

Run begin(const std::string& command, const std::vector<std::string>& args, const std::string& out_dir, json options) {
  Run r;
  r.out = prepare_out(out_dir);
  // one manifest per directory: a rerun into the same directory replaces it
  r.manifest.command = command;
  r.manifest.config = {{"argv", args}, {"options", std::move(options)}};
  return r;
}

AssumptionConfig assumptions(const std::string& mono, bool er) {
  AssumptionConfig a;
  a.monotonicity = parse_monotonicity(mono);
  a.exclusion_restriction = er;
  a.validate();
  return a;
}

// ---------------------------------------------------------------- simulate

struct SimulateOptions {
  std::string config, preset = "appendix_d", out;
  std::size_t n = 0;
  std::uint64_t seed = 1;
  std::size_t truth_mc = 200000;
  std::size_t grid_size = 100;
  bool no_censoring = false;
};

int cmd_simulate(const SimulateOptions& o, const std::vector<std::string>& args, std::ostream& out) {
  DgpSpec spec;
  if (!o.config.empty()) {
    json j;
    try {
      j = json::parse(read_text(o.config));
    } catch (const json::exception& e) {
      throw SchemaError("config '" + o.config + "': " + e.what());
    }
    spec = dgp_from_json(j);
  } else if (o.preset == "appendix_d") {
    spec = DgpSpec::appendix_d();
  } else if (o.preset == "compliant") {
    spec = DgpSpec::assumption_compliant();
  } else {
    throw InvalidArgument("unknown preset '" + o.preset + "' (expected appendix_d or compliant)");
  }
  if (o.n > 0) spec.set_n(o.n);
  if (o.no_censoring) spec.censoring = false;
  spec.validate();
  Run run = begin("simulate", args, o.out,
                  {{"config", o.config}, {"preset", o.preset}, {"n", spec.n}, {"seed", o.seed},
                   {"truth_mc", o.truth_mc}, {"grid_size", o.grid_size}, {"censoring", spec.censoring}});
  if (!o.config.empty()) run.manifest.inputs.push_back(o.config);
  run.manifest.seeds = {o.seed};
  auto trial = simulate(spec, o.seed);
  write_csv(trial.data, run.file("trial.csv"));
  write_truth(trial, run.file("truth.csv"));
  write_text(run.file("dgp.json"), to_json(spec).dump(2) + "\n");
  if (o.truth_mc > 0) {
    auto grid = default_grid(trial.data, o.grid_size);
    write_true_spce_csv(true_spce(spec, grid, o.truth_mc, o.seed ^ 0x7275746875ull), run.file("true_spce.csv"));
  }
  run.finish();
  out << "wrote " << trial.data.size() << " records to " << (run.out / "trial.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------- fit-mixture

struct MixtureOptions {
  DataOptions data;
  std::string monotonicity = "d0>=d1", out;
  bool er = false, em = false, all = false, draws = false;
  SamplerOptions sampler;
  PriorSpec prior;
  unsigned threads = 0;
};

void write_mixture_curves(const PosteriorSummary& s, const std::string& path) {
  std::ostringstream o;
  o << "arm,stratum,t,estimate,lo,hi\n";
  for (Stratum u : s.strata) {
    const int iu = index(u);
    for (int z = 0; z < 2; ++z) {
      const auto& b = *s.survival[z][iu];
      for (std::size_t k = 0; k < s.grid.size(); ++k)
        o << z << "," << to_string(u) << "," << format_double(s.grid[k]) << "," << format_double(b.mean[k]) << ","
          << format_double(b.lo[k]) << "," << format_double(b.hi[k]) << "\n";
    }
    const auto& b = *s.spce[iu];
    for (std::size_t k = 0; k < s.grid.size(); ++k)
      o << "tau," << to_string(u) << "," << format_double(s.grid[k]) << "," << format_double(b.mean[k]) << ","
        << format_double(b.lo[k]) << "," << format_double(b.hi[k]) << "\n";
  }
  write_text(path, o.str());
}

void write_em_curves(const EmFit& e, const std::string& path) {
  std::ostringstream o;
  o << "arm,stratum,t,estimate,lo,hi\n";
  for (Stratum u : e.params.strata) {
    const int iu = index(u);
    for (int z = 0; z < 2; ++z)
      for (std::size_t k = 0; k < e.grid.size(); ++k)
        o << z << "," << to_string(u) << "," << format_double(e.grid[k]) << "," << format_double(e.survival[z][iu][k])
          << ",,\n";
    for (std::size_t k = 0; k < e.grid.size(); ++k)
      o << "tau," << to_string(u) << "," << format_double(e.grid[k]) << "," << format_double(e.spce[iu][k]) << ",,\n";
  }
  write_text(path, o.str());
}

std::vector<SvgPanel> mixture_panels(const PosteriorSummary& s, bool spce) {
  std::vector<SvgPanel> panels;
  for (Stratum u : s.strata) {
    const int iu = index(u);
    SvgPanel p;
    if (spce) {
      p.title = "SPCE stratum " + to_string(u);
      p.ylabel = "treated - control survival";
      p.zero_line = true;
      SvgSeries ser;
      ser.label = "posterior mean";
      ser.x = s.grid.points();
      ser.y = s.spce[iu]->mean;
      ser.lo = s.spce[iu]->lo;
      ser.hi = s.spce[iu]->hi;
      p.series.push_back(ser);
    } else {
      p.title = "Survival stratum " + to_string(u);
      p.ylabel = "survival";
      p.ylim = std::make_pair(0.0, 1.0);
      for (int z = 0; z < 2; ++z) {
        SvgSeries ser;
        ser.label = z ? "treated" : "control";
        ser.color = palette()[static_cast<std::size_t>(z)];
        ser.x = s.grid.points();
        ser.y = s.survival[z][iu]->mean;
        ser.lo = s.survival[z][iu]->lo;
        ser.hi = s.survival[z][iu]->hi;
        p.series.push_back(ser);
      }
    }
    panels.push_back(p);
  }
  return panels;
}

std::string combo_tag(const AssumptionConfig& a) {
  std::string m = a.monotonicity == Monotonicity::none ? "none"
                  : a.monotonicity == Monotonicity::treated_geq_control ? "d1ged0"
                                                                         : "d0ged1";
  return "mono-" + m + "_er-" + (a.exclusion_restriction ? "on" : "off");
}

int cmd_fit_mixture(MixtureOptions o, const std::vector<std::string>& args, std::ostream& out) {
  Dataset d = o.data.load();
  TimeGrid grid = o.data.grid(d);
  o.sampler.threads = o.threads;
  json opts = o.data.to_json();
  opts["monotonicity"] = o.monotonicity;
  opts["er"] = o.er;
  opts["em"] = o.em;
  opts["all_assumptions"] = o.all;
  opts["chains"] = o.sampler.chains;
  opts["iters"] = o.sampler.iters;
  opts["burnin"] = o.sampler.burnin;
  opts["thin"] = o.sampler.thin;
  opts["seed"] = o.sampler.seed;
  opts["sigma_beta"] = o.prior.sigma_beta;
  opts["sigma_gamma"] = o.prior.sigma_gamma;
  Run run = begin("fit-mixture", args, o.out, opts);
  run.manifest.inputs.push_back(o.data.path);
  run.manifest.seeds = {o.sampler.seed};

  std::vector<AssumptionConfig> combos;
  if (o.all) {
    Monotonicity dir = parse_monotonicity(o.monotonicity);
    if (dir == Monotonicity::none) dir = Monotonicity::control_geq_treated;
    for (Monotonicity m : {dir, Monotonicity::none})
      for (bool er : {false, true}) combos.push_back({m, er});
  } else {
    combos.push_back(assumptions(o.monotonicity, o.er));
  }
  for (const auto& a : combos) {
    const std::string tag = o.all ? "_" + combo_tag(a) : "";
    if (o.em) {
      EmOptions eo;
      eo.seed = o.sampler.seed;
      auto em = run_em(d, a, grid, eo);
      json j = to_json(em);
      j["monotonicity"] = to_string(a.monotonicity);
      j["exclusion_restriction"] = a.exclusion_restriction;
      write_text(run.file("em" + tag + ".json"), j.dump(2) + "\n");
      write_em_curves(em, run.file("em_curves" + tag + ".csv"));
      out << "EM" << tag << ": " << em.iterations << " iterations, log-likelihood "
          << format_double(em.log_likelihood.back()) << (em.converged ? "" : " (not converged)") << "\n";
      continue;
    }
    auto fit = run_sampler(d, a, o.prior, grid, o.sampler);
    write_text(run.file("summary" + tag + ".json"), to_json(fit.summary).dump(2) + "\n");
    write_mixture_curves(fit.summary, run.file("curves" + tag + ".csv"));
    write_text(run.file("survival" + tag + ".svg"), render_svg(mixture_panels(fit.summary, false)));
    write_text(run.file("spce" + tag + ".svg"), render_svg(mixture_panels(fit.summary, true)));
    if (o.draws) write_draws_csv(fit, run.file("draws" + tag + ".csv"));
    out << "mixture" << tag << ": " << fit.summary.draws << " draws, max split-Rhat "
        << format_double(fit.summary.max_rhat) << "\n";
    for (const auto& w : fit.summary.warnings) out << "warning: " << w << "\n";
  }
  run.finish();
  return 0;
}

// -------------------------------------------------------- fit-weighting

struct WeightingOptions {
  DataOptions data;
  std::string monotonicity = "d0>=d1", out;
  std::vector<std::string> xpi, xe, xc, xt;
  std::size_t bootstrap = 1000;
  std::uint64_t seed = 1;
  double eps = 0.01;
  unsigned threads = 0;
};

WeightingConfig weighting_config(const std::string& mono, const std::vector<std::string>& xpi,
                                 const std::vector<std::string>& xe, const std::vector<std::string>& xc,
                                 const std::vector<std::string>& xt, double eps) {
  WeightingConfig c;
  c.assumptions = assumptions(mono, false);
  c.covariates.principal = xpi;
  c.covariates.propensity = xe;
  c.covariates.censoring = xc;
  c.covariates.outcome = xt;
  c.options.positivity_eps = eps;
  return c;
}

int cmd_fit_weighting(const WeightingOptions& o, const std::vector<std::string>& args, std::ostream& out) {
  Dataset d = o.data.load();
  TimeGrid grid = o.data.grid(d);
  WeightingConfig cfg = weighting_config(o.monotonicity, o.xpi, o.xe, o.xc, o.xt, o.eps);
  json opts = o.data.to_json();
  opts["monotonicity"] = o.monotonicity;
  opts["xpi"] = o.xpi;
  opts["xe"] = o.xe;
  opts["xc"] = o.xc;
  opts["xt"] = o.xt;
  opts["bootstrap"] = o.bootstrap;
  opts["seed"] = o.seed;
  opts["positivity_eps"] = o.eps;
  Run run = begin("fit-weighting", args, o.out, opts);
  run.manifest.inputs.push_back(o.data.path);
  run.manifest.seeds = {o.seed};

  BootstrapConfig boot;
  boot.replicates = o.bootstrap;
  boot.seed = o.seed;
  boot.threads = o.threads;
  MrEstimate est = o.bootstrap > 0 ? bootstrap_ci(d, grid, cfg, boot) : estimate_weighting(d, grid, cfg);
  Dataset canonical = to_canonical(d, cfg.assumptions.monotonicity);
  NuisanceBundle bundle = fit_nuisances(canonical, cfg.covariates);
  auto smd = weighted_smd(bundle, canonical, cfg.assumptions.monotonicity);
  auto profiles = strata_covariate_profile_weighting(bundle, canonical, cfg.assumptions.monotonicity);

  json j = to_json(est);
  j["method"] = "weighting";
  j["covariate_sets"] = {{"xpi", o.xpi}, {"xe", o.xe}, {"xc", o.xc}, {"xt", o.xt}};
  write_text(run.file("estimate.json"), j.dump(2) + "\n");
  write_curves_csv(est, run.file("curves.csv"));
  write_smd_csv(smd, run.file("smd.csv"));
  write_text(run.file("profiles.json"), to_json(profiles, d.covariate_names()).dump(2) + "\n");
  write_text(run.file("survival.svg"), render_svg(survival_panels(est)));
  write_text(run.file("spce.svg"), render_svg(spce_panels(est)));
  run.finish();
  out << "weighting: proportions";
  for (Stratum u : kAllStrata)
    if (est.present[index(u)]) out << " " << to_string(u) << "=" << format_double(est.proportions[index(u)]);
  out << "\n";
  if (est.bands && est.bands->failures > 0)
    out << "warning: " << est.bands->failures << " bootstrap replicates failed\n";
  return 0;
}

// ---------------------------------------------------------- sensitivity

struct SensitivityOptions {
  DataOptions data;
  std::string monotonicity = "d0>=d1", out;
  std::vector<std::string> zeta, xi0, xi1;
  std::vector<std::string> xpi, xe, xc, xt;
  std::size_t bootstrap = 1000;
  std::uint64_t seed = 1;
  bool fast = false;
  unsigned threads = 0;
};

int cmd_sensitivity(const SensitivityOptions& o, const std::vector<std::string>& args, std::ostream& out) {
  const bool zeta = !o.zeta.empty();
  if (zeta == (!o.xi0.empty() || !o.xi1.empty()))
    throw InvalidArgument("give either --zeta or both --xi0 and --xi1");
  if (!zeta && (o.xi0.empty() || o.xi1.empty())) throw InvalidArgument("--xi0 and --xi1 are both required");
  Dataset d = o.data.load();
  TimeGrid grid = o.data.grid(d);
  WeightingConfig cfg = weighting_config(o.monotonicity, o.xpi, o.xe, o.xc, o.xt, 0.01);
  BootstrapConfig boot;
  boot.replicates = o.bootstrap;
  boot.seed = o.seed;
  boot.threads = o.threads;
  boot.reuse_nuisances = o.fast;
  json opts = o.data.to_json();
  opts["monotonicity"] = o.monotonicity;
  opts["zeta"] = o.zeta;
  opts["xi0"] = o.xi0;
  opts["xi1"] = o.xi1;
  opts["bootstrap"] = o.bootstrap;
  opts["seed"] = o.seed;
  opts["fast"] = o.fast;
  opts["xpi"] = o.xpi;
  opts["xe"] = o.xe;
  opts["xc"] = o.xc;
  opts["xt"] = o.xt;
  // validate before creating the output directory
  SweepResult s = zeta ? zeta_sweep(d, parse_numbers(o.zeta), grid, cfg, boot)
                       : xi_sweep(d, parse_numbers(o.xi0), parse_numbers(o.xi1), grid, cfg, boot);
  Run run = begin("sensitivity", args, o.out, opts);
  run.manifest.inputs.push_back(o.data.path);
  run.manifest.seeds = {o.seed};
  write_sweep_csv(s, run.file("sweep.csv"));
  write_text(run.file("sweep.svg"), render_svg(sweep_panels(s)));
  json j;
  j["kind"] = zeta ? "zeta" : "xi";
  j["approximate_bands"] = s.approximate;
  if (zeta) j["zeta_max"] = s.zeta_bound;
  json pts = json::array();
  for (std::size_t p = 0; p < s.points.size(); ++p) {
    json e = to_json(s.estimates[p]);
    e["label"] = point_label(s.kind, s.points[p]);
    pts.push_back(e);
  }
  j["points"] = pts;
  write_text(run.file("sweep.json"), j.dump(2) + "\n");
  run.finish();
  out << "sensitivity: " << s.points.size() << " points";
  if (zeta) out << ", zeta_max " << format_double(s.zeta_bound);
  out << (s.approximate ? " (approximate bands)" : "") << "\n";
  return 0;
}

// --------------------------------------------------------------- report

std::string pct(double v) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(1);
  o << 100.0 * v;
  return o.str();
}

std::string num(double v, int digits = 3) {
  if (!std::isfinite(v)) return "NA";
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(digits);
  o << v;
  return o.str();
}

// Grid indices at roughly a quarter, half, three quarters and the end.
std::vector<std::size_t> report_times(std::size_t m) {
  std::vector<std::size_t> k;
  for (double f : {0.25, 0.5, 0.75, 1.0}) {
    auto i = static_cast<std::size_t>(std::lround(f * static_cast<double>(m - 1)));
    if (k.empty() || k.back() != i) k.push_back(i);
  }
  return k;
}

struct ReportRow {
  std::string run, method, assumptions;
  std::map<std::string, std::string> cells;
};

void proportions_table(std::ostream& o, const std::vector<ReportRow>& rows) {
  o << "| run | method | assumptions | 00 | 01 | 10 | 11 |\n|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    o << "| " << r.run << " | " << r.method << " | " << r.assumptions << " |";
    for (const char* u : {"00", "01", "10", "11"}) {
      auto it = r.cells.find(u);
      o << " " << (it == r.cells.end() ? "-" : it->second) << " |";
    }
    o << "\n";
  }
}

std::string with_ci(double m, double lo, double hi) { return pct(m) + " (" + pct(lo) + ", " + pct(hi) + ")"; }

void spce_table(std::ostream& o, const json& grid, const json& strata, const std::string& key, bool bands) {
  const auto times = report_times(grid.size());
  o << "| stratum |";
  for (auto k : times) o << " t = " << num(grid[k].get<double>(), 2) << " |";
  o << "\n|---|";
  for (std::size_t i = 0; i < times.size(); ++i) o << "---|";
  o << "\n";
  for (auto it = strata.begin(); it != strata.end(); ++it) {
    if (!it.value().contains(key)) continue;
    o << "| " << it.key() << " |";
    const auto& s = it.value()[key];
    for (auto k : times) {
      if (bands)
        o << " " << num(s["mean"][k].get<double>()) << " (" << num(s["lo"][k].get<double>()) << ", "
          << num(s["hi"][k].get<double>()) << ") |";
      else if (s.is_object())
        o << " " << num(s["estimate"][k].get<double>()) << " |";
      else
        o << " " << num(s[k].get<double>()) << " |";
    }
    o << "\n";
  }
}

std::string rel(const fs::path& target, const fs::path& base) {
  std::error_code ec;
  auto r = fs::relative(target, base, ec);
  return (ec ? target : r).generic_string();
}

json load_json(const fs::path& p) {
  try {
    return json::parse(read_text(p.string()));
  } catch (const json::exception& e) {
    throw SchemaError("'" + p.string() + "': " + e.what());
  }
}

struct ReportOptions {
  std::vector<std::string> dirs;
  std::string out;
};

int cmd_report(const ReportOptions& o, std::ostream& out) {
  std::vector<std::string> missing;
  for (const auto& d : o.dirs)
    if (!fs::is_regular_file(fs::path(d) / kManifestName)) missing.push_back(d);
  if (!missing.empty()) {
    std::string msg = "missing run directories (no " + std::string(kManifestName) + "):";
    for (const auto& m : missing) msg += " " + m;
    std::vector<std::string> found;
    for (const auto& d : o.dirs)
      if (std::find(missing.begin(), missing.end(), d) == missing.end()) found.push_back(fs::path(d).generic_string());
    for (const auto& m : missing) {
      fs::path parent = fs::path(m).parent_path();
      if (parent.empty()) parent = ".";
      if (!fs::is_directory(parent)) continue;
      for (const auto& e : fs::directory_iterator(parent))
        if (fs::is_regular_file(e.path() / kManifestName)) found.push_back(e.path().generic_string());
    }
    std::sort(found.begin(), found.end());
    found.erase(std::unique(found.begin(), found.end()), found.end());
    msg += "; found run directories:";
    if (found.empty()) msg += " none";
    for (const auto& f : found) msg += " " + f;
    throw Error("missing_input", msg);
  }
  const fs::path report_dir = fs::path(o.out).parent_path().empty() ? fs::path(".") : fs::path(o.out).parent_path();
  std::ostringstream body;
  std::vector<ReportRow> props;
  for (const auto& dir : o.dirs) {
    const fs::path p(dir);
    const json man = load_json(p / kManifestName);
    const std::string cmd = man.value("command", "");
    const std::string name = p.filename().empty() ? p.parent_path().filename().string() : p.filename().string();
    body << "## " << cmd << ": " << name << "\n\n";
    std::vector<std::string> files;
    for (const auto& f : man["outputs"]) files.push_back(f["file"].get<std::string>());
    if (cmd == "fit-weighting") {
      const json e = load_json(p / "estimate.json");
      ReportRow row{name, "weighting", "monotonicity " + e["monotonicity"].get<std::string>() + ", PI", {}};
      for (auto it = e["strata"].begin(); it != e["strata"].end(); ++it) {
        const auto& s = it.value();
        row.cells[it.key()] = s.contains("proportion_ci")
                                  ? with_ci(s["proportion"], s["proportion_ci"][0], s["proportion_ci"][1])
                                  : pct(s["proportion"].get<double>());
      }
      props.push_back(row);
      body << "SPCE (treated minus control survival)";
      body << (e.contains("bootstrap") ? ", bootstrap percentile intervals in the curve files" : "") << ":\n\n";
      spce_table(body, e["grid"], e["strata"], "spce", false);
      if (fs::exists(p / "profiles.json")) {
        const json pr = load_json(p / "profiles.json");
        body << "\nCovariate means by stratum:\n\n";
        std::vector<std::string> covs;
        for (const auto& sp : pr)
          for (auto c = sp["covariates"].begin(); c != sp["covariates"].end(); ++c)
            if (std::find(covs.begin(), covs.end(), c.key()) == covs.end()) covs.push_back(c.key());
        body << "| stratum |";
        for (const auto& c : covs) body << " " << c << " |";
        body << "\n|---|";
        for (std::size_t i = 0; i < covs.size(); ++i) body << "---|";
        body << "\n";
        for (const auto& sp : pr) {
          body << "| " << sp["stratum"].get<std::string>() << (sp["suppressed"].get<bool>() ? " (suppressed)" : "")
               << " |";
          for (const auto& c : covs)
            body << " " << (sp["covariates"].contains(c) ? num(sp["covariates"][c]["mean"].get<double>()) : "-")
                 << " |";
          body << "\n";
        }
      }
    } else if (cmd == "fit-mixture") {
      for (const auto& f : files) {
        const bool em = f.rfind("em", 0) == 0 && f.size() > 5 && f.substr(f.size() - 5) == ".json";
        const bool summary = f.rfind("summary", 0) == 0 && f.substr(f.size() - 5) == ".json";
        if (!em && !summary) continue;
        const json s = load_json(p / f);
        const std::string assume = "monotonicity " + s.value("monotonicity", std::string("?")) + ", ER " +
                                   (s.value("exclusion_restriction", false) ? "on" : "off");
        body << "### " << f << " (" << assume << ")\n\n";
        ReportRow row{name + "/" + f, em ? "EM" : "Bayesian mixture", assume, {}};
        for (auto it = s["strata"].begin(); it != s["strata"].end(); ++it) {
          const auto& v = it.value()["proportion"];
          row.cells[it.key()] = v.is_object() ? with_ci(v["mean"], v["lo"], v["hi"]) : pct(v.get<double>());
        }
        props.push_back(row);
        spce_table(body, s["grid"], s["strata"], "spce", !em);
        if (!em) {
          const auto& dg = s["diagnostics"];
          body << "\nmax split-Rhat " << num(dg["max_rhat"].get<double>()) << ": "
               << (dg["converged"].get<bool>() ? "converged" : "NOT CONVERGED") << "\n";
          if (s.contains("covariate_profiles")) {
            body << "\nCovariate means by stratum (posterior mean):\n\n";
            const auto& pr = s["covariate_profiles"];
            std::vector<std::string> covs;
            for (auto it = pr.begin(); it != pr.end(); ++it)
              for (auto c = it.value().begin(); c != it.value().end(); ++c)
                if (std::find(covs.begin(), covs.end(), c.key()) == covs.end()) covs.push_back(c.key());
            body << "| stratum |";
            for (const auto& c : covs) body << " " << c << " |";
            body << "\n|---|";
            for (std::size_t i = 0; i < covs.size(); ++i) body << "---|";
            body << "\n";
            for (auto it = pr.begin(); it != pr.end(); ++it) {
              body << "| " << it.key() << " |";
              for (const auto& c : covs)
                body << " " << (it.value().contains(c) ? num(it.value()[c]["mean"].get<double>()) : "-") << " |";
              body << "\n";
            }
          }
        }
        body << "\n";
      }
    } else if (cmd == "sensitivity") {
      const json s = load_json(p / "sweep.json");
      body << "Sweep over " << s["kind"].get<std::string>();
      if (s.contains("zeta_max")) body << " (zeta_max " << num(s["zeta_max"].get<double>()) << ")";
      body << (s["approximate_bands"].get<bool>() ? ", approximate bands" : "") << ". SPCE at the last grid time:\n\n";
      body << "| point | 00 | 01 | 10 | 11 |\n|---|---|---|---|---|\n";
      for (const auto& pt : s["points"]) {
        body << "| " << pt["label"].get<std::string>() << " |";
        for (const char* u : {"00", "01", "10", "11"}) {
          if (!pt["strata"].contains(u)) {
            body << " - |";
            continue;
          }
          body << " " << num(pt["strata"][u]["spce"].back().get<double>()) << " |";
        }
        body << "\n";
      }
    } else if (cmd == "simulate") {
      const auto& opt = man["config"]["options"];
      body << "Simulated trial: n = " << opt["n"].get<std::size_t>() << ", seed " << opt["seed"].get<std::uint64_t>()
           << ".\n";
    } else {
      body << "(no summary for this command)\n";
    }
    body << "\n";
    for (const auto& f : files)
      if (f.size() > 4 && f.substr(f.size() - 4) == ".svg")
        body << "![" << f << "](" << rel(p / f, report_dir) << ")\n\n";
  }
  std::ostringstream doc;
  doc << "# Principal stratification survival report\n\n";
  doc << "Runs: " << o.dirs.size() << ".\n\n";
  if (!props.empty()) {
    doc << "## Stratum proportions (%)\n\n";
    proportions_table(doc, props);
    doc << "\n";
  }
  doc << body.str();
  write_text(o.out, doc.str());
  out << "wrote " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- rerun

int cmd_rerun(const std::string& manifest, const std::string& out_dir, bool check, std::ostream& out,
              std::ostream& err) {
  const json man = load_json(manifest);
  if (!man.contains("config") || !man["config"].contains("argv"))
    throw SchemaError("'" + manifest + "' has no recorded command line");
  std::vector<std::string> argv = man["config"]["argv"].get<std::vector<std::string>>();
  const std::string target = out_dir.empty() ? fs::path(manifest).parent_path().string() : out_dir;
  bool replaced = false;
  for (std::size_t i = 0; i + 1 < argv.size(); ++i)
    if (argv[i] == "--out") {
      argv[i + 1] = target;
      replaced = true;
    }
  if (!replaced) argv.insert(argv.end(), {"--out", target});
  const int rc = run(argv, out, err);
  if (rc != 0 || !check) return rc;
  const json now = load_json(fs::path(target) / kManifestName);
  if (now["outputs"] != man["outputs"]) {
    throw Error("rerun_mismatch", "outputs of the rerun differ from '" + manifest + "'");
  }
  out << "rerun reproduced " << now["outputs"].size() << " outputs bitwise\n";
  return 0;
}

// ---------------------------------------------------------------- describe

int cmd_describe(const DataOptions& o, std::ostream& out) {
  Dataset d = o.load();
  auto c = cell_counts(d);
  json j;
  j["records"] = d.size();
  j["covariates"] = d.covariate_names();
  j["cells"] = {{"z0_d0", c.n[0][0]}, {"z0_d1", c.n[0][1]}, {"z1_d0", c.n[1][0]}, {"z1_d1", c.n[1][1]}};
  std::size_t events = 0;
  for (const auto& r : d.records()) events += static_cast<std::size_t>(r.event);
  j["events"] = events;
  j["ice_rate"] = {{"control", c.n[0][0] + c.n[0][1] ? double(c.n[0][1]) / double(c.n[0][0] + c.n[0][1]) : 0.0},
                   {"treated", c.n[1][0] + c.n[1][1] ? double(c.n[1][1]) / double(c.n[1][0] + c.n[1][1]) : 0.0}};
  out << j.dump(2) << "\n";
  return 0;
}

void error_json(std::ostream& err, const std::string& kind, const std::string& message, const std::string& command) {
  json j = {{"error", {{"kind", kind}, {"message", message}, {"command", command}}}};
  err << j.dump() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Principal stratification survival analysis", "spce"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolkitVersion));

  SimulateOptions sim;
  auto* s = app.add_subcommand("simulate", "simulate a trial from the data-generating process");
  s->add_option("--config", sim.config, "DGP JSON (see README)")->check(CLI::ExistingFile);
  s->add_option("--preset", sim.preset, "appendix_d or compliant");
  s->add_option("--n", sim.n, "sample size (default 732)");
  s->add_option("--seed", sim.seed, "random seed");
  s->add_option("--truth-mc", sim.truth_mc, "Monte Carlo size for the true SPCE curves (0: skip)");
  s->add_option("--grid-size", sim.grid_size, "grid points for the true curves");
  s->add_flag("--no-censoring", sim.no_censoring, "switch censoring off");
  s->add_option("--out", sim.out, "output directory")->required();

  MixtureOptions mix;
  auto* m = app.add_subcommand("fit-mixture", "Bayesian mixture (or EM) estimation");
  mix.data.add(m);
  m->add_option("--monotonicity", mix.monotonicity, "none, d1>=d0 or d0>=d1");
  m->add_flag("--er", mix.er, "exclusion restriction for stratum 11");
  m->add_flag("--all-assumptions", mix.all, "run monotonicity on/off x ER on/off");
  m->add_flag("--em", mix.em, "EM point estimates instead of sampling");
  m->add_flag("--draws", mix.draws, "write raw draws");
  m->add_option("--chains", mix.sampler.chains)->check(CLI::PositiveNumber);
  m->add_option("--iters", mix.sampler.iters)->check(CLI::PositiveNumber);
  auto* burnin = m->add_option("--burnin", mix.sampler.burnin, "discarded iterations (default: half of --iters)");
  m->add_option("--thin", mix.sampler.thin)->check(CLI::PositiveNumber);
  m->add_option("--seed", mix.sampler.seed);
  m->add_option("--sigma-beta", mix.prior.sigma_beta);
  m->add_option("--sigma-gamma", mix.prior.sigma_gamma);
  m->add_option("--threads", mix.threads, "worker threads (0: all cores)");
  m->add_option("--out", mix.out, "output directory")->required();

  WeightingOptions w;
  auto* wt = app.add_subcommand("fit-weighting", "multiply robust weighting estimation");
  w.data.add(wt);
  wt->add_option("--monotonicity", w.monotonicity, "d1>=d0 or d0>=d1");
  wt->add_option("--xpi", w.xpi, "principal score covariates")->delimiter(',');
  wt->add_option("--xe", w.xe, "propensity covariates")->delimiter(',');
  wt->add_option("--xc", w.xc, "censoring covariates")->delimiter(',');
  wt->add_option("--xt", w.xt, "outcome covariates")->delimiter(',');
  wt->add_option("--bootstrap", w.bootstrap, "bootstrap replicates (0: none)");
  wt->add_option("--seed", w.seed);
  wt->add_option("--eps", w.eps, "positivity clipping");
  wt->add_option("--threads", w.threads, "worker threads (0: all cores)");
  wt->add_option("--out", w.out, "output directory")->required();

  SensitivityOptions sen;
  auto* se = app.add_subcommand("sensitivity", "zeta or xi sensitivity sweeps");
  sen.data.add(se);
  se->add_option("--monotonicity", sen.monotonicity, "d1>=d0 or d0>=d1");
  se->add_option("--zeta", sen.zeta, "zeta values, comma separated");
  se->add_option("--xi0", sen.xi0, "xi0 values, comma separated; log(x) accepted");
  se->add_option("--xi1", sen.xi1, "xi1 values, comma separated; log(x) accepted");
  se->add_option("--xpi", sen.xpi)->delimiter(',');
  se->add_option("--xe", sen.xe)->delimiter(',');
  se->add_option("--xc", sen.xc)->delimiter(',');
  se->add_option("--xt", sen.xt)->delimiter(',');
  se->add_option("--bootstrap", sen.bootstrap, "bootstrap replicates per point");
  se->add_option("--seed", sen.seed);
  se->add_flag("--fast", sen.fast, "reuse benchmark nuisances in the bootstrap (approximate bands)");
  se->add_option("--threads", sen.threads, "worker threads (0: all cores)");
  se->add_option("--out", sen.out, "output directory")->required();

  ReportOptions rep;
  auto* r = app.add_subcommand("report", "Markdown report over run directories");
  r->add_option("dirs", rep.dirs, "run directories")->required();
  r->add_option("--out", rep.out, "report file")->required();

  DataOptions desc;
  auto* de = app.add_subcommand("describe", "cell counts and basic summaries of a dataset");
  desc.add(de);

  std::string manifest, rerun_out;
  bool rerun_check = false;
  auto* rr = app.add_subcommand("rerun", "repeat a run from its manifest");
  rr->add_option("manifest", manifest, "manifest.json")->required()->check(CLI::ExistingFile);
  rr->add_option("--out", rerun_out, "output directory (default: the manifest's directory)");
  rr->add_flag("--check", rerun_check, "fail unless every output is bitwise identical");

  std::vector<std::string> argv_store = {"spce"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  const std::string command = args.empty() ? "" : args.front();
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolkitVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    error_json(err, "usage", e.what(), command);
    return 2;
  }
  if (*m && burnin->count() == 0) mix.sampler.burnin = mix.sampler.iters / 2;
  try {
    if (*s) return cmd_simulate(sim, args, out);
    if (*m) return cmd_fit_mixture(mix, args, out);
    if (*wt) return cmd_fit_weighting(w, args, out);
    if (*se) return cmd_sensitivity(sen, args, out);
    if (*r) return cmd_report(rep, out);
    if (*de) return cmd_describe(desc, out);
    if (*rr) return cmd_rerun(manifest, rerun_out, rerun_check, out, err);
  } catch (const Error& e) {
    error_json(err, e.kind(), e.what(), command);
    return 1;
  } catch (const std::exception& e) {
    error_json(err, "internal", e.what(), command);
    return 1;
  }
  return 0;
}

}  // namespace spce::cli
