#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "doctest.h"
#include "json.hpp"
#include "spce/output.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = spce::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "spce_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string dir(const std::string& name) { return (scratch() / name).string(); }

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

json load(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

// Simulated trial shared by the fitting tests.
const std::string& trial() {
  static const std::string path = [] {
    auto r = run({"simulate", "--n", "300", "--seed", "3", "--truth-mc", "2000", "--out", dir("shared")});
    REQUIRE(r.code == 0);
    return (scratch() / "shared" / "trial.csv").string();
  }();
  return path;
}

}  // namespace

TEST_CASE("simulate writes the default trial size and is reproducible") {
  auto a = run({"simulate", "--seed", "11", "--truth-mc", "1000", "--out", dir("sim_a")});
  REQUIRE(a.code == 0);
  CHECK(count_lines(scratch() / "sim_a" / "trial.csv") == 733);
  for (const char* f : {"truth.csv", "dgp.json", "true_spce.csv", "manifest.json"})
    CHECK(fs::exists(scratch() / "sim_a" / f));

  auto b = run({"simulate", "--seed", "11", "--truth-mc", "1000", "--out", dir("sim_b")});
  REQUIRE(b.code == 0);
  CHECK(spce::sha256_file(dir("sim_a") + "/trial.csv") == spce::sha256_file(dir("sim_b") + "/trial.csv"));

  auto c = run({"simulate", "--n", "100", "--seed", "12", "--truth-mc", "0", "--out", dir("sim_c")});
  REQUIRE(c.code == 0);
  CHECK(count_lines(scratch() / "sim_c" / "trial.csv") == 101);
  CHECK(spce::sha256_file(dir("sim_a") + "/trial.csv") != spce::sha256_file(dir("sim_c") + "/trial.csv"));
}

TEST_CASE("describe reports cell counts") {
  auto r = run({"describe", "--data", trial()});
  REQUIRE(r.code == 0);
  json j = json::parse(r.out);
  CHECK(j.dump().find("300") != std::string::npos);
}

TEST_CASE("fit-mixture runs all four assumption combinations") {
  auto r = run({"fit-mixture", "--data", trial(), "--all-assumptions", "--chains", "1", "--iters", "20", "--out",
                dir("mix_all")});
  REQUIRE(r.code == 0);
  int summaries = 0;
  for (const auto& e : fs::directory_iterator(scratch() / "mix_all"))
    if (e.path().filename().string().rfind("summary", 0) == 0) ++summaries;
  CHECK(summaries == 4);
  CHECK(fs::exists(scratch() / "mix_all" / "summary_mono-none_er-on.json"));
  CHECK(fs::exists(scratch() / "mix_all" / "summary_mono-d0ged1_er-off.json"));
}

TEST_CASE("fit-mixture smoke run with draws, and EM") {
  auto r = run({"fit-mixture", "--data", trial(), "--chains", "1", "--iters", "10", "--draws", "--out", dir("mix")});
  REQUIRE(r.code == 0);
  json s = load(scratch() / "mix" / "summary.json");
  CHECK(s.contains("strata"));
  CHECK(s.contains("diagnostics"));
  CHECK(fs::exists(scratch() / "mix" / "draws.csv"));
  CHECK(fs::exists(scratch() / "mix" / "spce.svg"));

  auto e = run({"fit-mixture", "--data", trial(), "--em", "--out", dir("em")});
  REQUIRE(e.code == 0);
  CHECK(load(scratch() / "em" / "em.json").contains("log_likelihood"));
}

TEST_CASE("fit-weighting records the covariate subsets") {
  auto r = run({"fit-weighting", "--data", trial(), "--bootstrap", "2", "--xpi", "age_std,male", "--xc", "age_std",
                "--out", dir("w")});
  REQUIRE(r.code == 0);
  for (const char* f : {"estimate.json", "curves.csv", "smd.csv", "profiles.json", "survival.svg", "spce.svg"})
    CHECK(fs::exists(scratch() / "w" / f));
  json m = load(scratch() / "w" / "manifest.json");
  CHECK(m["config"]["options"]["xpi"] == json::array({"age_std", "male"}));
  CHECK(m["config"]["options"]["xc"] == json::array({"age_std"}));
  json est = load(scratch() / "w" / "estimate.json");
  CHECK(est["covariate_sets"]["xpi"] == json::array({"age_std", "male"}));
}

TEST_CASE("sensitivity: zeta 0 reproduces the benchmark, out-of-range zeta is rejected") {
  REQUIRE(run({"fit-weighting", "--data", trial(), "--bootstrap", "0", "--out", dir("bench")}).code == 0);
  REQUIRE(run({"sensitivity", "--data", trial(), "--zeta", "0,0.1", "--bootstrap", "0", "--out", dir("zeta")}).code ==
          0);
  json sweep = load(scratch() / "zeta" / "sweep.json");
  json est = load(scratch() / "bench" / "estimate.json");
  REQUIRE(sweep["points"].size() == 2);
  CHECK(sweep["points"][0]["estimate"]["spce"] == est["spce"]);

  auto bad = run({"sensitivity", "--data", trial(), "--zeta", "0.999", "--out", dir("zeta_bad")});
  CHECK(bad.code == 1);
  json err = json::parse(bad.err);
  CHECK(err["error"]["command"] == "sensitivity");
  CHECK(err["error"]["message"].get<std::string>().find("zeta") != std::string::npos);
  CHECK_FALSE(fs::exists(scratch() / "zeta_bad"));
}

TEST_CASE("report is deterministic and covers both methods") {
  REQUIRE(run({"fit-weighting", "--data", trial(), "--bootstrap", "0", "--out", dir("rw")}).code == 0);
  REQUIRE(run({"fit-mixture", "--data", trial(), "--chains", "1", "--iters", "10", "--out", dir("rm")}).code == 0);
  REQUIRE(run({"report", dir("rw"), dir("rm"), "--out", dir("report1.md")}).code == 0);
  REQUIRE(run({"report", dir("rw"), dir("rm"), "--out", dir("report2.md")}).code == 0);
  std::string text = spce::read_text(dir("report1.md"));
  CHECK(text.find("weighting") != std::string::npos);
  CHECK(text.find("Bayesian mixture") != std::string::npos);
  CHECK(text == spce::read_text(dir("report2.md")));

  auto missing = run({"report", dir("rw"), dir("nowhere"), "--out", dir("report3.md")});
  CHECK(missing.code == 1);
  json err = json::parse(missing.err);
  CHECK(err["error"]["kind"] == "missing_input");
  CHECK(err["error"]["message"].get<std::string>().find("nowhere") != std::string::npos);
}

TEST_CASE("rerun reproduces outputs bitwise") {
  REQUIRE(run({"fit-weighting", "--data", trial(), "--bootstrap", "3", "--seed", "4", "--out", dir("orig")}).code ==
          0);
  auto r = run({"rerun", dir("orig") + "/manifest.json", "--out", dir("again"), "--check"});
  CHECK(r.code == 0);
  CHECK(spce::sha256_file(dir("orig") + "/curves.csv") == spce::sha256_file(dir("again") + "/curves.csv"));
}

TEST_CASE("errors are JSON on stderr with a nonzero exit code") {
  auto usage = run({"fit-weighting"});
  CHECK(usage.code == 2);
  auto missing = run({"fit-mixture", "--data", trial(), "--iters", "10", "--burnin", "20", "--out", dir("bad_mix")});
  CHECK(missing.code == 1);
  json err = json::parse(missing.err);
  CHECK(err["error"]["command"] == "fit-mixture");
  CHECK_FALSE(err["error"]["kind"].get<std::string>().empty());
  CHECK(run({"--help"}).code == 0);
}
