#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g_cli;
fs::path g_work;

struct CmdResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

// `snippet` is a shell fragment; occurrences of {cli} are replaced by the
// binary under test. stdout/stderr are captured through temp files.
CmdResult sh(std::string snippet, const std::string& stdin_text = "") {
  for (std::size_t pos; (pos = snippet.find("{cli}")) != std::string::npos;)
    snippet.replace(pos, 5, g_cli);
  const fs::path out = g_work / "stdout.txt";
  const fs::path err = g_work / "stderr.txt";
  const fs::path in = g_work / "stdin.txt";
  spit(in, stdin_text);
  const std::string cmd =
      "{ " + snippet + " ; } <" + in.string() + " >" + out.string() + " 2>" + err.string();
  const int rc = std::system(cmd.c_str());
  CmdResult res;
  res.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  res.out = slurp(out);
  res.err = slurp(err);
  return res;
}

double rel_err(double got, double want) { return std::abs(got - want) / std::abs(want); }

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

std::string first_line(const std::string& text) {
  return text.substr(0, text.find('\n'));
}

} // namespace

TEST_CASE("exit codes distinguish parse, input and fit failures") {
  CHECK(sh("{cli}").code == 1);              // missing subcommand
  CHECK(sh("{cli} --help").code == 0);
  CHECK(sh("{cli} flux-map --bogus-flag 1").code == 1);
  const CmdResult missing = sh("{cli} fit-s21 --in /nonexistent/file.csv --out -");
  CHECK(missing.code == 1);
  CHECK(missing.err.find("error:") != std::string::npos);

  // a featureless trace makes the circle fit fail: exit 2
  std::ostringstream flat;
  flat << "freq_hz,re,im\n";
  for (int i = 0; i < 64; ++i) flat << 8.16e9 + 1e5 * i << ",0.32,0\n";
  const fs::path path = g_work / "flat_s21.csv";
  spit(path, flat.str());
  const CmdResult res = sh("{cli} fit-s21 --in " + path.string() + " --out -");
  CHECK(res.code == 2);
  CHECK(res.err.find("no discernible circle") != std::string::npos);
}

TEST_CASE("flux-map output is deterministic with the documented header") {
  const CmdResult a = sh("{cli} flux-map --points 100 --out -");
  const CmdResult b = sh("{cli} flux-map --points 100 --out -");
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
  CHECK(first_line(a.out) == "phi,omega_c_hz,sensitivity_hz_per_phi0,g0_hz");
  CHECK(count_lines(a.out) == 101);

  const CmdResult c = sh("{cli} flux-map --points 10 --with-cooperativity --out -");
  REQUIRE(c.code == 0);
  CHECK(first_line(c.out) ==
        "phi,omega_c_hz,sensitivity_hz_per_phi0,g0_hz,kappa_hz,cooperativity");
}

TEST_CASE("simulate-s21 piped into fit-s21 recovers the builtin resonator") {
  const CmdResult res = sh("{cli} simulate-s21 --out - | {cli} fit-s21 --in - --out -");
  REQUIRE(res.code == 0);
  const json j = json::parse(res.out);
  CHECK(j.at("converged").get<bool>());
  CHECK(rel_err(j.at("f_res_hz").get<double>(), 8.1672e9) < 1e-9);
  CHECK(rel_err(j.at("q_loaded").get<double>(), 2913.0) < 1e-6);
  CHECK(rel_err(j.at("q_coupling_abs").get<double>(), 5758.0) < 1e-6);
  CHECK(std::abs(j.at("phi0").get<double>() - 0.23) < 1e-6);
  CHECK(rel_err(j.at("amp").get<double>(), 0.32) < 1e-6);
  CHECK(rel_err(j.at("q_internal_diameter").get<double>(), 5740.835058177918) < 1e-6);
  CHECK(rel_err(j.at("q_internal_simple").get<double>(), 5895.625307557118) < 1e-6);
  const double kappa_l = j.at("kappa_loaded_hz").get<double>();
  const double kappa_c = j.at("kappa_coupling_re_hz").get<double>();
  const double kappa_i = j.at("kappa_internal_hz").get<double>();
  CHECK(rel_err(kappa_c + kappa_i, kappa_l) < 1e-9);
}

TEST_CASE("spectrum chain calibrates g0 against the thermal occupation") {
  const CmdResult clean = sh(
      "{cli} simulate-spectrum --no-noise --out - | {cli} fit-spectrum --in - --out - | "
      "{cli} calibrate-g0 --in - --out -");
  REQUIRE(clean.code == 0);
  const json j = json::parse(clean.out);
  CHECK(rel_err(j.at("n_phonons").get<double>(), 7593.486979521759) < 1e-12);
  CHECK(rel_err(j.at("g0_hz").get<double>(), 48.0) < 1e-6);
  CHECK(rel_err(j.at("g0_sqrt_n_hz").get<double>(),
                48.0 * std::sqrt(7593.486979521759)) < 1e-6);
  CHECK(rel_err(j.at("omega_m_hz").get<double>(), 274383.13) < 1e-9);

  const CmdResult noisy = sh(
      "{cli} simulate-spectrum --seed 4 --out - | {cli} fit-spectrum --in - --out - | "
      "{cli} calibrate-g0 --in - --out -");
  REQUIRE(noisy.code == 0);
  const json jn = json::parse(noisy.out);
  CHECK(std::abs(jn.at("g0_hz").get<double>() - 48.0) < 15.0);
  CHECK(jn.at("g0_stderr_hz").get<double>() > 0.0);
}

TEST_CASE("backaction-sweep writes detuning and photon-number tables") {
  const CmdResult det = sh("{cli} backaction-sweep --lo -8e6 --hi 4e6 --steps 25 --out -");
  REQUIRE(det.code == 0);
  CHECK(first_line(det.out) == "detuning_hz,n_final,gamma_eff_hz,omega_shift_hz,stable");
  CHECK(count_lines(det.out) == 26);

  const CmdResult ph = sh(
      "{cli} backaction-sweep --sweep-photons --detuning -1.4e6 --photons-lo 0.01 "
      "--photons-hi 10 --steps 10 --out -");
  REQUIRE(ph.code == 0);
  CHECK(first_line(ph.out) == "n_photons,n_final,gamma_eff_hz,omega_shift_hz,stable");
  CHECK(count_lines(ph.out) == 11);
}

TEST_CASE("temp-ramp fits synthetic ramps and CSV input") {
  const CmdResult synth = sh("{cli} temp-ramp --seed 1 --out -");
  REQUIRE(synth.code == 0);
  const json j = json::parse(synth.out);
  CHECK(j.at("converged").get<bool>());
  CHECK(std::abs(j.at("g0_hz").get<double>() - 48.0) < 2.0);
  CHECK(j.at("n_points").get<int>() == 14);

  // exact CSV input recovers the generator coupling
  std::ostringstream csv;
  csv << "temperature_k,g0_sqrt_n_hz\n";
  for (double t : {0.08, 0.2, 0.4, 0.7}) {
    const double x = 1.054571817e-34 * 2.0 * M_PI * 274383.13 / (1.380649e-23 * t);
    csv.precision(17);
    csv << t << "," << 48.0 * std::sqrt(1.0 / std::expm1(x)) << "\n";
  }
  const fs::path path = g_work / "ramp.csv";
  spit(path, csv.str());
  const CmdResult file = sh("{cli} temp-ramp --in " + path.string() + " --out -");
  REQUIRE(file.code == 0);
  CHECK(rel_err(json::parse(file.out).at("g0_hz").get<double>(), 48.0) < 1e-9);
}

TEST_CASE("run-pipeline output is byte-identical across invocations") {
  const fs::path root = g_work / "mini_runs";
  const fs::path cfg = g_work / "mini_run.cfg";
  fs::remove_all(root);
  fs::create_directories(root);
  spit(cfg,
       "n_photons = 0.9\n"
       "g0_hz = 2460\n"
       "temperature_k = 0.1\n"
       "detuning_lo_hz = -5.6e6\n"
       "detuning_hi_hz = -0.4e6\n"
       "detuning_step_hz = 1e6\n"
       "n_groups = 24\n"
       "group_size = 4\n"
       "seed = 1\n"
       "f_dev_hz = 2000\n"
       "pump_freq_hz = 8.1e9\n"
       "synth_span_hz = 800\n"
       "synth_n_points = 512\n"
       "synth_enbw_hz = 0.1\n"
       "synth_n_averages = 1\n"
       "vna_span_hz = 3e7\n"
       "vna_points = 201\n"
       "vna_depth = 0.8\n");
  const CmdResult emit =
      sh("{cli} backaction-sweep --emit-run " + (root / "run01").string() +
         " --run-config " + cfg.string() + " --no-noise");
  REQUIRE(emit.code == 0);

  const fs::path out1 = g_work / "pipe_out1";
  const fs::path out2 = g_work / "pipe_out2";
  fs::remove_all(out1);
  fs::remove_all(out2);
  REQUIRE(sh("{cli} run-pipeline --in " + root.string() + " --out " + out1.string()).code == 0);
  REQUIRE(sh("{cli} run-pipeline --in " + root.string() + " --out " + out2.string()).code == 0);

  const std::string r1 = slurp(out1 / "results.json");
  const std::string r2 = slurp(out2 / "results.json");
  REQUIRE_FALSE(r1.empty());
  CHECK(r1 == r2);
  CHECK(slurp(out1 / "run01_bins.csv") == slurp(out2 / "run01_bins.csv"));
  CHECK(slurp(out1 / "run01_model.csv") == slurp(out2 / "run01_model.csv"));

  const json results = json::parse(r1);
  CHECK(results.at("schema").get<std::string>() == "fluxmech-results-1");
  REQUIRE(results.at("backaction").size() == 1);
  const json& ba = results.at("backaction")[0];
  CHECK(rel_err(ba.at("n_photons").get<double>(), 0.9) < 1e-3);
  CHECK(rel_err(ba.at("g0_hz").get<double>(), 2460.0) < 1e-3);
  CHECK(ba.at("n_rejected").get<int>() == 0);
}

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: test_cli [doctest args] <cli-path> <repo-root>\n");
    return 64;
  }
  g_cli = argv[argc - 2];
  g_work = fs::temp_directory_path() / "fluxmech_cli_test";
  fs::create_directories(g_work);
  doctest::Context ctx;
  ctx.applyCommandLine(argc - 2, argv);
  const int rc = ctx.run();
  fs::remove_all(g_work);
  return rc;
}
