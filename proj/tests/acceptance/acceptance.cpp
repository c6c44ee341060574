// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "diffhybrid/diffhybrid.hpp"

using namespace diffhybrid;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

const fs::path kConfigs = DIFFHYBRID_CONFIGS;
const fs::path kWork = fs::temp_directory_path() / "diffhybrid_acceptance";

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

fs::path fresh(const std::string& name) {
  const fs::path p = kWork / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------
// 1

Verdict gradient_audit() {
  const auto t0 = Clock::now();
  const io::ExperimentConfig cfg = io::load_config(kConfigs / "pendulum_gradcheck.json");
  const GradcheckOutcome g = run_gradcheck(cfg, cfg.train.seed);
  const double secs = seconds_since(t0);
  const ParamLayout layout = cfg.system.layout();
  bool covered = g.report.n_params == layout.size() && cfg.gradcheck.steps == 10;
  std::string segs;
  for (const auto& s : layout.segments()) {
    if (s.length == 0) continue;
    covered = covered && g.summary["segments"].contains(s.name);
    segs += " " + s.name + "=" + std::to_string(s.length);
  }
  Verdict v;
  v.pass = covered && g.report.max_rel_error < 1e-6 && secs < 60.0;
  v.detail = "n_params=" + std::to_string(g.report.n_params) + " (" + segs.substr(1) + ")" +
             " max_rel_error=" + fmt("%.3g", g.report.max_rel_error) + " runtime=" + fmt("%.1fs", secs);
  return v;
}

// ---------------------------------------------------------------------------
// 2

Verdict unscented_accuracy() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-2.0, 2.0), uv(0.0, 3.0);
  double affine_worst = 0.0;
  for (std::size_t l : {1u, 2u, 4u}) {
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t k = 1 + trial % 3;
      std::vector<double> a(k * l), b(k), mu(l), var(l);
      for (double& x : a) x = u(rng);
      for (double& x : b) x = u(rng);
      for (std::size_t i = 0; i < l; ++i) {
        mu[i] = u(rng);
        var[i] = uv(rng);
      }
      const auto r = ut_propagate(
          [&](const std::vector<double>& x) {
            std::vector<double> y(b);
            for (std::size_t i = 0; i < k; ++i)
              for (std::size_t j = 0; j < l; ++j) y[i] += a[i * l + j] * x[j];
            return y;
          },
          mu, var);
      for (std::size_t i = 0; i < k; ++i) {
        double m = b[i], s = 0.0;
        for (std::size_t j = 0; j < l; ++j) {
          m += a[i * l + j] * mu[j];
          s += a[i * l + j] * a[i * l + j] * var[j];
        }
        affine_worst = std::max({affine_worst, std::abs(r.mean[i] - m), std::abs(r.var[i] - s)});
      }
    }
  }

  struct Fn {
    const char* name;
    double (*f)(double);
  };
  const Fn fns[] = {{"sin", [](double x) { return std::sin(x); }},
                    {"exp", [](double x) { return std::exp(x); }},
                    {"cube", [](double x) { return x * x * x; }}};
  constexpr int n = 1000000;
  std::normal_distribution<double> z(0.0, 1.0);
  int cases = 0, failed = 0;
  std::string failures;
  for (const auto& fn : fns) {
    for (double sigma : {0.1, 0.2, 0.3}) {
      for (double mu : {-1.0, 0.0, 1.0}) {
        double s1 = 0.0, s2 = 0.0;
        for (int i = 0; i < n; ++i) {
          const double y = fn.f(mu + sigma * z(rng));
          s1 += y;
          s2 += y * y;
        }
        const double m = s1 / n, v = s2 / n - m * m;
        const auto r = ut_propagate([&](const std::vector<double>& x) { return std::vector<double>{fn.f(x[0])}; },
                                    std::vector<double>{mu}, std::vector<double>{sigma * sigma});
        const double se = std::sqrt(v / n);
        const double mean_se = std::abs(r.mean[0] - m) / se;
        const double var_rel = std::abs(r.var[0] - v) / v;
        ++cases;
        if (!(mean_se <= 3.0 && var_rel <= 0.05)) {
          ++failed;
          failures += std::string(" ") + fn.name + "(mu=" + fmt("%g", mu) + ",sd=" + fmt("%g", sigma) +
                      "):" + fmt("%.1fSE/", mean_se) + fmt("%.1f%%", 100.0 * var_rel);
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = affine_worst <= 1e-12 && failed == 0 && secs < 120.0;
  v.detail = "affine max error=" + fmt("%.2g", affine_worst) + "; MC " + std::to_string(cases - failed) + "/" +
             std::to_string(cases) + " within tolerance" + (failed ? "; outside:" + failures : "") +
             "; runtime=" + fmt("%.1fs", secs);
  return v;
}

// ---------------------------------------------------------------------------
// 3

Verdict stencil_oracle() {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    GridSpec g;
    g.n_x = g.n_y = 5;
    g.dx = 0.05 + 0.5 * std::abs(u(rng));
    g.dy = 0.05 + 0.5 * std::abs(u(rng));
    Field f = make_field(1, 25);
    for (std::size_t p = 0; p < 25; ++p) {
      f.mean[0][p] = u(rng);
      f.var[0][p] = std::abs(u(rng));
    }
    const Field out = laplacian(f, g);
    const double cx = 1.0 / (g.dx * g.dx), cy = 1.0 / (g.dy * g.dy);
    auto point = [&](std::size_t x, std::size_t y) {
      return make_field(1, 1, f.mean[0][g.index(x, y)], f.var[0][g.index(x, y)]);
    };
    for (std::size_t y = 1; y < 4; ++y)
      for (std::size_t x = 1; x < 4; ++x) {
        const Field e = point(x + 1, y), w = point(x - 1, y), c = point(x, y), nn = point(x, y + 1),
                    s = point(x, y - 1);
        const Field ref =
            combine_linear<Array>({{cx, &e}, {cx, &w}, {-2 * cx, &c}, {cy, &nn}, {cy, &s}, {-2 * cy, &c}});
        worst = std::max(worst, std::abs(out.var[0][g.index(x, y)] - ref.var[0][0]) / std::max(1.0, ref.var[0][0]));
      }
  }
  return {worst <= 1e-12, "max variance deviation=" + fmt("%.2g", worst) + " over 50 random 5x5 fields"};
}

// ---------------------------------------------------------------------------
// 4

Verdict deterministic_reduction() {
  const double dt = 0.01;
  SystemSpec spec = SystemSpec::pendulum(dt);
  spec.surrogate = Surrogate::exact;
  spec.integrator = Integrator::rk4;
  const std::vector<double> theta{-1000.0, -1000.0};  // exp(-1000) == 0
  const double x0[2] = {0.0, 15.0};
  const auto frames = rollout(spec, std::span<const double>(theta), {Array::row({x0[0]}), Array::row({x0[1]})}, 3000);

  double x = x0[0], p = x0[1], worst = 0.0, drift = 0.0, var_max = 0.0;
  auto energy = [](double a, double b) { return 0.5 * b * b - std::cos(a); };
  const double e0 = energy(x, p);
  for (std::size_t k = 1; k <= 3000; ++k) {
    const double k1x = p, k1p = -std::sin(x);
    const double k2x = p + 0.5 * dt * k1p, k2p = -std::sin(x + 0.5 * dt * k1x);
    const double k3x = p + 0.5 * dt * k2p, k3p = -std::sin(x + 0.5 * dt * k2x);
    const double k4x = p + dt * k3p, k4p = -std::sin(x + dt * k3x);
    x += dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x);
    p += dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p);
    worst = std::max({worst, std::abs(frames[k].mean[0][0] - x), std::abs(frames[k].mean[1][0] - p)});
    var_max = std::max({var_max, frames[k].var[0][0], frames[k].var[1][0]});
    drift = std::max(drift, std::abs(energy(frames[k].mean[0][0], frames[k].mean[1][0]) - e0) / std::abs(e0));
  }
  return {worst <= 1e-9 && drift < 1e-4 && var_max == 0.0,
          "max per-step deviation=" + fmt("%.2g", worst) + " relative energy drift=" + fmt("%.2g", drift) +
              " over 30 s"};
}

// ---------------------------------------------------------------------------
// 5

Verdict swag_sampler() {
  const auto t0 = Clock::now();
  constexpr std::size_t d = 10;
  std::mt19937_64 gen(55);
  std::normal_distribution<double> n01(0.0, 1.0);
  SwagStats s(d, 6);
  for (int it = 0; it < 12; ++it) {
    std::vector<double> th(d);
    for (std::size_t i = 0; i < d; ++i) th[i] = 0.3 * i + (0.2 + 0.1 * i) * n01(gen) + 0.05 * it * (i % 3);
    s.collect(th);
  }
  const double k = static_cast<double>(s.columns());
  const auto diag = s.diag_variance();
  std::vector<double> target(d * d);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) {
      double dd = 0.0;
      for (const auto& c : s.deviations()) dd += c[a] * c[b];
      target[a * d + b] = 0.5 * ((a == b ? diag[a] : 0.0) + dd / (k - 1.0));
    }
  constexpr int draws = 100000;
  std::mt19937_64 rng(56);
  std::vector<double> s1(d, 0.0), s2(d * d, 0.0);
  for (int i = 0; i < draws; ++i) {
    const auto x = s.sample(rng);
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = x[a] - s.mean()[a];
      s1[a] += xa;
      for (std::size_t b = 0; b < d; ++b) s2[a * d + b] += xa * (x[b] - s.mean()[b]);
    }
  }
  double mean_worst = 0.0, cov_worst = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    const double ma = s1[a] / draws;
    mean_worst = std::max(mean_worst, std::abs(ma) / std::sqrt(target[a * d + a] / draws));
    for (std::size_t b = 0; b < d; ++b) {
      const double c = s2[a * d + b] / draws - ma * s1[b] / draws;
      const double scale = std::sqrt(target[a * d + a] * target[b * d + b]);
      cov_worst = std::max(cov_worst, std::abs(c - target[a * d + b]) / scale);
    }
  }
  const double secs = seconds_since(t0);
  return {mean_worst <= 3.0 && cov_worst <= 0.02 && secs < 60.0,
          "mean max " + fmt("%.2f", mean_worst) + " SE; covariance max deviation " + fmt("%.2f%%", 100 * cov_worst) +
              " of sqrt(C_aa C_bb); runtime=" + fmt("%.1fs", secs)};
}

// ---------------------------------------------------------------------------
// desk runs

struct DeskRun {
  io::ExperimentConfig cfg;
  fs::path data, run, pred;
  json metrics;
  std::vector<io::PredictionRow> rows;
  double train_seconds = 0.0, total_seconds = 0.0;
};

DeskRun desk_run(const std::string& config, const std::string& name) {
  DeskRun d;
  const auto t0 = Clock::now();
  d.cfg = io::load_config(kConfigs / config);
  const fs::path root = fresh(name);
  d.data = root / "data";
  d.run = root / "run";
  d.pred = root / "pred";
  cmd_generate(d.cfg, d.data);
  const auto t1 = Clock::now();
  cmd_train(d.cfg, d.data, d.run);
  d.train_seconds = seconds_since(t1);
  cmd_predict(d.run, {}, d.pred);
  d.metrics = cmd_evaluate(d.pred, d.data, root / "metrics.json");
  d.rows = io::parse_prediction_csv(io::read_text(d.pred / "prediction.csv"), d.cfg.system.grid.dt, "prediction");
  d.total_seconds = seconds_since(t0);
  return d;
}

double mean_epistemic(const DeskRun& d, std::size_t window, std::size_t var) {
  return d.metrics["windows"][window]["variables"][var]["mean_epistemic"].get<double>();
}

Verdict case_one_noise(const DeskRun& d) {
  const double dt = d.cfg.system.grid.dt;
  double sd_sum[2] = {0.0, 0.0};
  std::size_t n[2] = {0, 0};
  for (const auto& r : d.rows) {
    if (static_cast<double>(r.frame) * dt > 20.0 + 1e-9) continue;
    sd_sum[r.var] += std::sqrt(r.aleatoric);
    ++n[r.var];
  }
  bool ok = d.total_seconds < 900.0;
  std::string detail;
  for (std::size_t v = 0; v < 2; ++v) {
    const double sd = sd_sum[v] / static_cast<double>(n[v]);
    const double injected = d.cfg.data.noise[v];
    const double rmse = d.metrics["windows"][0]["variables"][v]["rmse"].get<double>();
    ok = ok && std::abs(sd - injected) <= 0.3 * injected && rmse <= injected;
    detail += "x" + std::to_string(v + 1) + ": aleatoric sd " + fmt("%.3f", sd) + " vs " + fmt("%.2f", injected) +
              ", rmse " + fmt("%.3f", rmse) + "; ";
  }
  return {ok, detail + "runtime=" + fmt("%.0fs", d.total_seconds)};
}

Verdict epistemic_growth(const DeskRun& d) {
  bool ok = true;
  std::string detail;
  for (std::size_t v = 0; v < 2; ++v) {
    const double train = mean_epistemic(d, 0, v), fore = mean_epistemic(d, 1, v);
    ok = ok && fore > train;
    detail += "x" + std::to_string(v + 1) + ": " + fmt("%.3g", train) + " -> " + fmt("%.3g", fore) + "; ";
  }
  return {ok, "mean epistemic variance [0,20] -> (20,30]: " + detail.substr(0, detail.size() - 2)};
}

Verdict case_three_asymmetry(const DeskRun& d) {
  double e[2] = {0.0, 0.0};
  std::size_t n[2] = {0, 0};
  for (const auto& r : d.rows) {
    e[r.var] += r.epistemic;
    ++n[r.var];
  }
  const double e1 = e[0] / n[0], e2 = e[1] / n[1];
  return {e1 >= 2.0 * e2, "time-averaged epistemic variance x1=" + fmt("%.3g", e1) + " x2=" + fmt("%.3g", e2) +
                              " ratio=" + fmt("%.2f", e1 / e2) + "; runtime=" + fmt("%.0fs", d.total_seconds)};
}

Verdict rd_forecast(const DeskRun& d) {
  const json& pooled = d.metrics["windows"][1]["pooled"];
  const bool defined = !pooled["spearman"].is_null();
  const double rho = defined ? pooled["spearman"].get<double>() : std::nan("");
  return {defined && rho >= 0.3 && d.total_seconds < 1800.0,
          "forecast window [" + fmt("%g", d.metrics["windows"][1]["start"].get<double>()) + ", " +
              fmt("%g", d.metrics["windows"][1]["end"].get<double>()) + "] s, " +
              std::to_string(pooled["count"].get<std::size_t>()) + " points, spearman=" + fmt("%.3f", rho) +
              "; runtime=" + fmt("%.0fs", d.total_seconds)};
}

Verdict identifiability() {
  const auto t0 = Clock::now();
  const io::ExperimentConfig cfg = io::load_config(kConfigs / "rd_identifiability.json");
  const fs::path root = fresh("identifiability");
  cmd_generate(cfg, root / "data");
  cmd_train(cfg, root / "data", root / "run");
  std::istringstream in(io::read_text(root / "run" / "coefficients.csv"));
  std::string line;
  std::getline(in, line);
  std::map<std::size_t, CoefficientRecord> last;
  while (std::getline(in, line)) {
    std::vector<std::string> c;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) c.push_back(cell);
    CoefficientRecord r;
    r.epoch = std::stoul(c[0]);
    r.d[0] = io::parse_double(c[2], "coefficients");
    r.d[1] = io::parse_double(c[3], "coefficients");
    r.d_std[0] = io::parse_double(c[4], "coefficients");
    r.d_std[1] = io::parse_double(c[5], "coefficients");
    if (r.epoch + 1 == cfg.train.epochs) last[std::stoul(c[1])] = r;
  }
  std::vector<CoefficientRecord> finals;
  for (const auto& [m, r] : last) finals.push_back(r);
  if (finals.empty()) return {false, "no final-epoch coefficients"};
  const CoefficientEstimate e = ensemble_coefficients(finals);
  bool ok = true;
  std::string detail;
  for (std::size_t i = 0; i < 2; ++i) {
    const double truth = cfg.data.truth_diffusion[i];
    ok = ok && std::abs(truth - e.mean[i]) <= 3.0 * e.std[i];
    detail += "D" + std::to_string(i + 1) + "=" + fmt("%.3e", e.mean[i]) + " +- " + fmt("%.2e", e.std[i]) +
              " (truth " + fmt("%.1e", truth) + "); ";
  }
  return {ok, detail + std::to_string(finals.size()) + " members; runtime=" + fmt("%.0fs", seconds_since(t0))};
}

Verdict variance_identity(const std::vector<const DeskRun*>& runs) {
  std::size_t rows = 0;
  double worst = 0.0;
  for (const DeskRun* d : runs) {
    for (const auto& r : d->rows) {
      worst = std::max(worst, std::abs(r.total - (r.aleatoric + r.epistemic)));
      ++rows;
    }
  }
  return {worst <= 1e-12 && rows > 0, std::to_string(rows) + " rows, max |total - (aleatoric + epistemic)|=" +
                                          fmt("%.2g", worst)};
}

// ---------------------------------------------------------------------------
// 12

int cli(const std::string& args) {
  const std::string cmd = std::string(DIFFHYBRID_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

bool same_tree(const fs::path& a, const fs::path& b, std::size_t& compared) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || io::read_text(e.path()) != io::read_text(other)) return false;
    ++files;
  }
  compared += files;
  std::size_t other_files = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) other_files += e.is_regular_file();
  return other_files == files;
}

Verdict reproducibility() {
  std::size_t files = 0;
  std::string detail;
  bool ok = true;
  for (const char* config : {"pendulum_smoke.json", "rd_smoke.json"}) {
    const std::string cfg = (kConfigs / config).string();
    fs::path roots[2];
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path r = fresh(std::string("repro_") + config + "_" + std::to_string(rep));
      roots[rep] = r;
      const std::string d = (r / "data").string(), run = (r / "run").string(), pred = (r / "pred").string();
      const int codes[] = {
          cli("generate --config " + cfg + " --out " + d),
          cli("train --config " + cfg + " --data " + d + " --run " + run),
          cli("predict --run " + run + " --out " + pred),
          cli("evaluate --run " + pred + " --data " + d + " --out " + (r / "metrics.json").string()),
          cli("gradcheck --config " + cfg + " --steps 3 --out " + (r / "gradcheck.json").string()),
      };
      for (std::size_t i = 0; i < 4; ++i) ok = ok && codes[i] == 0;
      // The gradcheck verdict itself may be 0 or 3; only its output is compared.
      ok = ok && (codes[4] == 0 || codes[4] == kExitNumerical);
    }
    const bool same = same_tree(roots[0], roots[1], files);
    ok = ok && same;
    detail += std::string(config) + (same ? " identical; " : " DIFFERS; ");
  }
  return {ok, detail + std::to_string(files) + " files compared across generate/train/predict/evaluate/gradcheck"};
}

void report(int id, const char* name, const Verdict& v, int& failures) {
  std::printf("[%s] %2d %s: %s\n", v.pass ? "PASS" : "FAIL", id, name, v.detail.c_str());
  std::fflush(stdout);
  failures += v.pass ? 0 : 1;
}

Verdict guarded(const std::function<Verdict()>& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {false, std::string("error: ") + e.what()};
  }
}

}  // namespace

int main() {
  int failures = 0;
  fs::create_directories(kWork);
  report(1, "gradient audit", guarded(gradient_audit), failures);
  report(2, "unscented transform accuracy", guarded(unscented_accuracy), failures);
  report(3, "moment stencil oracle", guarded(stencil_oracle), failures);
  report(4, "deterministic reduction", guarded(deterministic_reduction), failures);
  report(5, "SWAG sampler", guarded(swag_sampler), failures);

  DeskRun case1, case3, rd;
  bool have1 = false, have3 = false, have_rd = false;
  report(6, "pendulum case 1 noise recovery", guarded([&] {
           case1 = desk_run("pendulum_case1.json", "case1");
           have1 = true;
           return case_one_noise(case1);
         }),
         failures);
  report(7, "epistemic growth in forecast", guarded([&] {
           if (!have1) return Verdict{false, "case 1 run unavailable"};
           return epistemic_growth(case1);
         }),
         failures);
  report(8, "case 3 asymmetry", guarded([&] {
           case3 = desk_run("pendulum_case3.json", "case3");
           have3 = true;
           return case_three_asymmetry(case3);
         }),
         failures);
  report(9, "reaction-diffusion error/uncertainty correlation", guarded([&] {
           rd = desk_run("rd_forecast.json", "rd_forecast");
           have_rd = true;
           return rd_forecast(rd);
         }),
         failures);
  report(10, "diffusion coefficient identifiability", guarded(identifiability), failures);
  report(11, "variance identity", guarded([&] {
           std::vector<const DeskRun*> runs;
           if (have1) runs.push_back(&case1);
           if (have3) runs.push_back(&case3);
           if (have_rd) runs.push_back(&rd);
           return variance_identity(runs);
         }),
         failures);
  report(12, "reproducibility", guarded(reproducibility), failures);
  std::printf("%d of 12 criteria passed\n", 12 - failures);
  return failures == 0 ? 0 : 1;
}
