#pragma once

// Batch commands behind the command-line tool. Each is a pure function of its
// config, input files and seed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "diffhybrid/autodiff.hpp"
#include "diffhybrid/bayes.hpp"
#include "diffhybrid/datagen.hpp"
#include "diffhybrid/errors.hpp"
#include "diffhybrid/io.hpp"
#include "diffhybrid/systems.hpp"

namespace diffhybrid {

namespace fs = std::filesystem;
using io::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitIo = 4;

// ---------------------------------------------------------------------------
// Metrics

/// Average ranks (ties share the mean of their positions), 0-based.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> id(x.size());
  std::iota(id.begin(), id.end(), 0);
  std::stable_sort(id.begin(), id.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < id.size();) {
    std::size_t j = i;
    while (j < id.size() && x[id[j]] == x[id[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j - 1);
    for (std::size_t k = i; k < j; ++k) r[id[k]] = avg;
    i = j;
  }
  return r;
}

/// Spearman rank correlation; empty when either input is constant or shorter
/// than 2.
inline std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ConfigError("spearman: length mismatch");
  if (a.size() < 2) return std::nullopt;
  const std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

struct WindowMetrics {
  std::size_t count = 0;
  double rmse = 0.0;
  double mean_aleatoric = 0.0;
  double mean_epistemic = 0.0;
  double coverage = 0.0;  // truth inside mean +- 3 total std
  std::optional<double> spearman;
};

/// Accumulates (truth, mean, aleatoric, epistemic) samples.
class MetricAccumulator {
 public:
  void add(double truth, double mean, double aleatoric, double epistemic) {
    const double err = mean - truth;
    const double sd = std::sqrt(aleatoric + epistemic);
    se_ += err * err;
    ale_ += aleatoric;
    epi_ += epistemic;
    inside_ += std::abs(err) <= 3.0 * sd ? 1 : 0;
    abs_err_.push_back(std::abs(err));
    sd_.push_back(sd);
  }

  WindowMetrics finish() const {
    WindowMetrics m;
    m.count = sd_.size();
    if (m.count == 0) return m;
    const double n = static_cast<double>(m.count);
    m.rmse = std::sqrt(se_ / n);
    m.mean_aleatoric = ale_ / n;
    m.mean_epistemic = epi_ / n;
    m.coverage = static_cast<double>(inside_) / n;
    m.spearman = diffhybrid::spearman(abs_err_, sd_);
    return m;
  }

 private:
  double se_ = 0.0, ale_ = 0.0, epi_ = 0.0;
  std::size_t inside_ = 0;
  std::vector<double> abs_err_, sd_;
};

inline json metrics_json(const WindowMetrics& m) {
  json j;
  j["count"] = m.count;
  j["rmse"] = m.rmse;
  j["mean_aleatoric"] = m.mean_aleatoric;
  j["mean_epistemic"] = m.mean_epistemic;
  j["coverage_3sigma"] = m.coverage;
  j["spearman"] = m.spearman ? json(*m.spearman) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Data generation

struct GeneratedData {
  Trajectory truth;
  Dataset observed;
};

inline ReactionDiffusionTruth truth_physics(const io::ExperimentConfig& cfg) {
  ReactionDiffusionTruth t;
  t.diffusion = cfg.data.truth_diffusion;
  return t;
}

/// Truth solved on the fine grid (when configured) and sampled to the model
/// grid and step.
inline Trajectory generate_truth(const io::ExperimentConfig& cfg) {
  const SystemSpec& s = cfg.system;
  const io::DataConfig& d = cfg.data;
  if (!s.is_grid()) {
    return solve_pendulum(d.initial, s.grid.dt, cfg.steps, d.substeps);
  }
  GridSpec fine = s.grid;
  if (d.fine_n_x != 0) {
    fine.n_x = d.fine_n_x;
    fine.n_y = d.fine_n_y;
    fine.dx = s.grid.dx * static_cast<double>(s.grid.n_x - 1) / static_cast<double>(fine.n_x - 1);
    fine.dy = s.grid.dy * static_cast<double>(s.grid.n_y - 1) / static_cast<double>(fine.n_y - 1);
  }
  fine.dt = s.grid.dt / static_cast<double>(d.time_stride);
  fine.n_t = cfg.steps * d.time_stride;
  const std::vector<Array> ic{grf_initial(fine, d.grf_length_scale, d.grf_amplitude, d.grf_seeds[0]),
                              grf_initial(fine, d.grf_length_scale, d.grf_amplitude, d.grf_seeds[1])};
  Trajectory tr = solve_reaction_diffusion(fine, truth_physics(cfg), ic, fine.n_t, d.substeps);
  if (d.fine_n_x == 0 && d.time_stride == 1) return tr;
  return subsample(tr, s.grid.n_x, s.grid.n_y, d.time_stride);
}

inline CaseSpec observation_case(const io::ExperimentConfig& cfg) {
  CaseSpec c;
  c.variables = cfg.data.observe.variables;
  c.windows = cfg.data.observe.windows;
  c.interior_only = cfg.data.observe.interior_only;
  return c;
}

inline GeneratedData generate_data(const io::ExperimentConfig& cfg) {
  GeneratedData g;
  g.truth = generate_truth(cfg);
  g.observed = mask_case(add_noise(g.truth, cfg.data.noise, cfg.data.seed), observation_case(cfg));
  if (g.observed.entries.empty()) throw ConfigError("data: the observation mask selects no entries");
  return g;
}

inline double observed_horizon(const io::ExperimentConfig& cfg) {
  double t = 0.0;
  for (const auto& w : cfg.data.observe.windows) t = std::max(t, w.second);
  return std::min(t, cfg.system.grid.dt * static_cast<double>(cfg.steps));
}

// ---------------------------------------------------------------------------
// generate

inline void cmd_generate(const io::ExperimentConfig& cfg, const fs::path& out) {
  const GeneratedData g = generate_data(cfg);
  fs::create_directories(out);
  json m;
  m["config_hash"] = cfg.hash;
  m["system"] = cfg.system.is_grid() ? "reaction_diffusion" : "pendulum";
  m["frames"] = g.truth.frames();
  m["observations"] = g.observed.entries.size();
  if (!cfg.system.is_grid()) {
    std::vector<Observation> all;
    for (std::size_t f = 0; f < g.truth.frames(); ++f) {
      for (std::size_t v = 0; v < 2; ++v) all.push_back({f, v, 0, g.truth.at(f, v, 0)});
    }
    io::write_text(out / "truth.csv", io::series_csv(g.truth.grid, all));
    io::write_text(out / "data.csv", io::series_csv(g.truth.grid, g.observed.entries));
    m["format"] = "series";
    m["truth"] = "truth.csv";
    m["data"] = "data.csv";
  } else {
    io::write_field(out / "truth.json", g.truth.grid, g.truth.frames(), g.truth.values, cfg.hash);
    io::write_field(out / "data.json", g.truth.grid, g.truth.frames(),
                    io::masked_values(g.observed, g.truth.frames()), cfg.hash);
    m["format"] = "field";
    m["truth"] = "truth.json";
    m["data"] = "data.json";
  }
  io::write_text(out / "manifest.json", io::dump_json(m));
  io::write_text(out / "config.json", cfg.text);
}

struct LoadedData {
  Trajectory truth;
  Dataset observed;
  std::string hash;
};

/// Reads a generate output directory and checks it against the config's grid.
inline LoadedData load_data(const fs::path& dir, const io::ExperimentConfig& cfg) {
  const json m = io::read_json(dir / "manifest.json");
  LoadedData d;
  d.hash = m.value("config_hash", "");
  if (d.hash != cfg.hash) {
    throw ConfigError("dataset " + dir.string() + " was generated for config " + d.hash +
                      ", not " + cfg.hash);
  }
  const GridSpec& g = cfg.system.grid;
  if (m.value("format", "") == "series") {
    if (cfg.system.is_grid()) throw ConfigError("dataset holds a time series but the config is a field system");
    const auto truth = io::parse_series_csv(io::read_text(dir / "truth.csv"), g, (dir / "truth.csv").string());
    d.truth.grid = g;
    d.truth.grid.n_t = cfg.steps;
    d.truth.values.assign(2 * (cfg.steps + 1), std::numeric_limits<double>::quiet_NaN());
    for (const auto& o : truth) {
      if (o.frame > cfg.steps) throw IoError("truth.csv: frame beyond grid.steps");
      d.truth.values[o.frame * 2 + o.var] = o.value;
    }
    for (double x : d.truth.values) {
      if (std::isnan(x)) throw IoError("truth.csv: missing samples");
    }
    d.observed.grid = d.truth.grid;
    d.observed.entries = io::parse_series_csv(io::read_text(dir / "data.csv"), g, (dir / "data.csv").string());
  } else {
    if (!cfg.system.is_grid()) throw ConfigError("dataset holds fields but the config is the pendulum");
    const io::FieldFile t = io::read_field(dir / "truth.json");
    const io::FieldFile o = io::read_field(dir / "data.json");
    if (t.grid.n_x != g.n_x || t.grid.n_y != g.n_y || t.frames != cfg.steps + 1 ||
        o.grid.n_x != g.n_x || o.grid.n_y != g.n_y || o.frames != t.frames) {
      throw ConfigError("dataset grid does not match the config grid");
    }
    d.truth = io::to_trajectory(t);
    d.observed = io::from_masked(o);
  }
  if (d.observed.entries.empty()) throw IoError("dataset " + dir.string() + " has no observations");
  return d;
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  std::size_t ok = 0;
  std::size_t failed = 0;
};

inline TrainSummary cmd_train(const io::ExperimentConfig& cfg, const fs::path& data_dir,
                              const fs::path& run) {
  const LoadedData data = load_data(data_dir, cfg);
  const std::size_t steps = cfg.train_steps ? cfg.train_steps : data.observed.last_frame();
  const auto results =
      train_ensemble(cfg.system, data.observed, data.truth.frame(0), std::max<std::size_t>(steps, 1), cfg.train);
  fs::create_directories(run);

  TrainSummary sum;
  std::string loss = "member,epoch,loss\n";
  std::string coef = "epoch,member,d1,d2,d1_std,d2_std\n";
  json members = json::array();
  for (const auto& r : results) {
    r.ok ? ++sum.ok : ++sum.failed;
    for (std::size_t e = 0; e < r.losses.size(); ++e) {
      loss += std::to_string(r.index) + "," + std::to_string(e) + "," + io::format_double(r.losses[e]) + "\n";
    }
    for (const auto& c : r.coefficients) {
      coef += std::to_string(c.epoch) + "," + std::to_string(r.index) + "," + io::format_double(c.d[0]) +
              "," + io::format_double(c.d[1]) + "," + io::format_double(c.d_std[0]) + "," +
              io::format_double(c.d_std[1]) + "\n";
    }
    io::Checkpoint ck;
    ck.member = r.index;
    ck.ok = r.ok;
    ck.error = r.error;
    ck.final_params = r.final_params;
    if (r.ok) ck.swag = r.swag;
    io::write_checkpoint(run, ck, cfg.hash);
    members.push_back({{"member", r.index}, {"ok", r.ok}, {"error", r.error}});
  }
  io::write_text(run / "loss_log.csv", loss);
  if (cfg.system.layout().has(kSegmentDiffusion)) io::write_text(run / "coefficients.csv", coef);
  json m;
  m["config_hash"] = cfg.hash;
  m["members"] = members;
  m["train_steps"] = steps;
  m["epochs"] = cfg.train.epochs;
  m["seed"] = cfg.train.seed;
  io::write_text(run / "run.json", io::dump_json(m));
  io::write_text(run / "config.json", cfg.text);
  if (sum.ok == 0) throw NumericalError("train: every ensemble member diverged");
  return sum;
}

// ---------------------------------------------------------------------------
// predict

/// Initial means from a file: `t,var,value` rows at t = 0 for the pendulum, a
/// field manifest (frame 0) for grids.
inline std::vector<Array> read_initial(const fs::path& p, const io::ExperimentConfig& cfg) {
  const GridSpec& g = cfg.system.grid;
  std::vector<Array> mu;
  if (!cfg.system.is_grid()) {
    const auto rows = io::parse_series_csv(io::read_text(p), g, p.string());
    std::vector<double> x(2, std::numeric_limits<double>::quiet_NaN());
    for (const auto& r : rows) {
      if (r.frame == 0) x[r.var] = r.value;
    }
    if (std::isnan(x[0]) || std::isnan(x[1])) {
      throw ConfigError(p.string() + ": initial condition needs both variables at t = 0");
    }
    return {Array::row({x[0]}), Array::row({x[1]})};
  }
  const io::FieldFile f = io::read_field(p);
  if (f.grid.n_x != g.n_x || f.grid.n_y != g.n_y || f.grid.n_v != 2 || f.frames == 0) {
    throw ConfigError(p.string() + ": initial condition is " + std::to_string(f.grid.n_x) + "x" +
                      std::to_string(f.grid.n_y) + " with " + std::to_string(f.grid.n_v) +
                      " variables; the model grid is " + std::to_string(g.n_x) + "x" +
                      std::to_string(g.n_y) + " with 2");
  }
  const Trajectory t = io::to_trajectory(f);
  return t.frame(0);
}

inline std::vector<Array> default_initial(const io::ExperimentConfig& cfg) {
  if (!cfg.system.is_grid()) {
    return {Array::row({cfg.data.initial[0]}), Array::row({cfg.data.initial[1]})};
  }
  return generate_truth(cfg).frame(0);
}

struct PredictOptions {
  std::optional<fs::path> ic;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
};

inline Prediction cmd_predict(const fs::path& run, const PredictOptions& opt, const fs::path& out) {
  const io::ExperimentConfig cfg = io::load_config(run / "config.json");
  const json rm = io::read_json(run / "run.json");
  if (rm.value("config_hash", "") != cfg.hash) throw ConfigError("run manifest hash does not match its config");
  std::vector<SwagStats> members;
  for (const auto& m : rm.at("members")) {
    const io::Checkpoint c =
        io::read_checkpoint(run / (io::member_stem(m.at("member").get<std::size_t>()) + ".json"));
    if (c.ok) members.push_back(c.swag);
  }
  if (members.empty()) throw NumericalError("predict: no usable ensemble member in " + run.string());
  const std::vector<Array> mu0 = opt.ic ? read_initial(*opt.ic, cfg) : default_initial(cfg);
  const std::size_t steps = opt.steps ? *opt.steps : (cfg.predict_steps ? cfg.predict_steps : cfg.steps);
  PredictConfig pc = cfg.predict;
  if (opt.seed) pc.seed = *opt.seed;
  const Prediction p = bma_predict(cfg.system, members, mu0, steps, pc);

  fs::create_directories(out);
  io::write_text(out / "prediction.csv", io::prediction_csv(p, cfg.system.grid.dt));
  json m;
  m["config_hash"] = cfg.hash;
  m["steps"] = steps;
  m["frames"] = p.mean.size();
  m["draws"] = p.draws;
  m["failed_draws"] = p.failed;
  m["members"] = members.size();
  m["seed"] = pc.seed;
  m["initial"] = opt.ic ? opt.ic->filename().string() : std::string("config");
  io::write_text(out / "prediction.json", io::dump_json(m));
  io::write_text(out / "config.json", cfg.text);
  return p;
}

// ---------------------------------------------------------------------------
// evaluate

inline json cmd_evaluate(const fs::path& pred, const fs::path& data_dir, const fs::path& out) {
  const io::ExperimentConfig cfg = io::load_config(pred / "config.json");
  const json pm = io::read_json(pred / "prediction.json");
  const json dm = io::read_json(data_dir / "manifest.json");
  const std::string ph = pm.value("config_hash", ""), dh = dm.value("config_hash", "");
  if (ph != cfg.hash || dh != cfg.hash) {
    throw ConfigError("evaluate: mixed config hashes (prediction " + ph + ", truth " + dh + ")");
  }
  const LoadedData data = load_data(data_dir, cfg);
  const double dt = cfg.system.grid.dt;
  const auto rows = io::parse_prediction_csv(io::read_text(pred / "prediction.csv"), dt,
                                             (pred / "prediction.csv").string());
  const std::size_t np = cfg.system.grid.points();
  for (const auto& r : rows) {
    if (r.frame >= data.truth.frames() || r.var >= 2 || r.point >= np) {
      throw IoError("evaluate: prediction frame " + std::to_string(r.frame) +
                    " has no aligned truth (truth holds " + std::to_string(data.truth.frames()) + " frames)");
    }
  }

  std::vector<std::pair<double, double>> windows = cfg.evaluate.windows;
  if (windows.empty()) {
    const double t_obs = observed_horizon(cfg);
    const double t_end = dt * static_cast<double>(cfg.steps);
    windows.emplace_back(0.0, t_obs);
    if (t_obs + dt <= t_end + 1e-9) windows.emplace_back(t_obs + dt, t_end);
  }
  json report;
  report["config_hash"] = cfg.hash;
  json wj = json::array();
  constexpr double kTol = 1e-9;
  for (const auto& [a, b] : windows) {
    MetricAccumulator per[2], pooled;
    for (const auto& r : rows) {
      const double t = static_cast<double>(r.frame) * dt;
      if (t < a - kTol || t > b + kTol) continue;
      const double truth = data.truth.at(r.frame, r.var, r.point);
      per[r.var].add(truth, r.mean, r.aleatoric, r.epistemic);
      pooled.add(truth, r.mean, r.aleatoric, r.epistemic);
    }
    json w;
    w["start"] = a;
    w["end"] = b;
    w["variables"] = json::array({metrics_json(per[0].finish()), metrics_json(per[1].finish())});
    w["pooled"] = metrics_json(pooled.finish());
    wj.push_back(w);
  }
  report["windows"] = wj;
  io::write_text(out, io::dump_json(report));
  return report;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOutcome {
  ad::GradcheckReport report;
  bool passed = false;
  json summary;
};

/// NLL of a gradcheck.steps rollout against the observations up to that step,
/// checked at the initial parameters of `seed`.
inline GradcheckOutcome run_gradcheck(const io::ExperimentConfig& cfg, std::uint64_t seed) {
  const std::size_t steps = cfg.gradcheck.steps;
  if (steps > cfg.steps) throw ConfigError("gradcheck.steps exceeds grid.steps");
  const GeneratedData g = generate_data(cfg);
  Dataset d;
  d.grid = g.observed.grid;
  for (const auto& o : g.observed.entries) {
    if (o.frame <= steps) d.entries.push_back(o);
  }
  if (d.entries.empty()) throw ConfigError("gradcheck: no observations within the rollout");
  const ObservationPlan plan(d);
  const std::vector<Array> mu0 = g.truth.frame(0);
  const ParamVector p = cfg.system.initial_params(seed);
  const SystemSpec& spec = cfg.system;
  const ad::ScalarObjective f = [&](ad::Tape&, const ad::Var& th) {
    return nll_loss(rollout(spec, th, mu0, steps), plan);
  };
  GradcheckOutcome out;
  out.report = ad::gradcheck(f, p.values, cfg.gradcheck.step);
  out.passed = out.report.max_rel_error < cfg.gradcheck.tolerance;

  json segs = json::object();
  for (const auto& s : p.layout.segments()) {
    double worst = 0.0;
    for (std::size_t i = s.offset; i < s.offset + s.length; ++i) {
      const double e = std::abs(out.report.analytic[i] - out.report.numeric[i]) /
                       (std::abs(out.report.numeric[i]) + 1e-12);
      worst = std::max(worst, e);
    }
    segs[s.name] = {{"size", s.length}, {"max_rel_error", worst}};
  }
  json& j = out.summary;
  j["config_hash"] = cfg.hash;
  j["steps"] = steps;
  j["seed"] = seed;
  j["n_params"] = out.report.n_params;
  j["max_rel_error"] = out.report.max_rel_error;
  j["worst_index"] = out.report.worst_index;
  j["tolerance"] = cfg.gradcheck.tolerance;
  j["fd_step"] = cfg.gradcheck.step;
  j["passed"] = out.passed;
  j["segments"] = segs;
  return out;
}

}  // namespace diffhybrid
