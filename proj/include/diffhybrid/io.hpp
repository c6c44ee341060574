#pragma once

// Experiment configs, dataset/field files, checkpoints and prediction tables.

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "diffhybrid/bayes.hpp"
#include "diffhybrid/datagen.hpp"
#include "diffhybrid/errors.hpp"
#include "diffhybrid/systems.hpp"

namespace diffhybrid::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "binary field files are written in native order, which must be little-endian");

/// Shortest decimal that round-trips; "nan", "inf", "-inf" otherwise.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double x = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw IoError(where + ": cannot parse number '" + std::string(s) + "'");
  }
  return x;
}

inline std::string hex64(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return s;
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, std::string_view text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed: " + p.string());
}

inline void write_doubles(const fs::path& p, const std::vector<double>& v) {
  write_text(p, std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)));
}

inline std::vector<double> read_doubles(const fs::path& p, std::size_t expected) {
  const std::string bytes = read_text(p);
  if (bytes.size() != expected * sizeof(double)) {
    throw IoError(p.string() + ": expected " + std::to_string(expected) + " float64 values, found " +
                  std::to_string(bytes.size()) + " bytes");
  }
  std::vector<double> v(expected);
  if (expected > 0) std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

/// Sorted keys, two-space indent, trailing newline.
inline std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

inline json read_json(const fs::path& p) {
  const std::string text = read_text(p);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(p.string() + ": malformed JSON at byte " + std::to_string(e.byte));
  }
}

// ---------------------------------------------------------------------------
// Config

struct ObserveConfig {
  std::vector<std::size_t> variables{0, 1};
  std::vector<std::pair<double, double>> windows;
  bool interior_only = false;
};

struct DataConfig {
  std::array<double, 2> initial{0.0, 15.0};  // pendulum
  std::size_t substeps = 10;
  std::vector<double> noise{0.3, 0.6};
  std::uint64_t seed = 1;
  std::array<double, 2> truth_diffusion{2.8e-4, 5.0e-2};  // reaction-diffusion
  double grf_length_scale = 0.2;
  double grf_amplitude = 1.0;
  std::array<std::uint64_t, 2> grf_seeds{11, 12};
  std::size_t fine_n_x = 0;  // 0: solve the truth on the model grid
  std::size_t fine_n_y = 0;
  std::size_t time_stride = 1;
  ObserveConfig observe;
};

struct EvaluateConfig {
  std::vector<std::pair<double, double>> windows;  // empty: training window and forecast
};

struct GradcheckConfig {
  std::size_t steps = 10;
  double step = 1e-3;
  double tolerance = 1e-6;
};

struct ExperimentConfig {
  SystemSpec system;
  std::size_t steps = 0;        // total horizon in model steps
  std::size_t train_steps = 0;  // training rollout length; 0: last observed frame
  DataConfig data;
  TrainConfig train;
  PredictConfig predict;
  std::size_t predict_steps = 0;  // 0: full horizon
  EvaluateConfig evaluate;
  GradcheckConfig gradcheck;
  std::string hash;  // over the system and grid sections
  std::string text;  // verbatim source
};

namespace detail {

inline std::size_t line_of(std::string_view text, std::size_t pos) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < pos && i < text.size(); ++i) line += text[i] == '\n';
  return line;
}

/// Typed field access with diagnostics that name the field and the line it
/// appears on.
class Reader {
 public:
  Reader(std::string source, std::string text, json root)
      : source_(std::move(source)), text_(std::move(text)), root_(std::move(root)) {}

  const json* section(const std::string& name) {
    if (!root_.contains(name)) return nullptr;
    const json& s = root_.at(name);
    if (!s.is_object()) fail(name, "", "must be an object");
    return &s;
  }

  template <class T>
  T get(const std::string& sec, const std::string& key, T fallback) {
    const json* s = section(sec);
    seen_.insert(sec + "." + key);
    if (!s || !s->contains(key)) return fallback;
    return convert<T>(sec, key, s->at(key));
  }

  template <class T>
  T require(const std::string& sec, const std::string& key) {
    const json* s = section(sec);
    seen_.insert(sec + "." + key);
    if (!s || !s->contains(key)) fail(sec, key, "is required");
    return convert<T>(sec, key, s->at(key));
  }

  bool has(const std::string& sec, const std::string& key) {
    const json* s = section(sec);
    return s && s->contains(key);
  }

  void reject_unknown(const std::set<std::string>& sections) {
    if (!root_.is_object()) throw ConfigError(source_ + ": top level must be an object");
    for (const auto& [name, value] : root_.items()) {
      if (!sections.count(name)) fail(name, "", "is not a known section");
      if (!value.is_object()) fail(name, "", "must be an object");
      for (const auto& [key, unused] : value.items()) {
        (void)unused;
        if (!seen_.count(name + "." + key)) fail(name, key, "is not a known field");
      }
    }
  }

  [[noreturn]] void fail(const std::string& sec, const std::string& key,
                         const std::string& msg) const {
    const std::string field = key.empty() ? sec : sec + "." + key;
    throw ConfigError(source_ + ":" + std::to_string(locate(sec, key)) + ": field '" + field +
                      "' " + msg);
  }

 private:
  std::size_t locate(const std::string& sec, const std::string& key) const {
    std::size_t pos = text_.find("\"" + sec + "\"");
    if (pos == std::string::npos) return 1;
    if (!key.empty()) {
      const std::size_t k = text_.find("\"" + key + "\"", pos);
      if (k != std::string::npos) pos = k;
    }
    return line_of(text_, pos);
  }

  template <class T>
  T convert(const std::string& sec, const std::string& key, const json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(sec, key, "must be true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(sec, key, "must be a string");
      return v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                     v.get<std::int64_t>() < 0)) {
        fail(sec, key, "must be a non-negative integer");
      }
      return static_cast<T>(v.get<std::uint64_t>());
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(sec, key, "must be a number");
      return v.get<double>();
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) fail(sec, key, "must be an array of numbers");
      std::vector<double> out;
      for (const auto& e : v) {
        if (!e.is_number()) fail(sec, key, "must be an array of numbers");
        out.push_back(e.get<double>());
      }
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      if (!v.is_array()) fail(sec, key, "must be an array of non-negative integers");
      std::vector<std::size_t> out;
      for (const auto& e : v) {
        if (!e.is_number_unsigned()) fail(sec, key, "must be an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<std::pair<double, double>>>) {
      const char* msg = "must be an array of [start, end] pairs with start <= end";
      if (!v.is_array()) fail(sec, key, msg);
      std::vector<std::pair<double, double>> out;
      for (const auto& e : v) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number()) {
          fail(sec, key, msg);
        }
        const double a = e[0].get<double>(), b = e[1].get<double>();
        if (!(a <= b)) fail(sec, key, msg);
        out.emplace_back(a, b);
      }
      return out;
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  std::string source_;
  std::string text_;
  json root_;
  std::set<std::string> seen_;
};

template <std::size_t N>
std::array<double, N> fixed(Reader& r, const std::string& sec, const std::string& key,
                            std::array<double, N> fallback) {
  if (!r.has(sec, key)) {
    (void)r.get<std::vector<double>>(sec, key, {});
    return fallback;
  }
  const auto v = r.get<std::vector<double>>(sec, key, {});
  if (v.size() != N) r.fail(sec, key, "must have " + std::to_string(N) + " entries");
  std::array<double, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

}  // namespace detail

/// Hash of the canonical (sorted-key, compact) system and grid sections.
inline std::string config_hash(const json& root) {
  json key = json::object();
  key["system"] = root.contains("system") ? root["system"] : json::object();
  key["grid"] = root.contains("grid") ? root["grid"] : json::object();
  return hex64(fnv1a64(key.dump()));
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "config") {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ":" + std::to_string(detail::line_of(text, e.byte ? e.byte - 1 : 0)) +
                      ": syntax error: " + e.what());
  }
  detail::Reader r(source, text, root);
  ExperimentConfig c;
  c.text = text;
  c.hash = config_hash(root);

  const std::string kind = r.require<std::string>("system", "kind");
  const std::size_t steps = r.require<std::size_t>("grid", "steps");
  const double dt = r.require<double>("grid", "dt");
  if (!(dt > 0.0)) r.fail("grid", "dt", "must be positive");
  if (steps == 0) r.fail("grid", "steps", "must be positive");
  if (kind == "pendulum") {
    c.system = SystemSpec::pendulum(dt);
  } else if (kind == "reaction_diffusion") {
    const auto nx = r.require<std::size_t>("grid", "n_x");
    const auto ny = r.require<std::size_t>("grid", "n_y");
    if (nx < 3) r.fail("grid", "n_x", "must be at least 3");
    if (ny < 3) r.fail("grid", "n_y", "must be at least 3");
    const double lx = r.get<double>("grid", "l_x", 1.0);
    const double ly = r.get<double>("grid", "l_y", 1.0);
    if (!(lx > 0.0)) r.fail("grid", "l_x", "must be positive");
    if (!(ly > 0.0)) r.fail("grid", "l_y", "must be positive");
    c.system = SystemSpec::reaction_diffusion(nx, ny, dt, lx, ly);
  } else {
    r.fail("system", "kind", "must be \"pendulum\" or \"reaction_diffusion\"");
  }
  c.steps = steps;
  c.system.grid.n_t = steps;

  SystemSpec& s = c.system;
  try {
    s.integrator = parse_integrator(r.get<std::string>("system", "integrator", "euler"));
  } catch (const ConfigError& e) {
    r.fail("system", "integrator", "must be \"euler\" or \"rk4\"");
  }
  const std::string sur = r.get<std::string>("system", "surrogate", "neural");
  if (sur == "neural") {
    s.surrogate = Surrogate::neural;
  } else if (sur == "exact") {
    s.surrogate = Surrogate::exact;
  } else {
    r.fail("system", "surrogate", "must be \"neural\" or \"exact\"");
  }
  if (r.has("system", "hidden")) {
    s.mlp.hidden = r.get<std::vector<std::size_t>>("system", "hidden", {});
    for (std::size_t w : s.mlp.hidden) {
      if (w == 0) r.fail("system", "hidden", "widths must be positive");
    }
  } else {
    (void)r.get<std::vector<std::size_t>>("system", "hidden", {});
  }
  s.ut.alpha = r.get<double>("system", "ut_alpha", s.ut.alpha);
  s.ut.beta = r.get<double>("system", "ut_beta", s.ut.beta);
  s.ut.kappa = r.get<double>("system", "ut_kappa", s.ut.kappa);
  s.train_diffusion = r.get<bool>("system", "train_diffusion", s.train_diffusion);
  s.diffusion = detail::fixed<2>(r, "system", "diffusion", s.diffusion);
  s.init_log_diffusion = r.get<double>("system", "init_log_diffusion", s.init_log_diffusion);
  s.init_variance = r.get<double>("system", "init_variance", s.init_variance);
  if (!(s.init_variance > 0.0)) r.fail("system", "init_variance", "must be positive");

  DataConfig& d = c.data;
  d.initial = detail::fixed<2>(r, "data", "initial", d.initial);
  d.substeps = r.get<std::size_t>("data", "substeps", d.substeps);
  if (d.substeps == 0) r.fail("data", "substeps", "must be positive");
  if (s.is_grid()) d.noise = {0.05, 0.05};
  d.noise = r.get<std::vector<double>>("data", "noise", d.noise);
  if (d.noise.size() != 2) r.fail("data", "noise", "must have 2 entries");
  for (double n : d.noise) {
    if (!(n >= 0.0)) r.fail("data", "noise", "entries must be non-negative");
  }
  d.seed = r.get<std::uint64_t>("data", "seed", d.seed);
  d.truth_diffusion = detail::fixed<2>(r, "data", "truth_diffusion", d.truth_diffusion);
  d.grf_length_scale = r.get<double>("data", "grf_length_scale", d.grf_length_scale);
  if (!(d.grf_length_scale > 0.0)) r.fail("data", "grf_length_scale", "must be positive");
  d.grf_amplitude = r.get<double>("data", "grf_amplitude", d.grf_amplitude);
  const auto seeds = r.get<std::vector<std::size_t>>("data", "grf_seeds", {11, 12});
  if (seeds.size() != 2) r.fail("data", "grf_seeds", "must have 2 entries");
  d.grf_seeds = {seeds[0], seeds[1]};
  d.fine_n_x = r.get<std::size_t>("data", "fine_n_x", 0);
  d.fine_n_y = r.get<std::size_t>("data", "fine_n_y", 0);
  d.time_stride = r.get<std::size_t>("data", "time_stride", 1);
  if (d.time_stride == 0) r.fail("data", "time_stride", "must be positive");
  if ((d.fine_n_x == 0) != (d.fine_n_y == 0)) {
    r.fail("data", d.fine_n_x == 0 ? "fine_n_x" : "fine_n_y", "must be set together with its pair");
  }
  if (d.fine_n_x != 0 && (d.fine_n_x < s.grid.n_x || d.fine_n_y < s.grid.n_y)) {
    r.fail("data", "fine_n_x", "fine grid must not be coarser than the model grid");
  }
  d.observe.variables = r.get<std::vector<std::size_t>>("data", "observe_variables", {0, 1});
  if (d.observe.variables.empty()) r.fail("data", "observe_variables", "must not be empty");
  for (std::size_t v : d.observe.variables) {
    if (v > 1) r.fail("data", "observe_variables", "entries must be 0 or 1");
  }
  d.observe.windows = r.get<std::vector<std::pair<double, double>>>(
      "data", "observe_windows", {{0.0, s.grid.dt * static_cast<double>(steps)}});
  d.observe.interior_only = r.get<bool>("data", "interior_only", false);

  TrainConfig& t = c.train;
  t.members = r.get<std::size_t>("train", "members", t.members);
  t.epochs = r.get<std::size_t>("train", "epochs", t.epochs);
  t.swag_start = r.get<double>("train", "swag_start", t.swag_start);
  t.lr_explore = r.get<double>("train", "lr_explore", t.lr_explore);
  t.lr_swag = r.get<double>("train", "lr_swag", t.lr_swag);
  t.rank = r.get<std::size_t>("train", "rank", t.rank);
  t.interval = r.get<std::size_t>("train", "interval", t.interval);
  t.clip_norm = r.get<double>("train", "clip_norm", t.clip_norm);
  t.seed = r.get<std::uint64_t>("train", "seed", t.seed);
  t.threads = r.get<std::size_t>("train", "threads", t.threads);
  c.train_steps = r.get<std::size_t>("train", "steps", 0);
  if (c.train_steps > steps) r.fail("train", "steps", "exceeds grid.steps");

  c.predict.draws = r.get<std::size_t>("predict", "draws", c.predict.draws);
  if (c.predict.draws == 0) r.fail("predict", "draws", "must be positive");
  c.predict.seed = r.get<std::uint64_t>("predict", "seed", c.predict.seed);
  c.predict.threads = r.get<std::size_t>("predict", "threads", c.predict.threads);
  c.predict_steps = r.get<std::size_t>("predict", "steps", 0);

  c.evaluate.windows = r.get<std::vector<std::pair<double, double>>>("evaluate", "windows", {});

  c.gradcheck.steps = r.get<std::size_t>("gradcheck", "steps", c.gradcheck.steps);
  if (c.gradcheck.steps == 0) r.fail("gradcheck", "steps", "must be positive");
  c.gradcheck.step = r.get<double>("gradcheck", "step", c.gradcheck.step);
  if (!(c.gradcheck.step > 0.0)) r.fail("gradcheck", "step", "must be positive");
  c.gradcheck.tolerance = r.get<double>("gradcheck", "tolerance", c.gradcheck.tolerance);

  r.reject_unknown({"system", "grid", "data", "train", "predict", "evaluate", "gradcheck"});
  try {
    s.validate();
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& p) {
  return parse_config(read_text(p), p.string());
}

// ---------------------------------------------------------------------------
// Time series (points() == 1): CSV `t,var,value`.

inline std::string series_csv(const GridSpec& g, const std::vector<Observation>& rows) {
  std::string out = "t,var,value\n";
  for (const auto& o : rows) {
    out += format_double(static_cast<double>(o.frame) * g.dt) + "," + std::to_string(o.var) + "," +
           format_double(o.value) + "\n";
  }
  return out;
}

inline std::vector<Observation> parse_series_csv(const std::string& text, const GridSpec& g,
                                                 const std::string& where) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "t,var,value") {
    throw IoError(where + ": expected header 't,var,value'");
  }
  std::vector<Observation> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string at = where + ":" + std::to_string(lineno);
    const auto c1 = line.find(','), c2 = line.find(',', c1 == std::string::npos ? 0 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) throw IoError(at + ": expected 3 columns");
    const double t = parse_double(std::string_view(line).substr(0, c1), at);
    const double var = parse_double(std::string_view(line).substr(c1 + 1, c2 - c1 - 1), at);
    const double value = parse_double(std::string_view(line).substr(c2 + 1), at);
    const double frame = std::round(t / g.dt);
    if (!(frame >= 0.0) || std::abs(frame * g.dt - t) > 1e-9 * std::max(1.0, std::abs(t))) {
      throw IoError(at + ": time " + format_double(t) + " is not a multiple of dt");
    }
    if (var != 0.0 && var != 1.0) throw IoError(at + ": variable index must be 0 or 1");
    rows.push_back({static_cast<std::size_t>(frame), static_cast<std::size_t>(var), 0, value});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Fields: manifest JSON + flat float64 [t][var][y][x]. NaN marks unobserved
// entries in masked datasets.

inline json field_manifest(const GridSpec& g, std::size_t frames, const std::string& bin,
                           const std::string& hash) {
  json m;
  m["n_x"] = g.n_x;
  m["n_y"] = g.n_y;
  m["n_v"] = g.n_v;
  m["n_t"] = frames;
  m["dt"] = g.dt;
  m["dx"] = g.dx;
  m["dy"] = g.dy;
  m["byte_order"] = "little";
  m["float_width"] = 64;
  m["layout"] = "t,var,y,x";
  m["file"] = bin;
  m["config_hash"] = hash;
  return m;
}

struct FieldFile {
  GridSpec grid;  // grid.n_t = frames - 1
  std::size_t frames = 0;
  std::vector<double> values;
  std::string hash;
};

inline void write_field(const fs::path& manifest, const GridSpec& g, std::size_t frames,
                        const std::vector<double>& values, const std::string& hash) {
  if (values.size() != frames * g.n_v * g.points()) {
    throw IoError("write_field: value count does not match the grid");
  }
  const std::string bin = manifest.stem().string() + ".bin";
  write_text(manifest, dump_json(field_manifest(g, frames, bin, hash)));
  write_doubles(manifest.parent_path() / bin, values);
}

inline FieldFile read_field(const fs::path& manifest) {
  const json m = read_json(manifest);
  FieldFile f;
  try {
    if (m.at("byte_order") != "little" || m.at("float_width") != 64) {
      throw IoError(manifest.string() + ": only little-endian float64 fields are supported");
    }
    f.grid.n_x = m.at("n_x").get<std::size_t>();
    f.grid.n_y = m.at("n_y").get<std::size_t>();
    f.grid.n_v = m.at("n_v").get<std::size_t>();
    f.frames = m.at("n_t").get<std::size_t>();
    f.grid.dt = m.at("dt").get<double>();
    f.grid.dx = m.at("dx").get<double>();
    f.grid.dy = m.at("dy").get<double>();
    f.hash = m.value("config_hash", "");
    f.grid.n_t = f.frames == 0 ? 0 : f.frames - 1;
    f.values = read_doubles(manifest.parent_path() / m.at("file").get<std::string>(),
                            f.frames * f.grid.n_v * f.grid.points());
  } catch (const json::exception& e) {
    throw IoError(manifest.string() + ": malformed field manifest: " + e.what());
  }
  return f;
}

inline Trajectory to_trajectory(const FieldFile& f) {
  Trajectory t;
  t.grid = f.grid;
  t.values = f.values;
  return t;
}

inline std::vector<double> masked_values(const Dataset& d, std::size_t frames) {
  std::vector<double> v(frames * d.grid.n_v * d.grid.points(), std::numeric_limits<double>::quiet_NaN());
  for (const auto& o : d.entries) v[(o.frame * d.grid.n_v + o.var) * d.grid.points() + o.point] = o.value;
  return v;
}

inline Dataset from_masked(const FieldFile& f) {
  Dataset d;
  d.grid = f.grid;
  const std::size_t np = f.grid.points();
  for (std::size_t fr = 0; fr < f.frames; ++fr) {
    for (std::size_t v = 0; v < f.grid.n_v; ++v) {
      for (std::size_t p = 0; p < np; ++p) {
        const double x = f.values[(fr * f.grid.n_v + v) * np + p];
        if (!std::isnan(x)) d.entries.push_back({fr, v, p, x});
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Checkpoints: member_<k>.json + member_<k>.bin with named float64 segments.

struct Checkpoint {
  std::size_t member = 0;
  bool ok = false;
  std::string error;
  std::vector<double> final_params;
  SwagStats swag;
};

inline std::string member_stem(std::size_t k) { return "member_" + std::to_string(k); }

inline void write_checkpoint(const fs::path& dir, const Checkpoint& c, const std::string& hash) {
  const std::string stem = member_stem(c.member);
  std::vector<double> blob;
  json segs = json::object();
  auto add = [&](const std::string& name, const std::vector<double>& v) {
    segs[name] = {{"offset", blob.size()}, {"count", v.size()}};
    blob.insert(blob.end(), v.begin(), v.end());
  };
  json m;
  m["member"] = c.member;
  m["ok"] = c.ok;
  m["error"] = c.error;
  m["config_hash"] = hash;
  m["byte_order"] = "little";
  m["float_width"] = 64;
  m["file"] = stem + ".bin";
  add("final_params", c.final_params);
  if (c.ok) {
    const SwagStats& s = c.swag;
    m["dim"] = s.mean().size();
    m["rank"] = s.rank();
    m["samples"] = s.samples();
    m["columns"] = s.columns();
    add("theta_swa", s.mean());
    add("second_moment", s.sq_mean());
    add("sigma_diag", s.diag_variance());
    std::vector<double> cols;
    for (const auto& d : s.deviations()) cols.insert(cols.end(), d.begin(), d.end());
    add("deviations", cols);
  }
  m["segments"] = segs;
  write_text(dir / (stem + ".json"), dump_json(m));
  write_doubles(dir / (stem + ".bin"), blob);
}

inline Checkpoint read_checkpoint(const fs::path& manifest) {
  const json m = read_json(manifest);
  Checkpoint c;
  try {
    c.member = m.at("member").get<std::size_t>();
    c.ok = m.at("ok").get<bool>();
    c.error = m.value("error", "");
    const json& segs = m.at("segments");
    std::size_t total = 0;
    for (const auto& [name, s] : segs.items()) {
      (void)name;
      total = std::max(total, s.at("offset").get<std::size_t>() + s.at("count").get<std::size_t>());
    }
    const std::vector<double> blob =
        read_doubles(manifest.parent_path() / m.at("file").get<std::string>(), total);
    auto seg = [&](const std::string& name) {
      const json& s = segs.at(name);
      const auto off = s.at("offset").get<std::size_t>();
      const auto n = s.at("count").get<std::size_t>();
      return std::vector<double>(blob.begin() + static_cast<std::ptrdiff_t>(off),
                                 blob.begin() + static_cast<std::ptrdiff_t>(off + n));
    };
    c.final_params = seg("final_params");
    if (c.ok) {
      const auto dim = m.at("dim").get<std::size_t>();
      const auto cols = m.at("columns").get<std::size_t>();
      const std::vector<double> flat = seg("deviations");
      if (flat.size() != dim * cols) throw IoError(manifest.string() + ": deviation block size mismatch");
      std::deque<std::vector<double>> dev;
      for (std::size_t k = 0; k < cols; ++k) {
        dev.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(k * dim),
                         flat.begin() + static_cast<std::ptrdiff_t>((k + 1) * dim));
      }
      c.swag = SwagStats::restore(m.at("rank").get<std::size_t>(), m.at("samples").get<std::size_t>(),
                                  seg("theta_swa"), seg("second_moment"), std::move(dev));
    }
  } catch (const json::exception& e) {
    throw IoError(manifest.string() + ": malformed checkpoint manifest: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(manifest.string() + ": inconsistent checkpoint: " + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Prediction table: t,var,point,mean,aleatoric,epistemic,total

struct PredictionRow {
  std::size_t frame = 0;
  std::size_t var = 0;
  std::size_t point = 0;
  double mean = 0.0, aleatoric = 0.0, epistemic = 0.0, total = 0.0;
};

inline constexpr std::string_view kPredictionHeader = "t,var,point,mean,aleatoric,epistemic,total";

inline std::string prediction_csv(const Prediction& p, double dt) {
  std::string out(kPredictionHeader);
  out += "\n";
  for (std::size_t f = 0; f < p.mean.size(); ++f) {
    const std::string t = format_double(static_cast<double>(f) * dt);
    for (std::size_t v = 0; v < p.mean[f].size(); ++v) {
      for (std::size_t i = 0; i < p.mean[f][v].size(); ++i) {
        const double a = p.aleatoric[f][v][i], e = p.epistemic[f][v][i];
        out += t + "," + std::to_string(v) + "," + std::to_string(i) + "," +
               format_double(p.mean[f][v][i]) + "," + format_double(a) + "," + format_double(e) +
               "," + format_double(a + e) + "\n";
      }
    }
  }
  return out;
}

inline std::vector<PredictionRow> parse_prediction_csv(const std::string& text, double dt,
                                                       const std::string& where) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kPredictionHeader) {
    throw IoError(where + ": expected header '" + std::string(kPredictionHeader) + "'");
  }
  std::vector<PredictionRow> rows;
  std::size_t lineno = 1;
  std::vector<std::string_view> cells;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string at = where + ":" + std::to_string(lineno);
    cells.clear();
    std::string_view rest(line);
    for (;;) {
      const auto c = rest.find(',');
      cells.push_back(rest.substr(0, c));
      if (c == std::string_view::npos) break;
      rest.remove_prefix(c + 1);
    }
    if (cells.size() != 7) throw IoError(at + ": expected 7 columns");
    PredictionRow r;
    r.frame = static_cast<std::size_t>(std::llround(parse_double(cells[0], at) / dt));
    r.var = static_cast<std::size_t>(parse_double(cells[1], at));
    r.point = static_cast<std::size_t>(parse_double(cells[2], at));
    r.mean = parse_double(cells[3], at);
    r.aleatoric = parse_double(cells[4], at);
    r.epistemic = parse_double(cells[5], at);
    r.total = parse_double(cells[6], at);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace diffhybrid::io
