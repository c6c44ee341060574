#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "diffhybrid/io.hpp"

using namespace diffhybrid;
namespace fs = std::filesystem;

namespace {
fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("diffhybrid_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string config_error(const std::string& text) {
  try {
    (void)io::parse_config(text, "cfg.json");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}
}  // namespace

TEST(Numbers, RoundTrip) {
  for (double x : {0.0, -0.0, 0.1, 1.0 / 3.0, 2.8e-4, -1e300, 5e-324}) {
    EXPECT_EQ(io::parse_double(io::format_double(x), "t"), x);
  }
  EXPECT_TRUE(std::isnan(io::parse_double(io::format_double(std::nan("")), "t")));
  EXPECT_EQ(io::parse_double("-inf", "t"), -std::numeric_limits<double>::infinity());
  EXPECT_THROW(io::parse_double("1.5x", "t"), IoError);
  EXPECT_EQ(io::hex64(0xabcULL), "0000000000000abc");
  EXPECT_EQ(io::fnv1a64(""), 0xcbf29ce484222325ULL);
}

TEST(Config, DefaultsAndOverrides) {
  const auto c = io::parse_config(R"({
  "system": {"kind": "pendulum", "integrator": "rk4", "hidden": [4, 4]},
  "grid": {"dt": 0.05, "steps": 40},
  "train": {"members": 3, "epochs": 20, "seed": 9},
  "data": {"observe_variables": [1], "observe_windows": [[0.0, 1.0]]}
})");
  EXPECT_EQ(c.system.integrator, Integrator::rk4);
  EXPECT_EQ(c.system.mlp.hidden, (std::vector<std::size_t>{4, 4}));
  EXPECT_DOUBLE_EQ(c.system.grid.dt, 0.05);
  EXPECT_EQ(c.steps, 40u);
  EXPECT_EQ(c.train.members, 3u);
  EXPECT_EQ(c.train.rank, TrainConfig{}.rank);
  EXPECT_EQ(c.data.observe.variables, (std::vector<std::size_t>{1}));
  EXPECT_EQ(c.data.noise, (std::vector<double>{0.3, 0.6}));
  EXPECT_EQ(c.hash.size(), 16u);

  const auto rd = io::parse_config(R"({"system": {"kind": "reaction_diffusion"},
    "grid": {"n_x": 7, "n_y": 5, "l_x": 2.0, "dt": 0.01, "steps": 10}})");
  EXPECT_TRUE(rd.system.is_grid());
  EXPECT_DOUBLE_EQ(rd.system.grid.dx, 2.0 / 6);
  EXPECT_DOUBLE_EQ(rd.system.grid.dy, 0.25);
  EXPECT_EQ(rd.system.layout().size(), 1286u);
}

TEST(Config, HashCoversSystemAndGridOnly) {
  const std::string a = R"({"system": {"kind": "pendulum"}, "grid": {"dt": 0.1, "steps": 10}, "train": {"epochs": 5}})";
  const std::string b = R"({"grid": {"steps": 10, "dt": 0.1},
    "system": {"kind": "pendulum"}, "train": {"epochs": 7}})";
  const std::string c = R"({"system": {"kind": "pendulum"}, "grid": {"dt": 0.2, "steps": 10}})";
  EXPECT_EQ(io::parse_config(a).hash, io::parse_config(b).hash);
  EXPECT_NE(io::parse_config(a).hash, io::parse_config(c).hash);
}

TEST(Config, Diagnostics) {
  const std::string bad_type = R"({
  "system": {"kind": "pendulum"},
  "grid": {"dt": 0.1, "steps": 10},
  "train": {
    "epochs": -4
  }
})";
  const std::string e1 = config_error(bad_type);
  EXPECT_NE(e1.find("cfg.json:5:"), std::string::npos) << e1;
  EXPECT_NE(e1.find("'train.epochs'"), std::string::npos) << e1;

  const std::string e2 = config_error(R"({"system": {"kind": "pendulum"},
  "grid": {"dt": 0.1, "steps": 10, "stpes": 3}})");
  EXPECT_NE(e2.find(":2:"), std::string::npos) << e2;
  EXPECT_NE(e2.find("'grid.stpes' is not a known field"), std::string::npos) << e2;

  const std::string e3 = config_error("{\n  \"system\": {\"kind\": \"pendulum\",}\n}");
  EXPECT_NE(e3.find("cfg.json:2: syntax error"), std::string::npos) << e3;

  EXPECT_NE(config_error(R"({"system": {"kind": "heat"}, "grid": {"steps": 3, "dt": 0.1}})").find("system.kind"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"system": {"kind": "pendulum"}, "grid": {"steps": 3, "dt": 0.1}, "extra": {}})")
                .find("'extra' is not a known section"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"system": {"kind": "pendulum"}, "grid": {"steps": 3, "dt": 0.1},
    "data": {"observe_windows": [[2.0, 1.0]]}})").find("data.observe_windows"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"system": {"kind": "pendulum"}, "grid": {"steps": 3, "dt": 0}})"),
            "");
}

TEST(Config, LoadMissingFileIsIoError) {
  EXPECT_THROW(io::load_config("/nonexistent/diffhybrid.json"), IoError);
}

TEST(Series, RoundTrip) {
  GridSpec g;
  g.dt = 0.1;
  g.n_v = 2;
  const std::vector<Observation> rows{{0, 0, 0, 0.25}, {0, 1, 0, 15.0}, {3, 1, 0, -1.0 / 3.0}};
  const std::string text = io::series_csv(g, rows);
  EXPECT_EQ(text.substr(0, 12), "t,var,value\n");
  const auto back = io::parse_series_csv(text, g, "s.csv");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[2].frame, 3u);
  EXPECT_EQ(back[2].value, -1.0 / 3.0);
  EXPECT_THROW(io::parse_series_csv("t,var,value\n0.05,0,1\n", g, "s.csv"), IoError);
  EXPECT_THROW(io::parse_series_csv("time,var,value\n", g, "s.csv"), IoError);
  EXPECT_THROW(io::parse_series_csv("t,var,value\n0.1,2,1\n", g, "s.csv"), IoError);
}

TEST(Field, RoundTripWithMask) {
  const fs::path dir = scratch("field");
  GridSpec g;
  g.n_x = 4;
  g.n_y = 3;
  g.n_v = 2;
  g.dt = 0.02;
  g.dx = 1.0 / 3;
  g.dy = 0.5;
  Dataset d{g, {{0, 1, 5, 0.5}, {2, 0, 11, -2.0}}};
  io::write_field(dir / "data.json", g, 3, io::masked_values(d, 3), "abc");
  const io::FieldFile f = io::read_field(dir / "data.json");
  EXPECT_EQ(f.frames, 3u);
  EXPECT_EQ(f.grid.n_t, 2u);
  EXPECT_EQ(f.grid.n_x, 4u);
  EXPECT_EQ(f.hash, "abc");
  EXPECT_EQ(fs::file_size(dir / "data.bin"), 3u * 2 * 12 * 8);
  const Dataset back = io::from_masked(f);
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(back.entries[1].frame, 2u);
  EXPECT_EQ(back.entries[1].point, 11u);
  EXPECT_EQ(back.entries[1].value, -2.0);
  const auto m = io::read_json(dir / "data.json");
  EXPECT_EQ(m["layout"], "t,var,y,x");
  EXPECT_THROW(io::write_field(dir / "x.json", g, 4, io::masked_values(d, 3), ""), IoError);
  fs::resize_file(dir / "data.bin", 100);
  EXPECT_THROW(io::read_field(dir / "data.json"), IoError);
}

TEST(Checkpoint, RoundTrip) {
  const fs::path dir = scratch("ckpt");
  SwagStats s(3, 2);
  s.collect(std::vector<double>{1.0, 2.0, 3.0});
  s.collect(std::vector<double>{1.5, 2.5, 2.0});
  s.collect(std::vector<double>{0.1, -1.0, 7.0});
  io::Checkpoint c{2, true, "", {0.1, -1.0, 7.0}, s};
  io::write_checkpoint(dir, c, "h");
  const io::Checkpoint r = io::read_checkpoint(dir / "member_2.json");
  EXPECT_TRUE(r.ok);
  EXPECT_EQ(r.final_params, c.final_params);
  EXPECT_EQ(r.swag.mean(), s.mean());
  EXPECT_EQ(r.swag.sq_mean(), s.sq_mean());
  EXPECT_EQ(r.swag.deviations(), s.deviations());
  EXPECT_EQ(r.swag.samples(), 3u);
  EXPECT_EQ(r.swag.rank(), 2u);

  io::Checkpoint failed{0, false, "member 0 aborted", {1.0}, {}};
  io::write_checkpoint(dir, failed, "h");
  const io::Checkpoint rf = io::read_checkpoint(dir / "member_0.json");
  EXPECT_FALSE(rf.ok);
  EXPECT_EQ(rf.error, "member 0 aborted");
  EXPECT_THROW(io::read_checkpoint(dir / "member_9.json"), IoError);
}

TEST(PredictionTable, TotalIsSumAndRoundTrips) {
  Prediction p;
  p.mean = {{Array::row({1.0, 2.0})}, {Array::row({0.5, 0.25})}};
  p.aleatoric = {{Array::row({0.1, 0.2})}, {Array::row({0.3, 1.0 / 3.0})}};
  p.epistemic = {{Array::row({0.0, 0.7})}, {Array::row({1e-9, 2.0})}};
  const std::string text = io::prediction_csv(p, 0.1);
  const auto rows = io::parse_prediction_csv(text, 0.1, "p.csv");
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) EXPECT_EQ(r.total, r.aleatoric + r.epistemic);
  EXPECT_EQ(rows[3].frame, 1u);
  EXPECT_EQ(rows[3].point, 1u);
  EXPECT_EQ(rows[3].aleatoric, 1.0 / 3.0);
  EXPECT_THROW(io::parse_prediction_csv("t,var\n", 0.1, "p.csv"), IoError);
}
