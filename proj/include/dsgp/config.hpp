#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dsgp/data_pipeline.hpp"
#include "dsgp/errors.hpp"
#include "dsgp/training.hpp"

namespace dsgp {

// INI-style run configuration:
//
//   # comment
//   [section]
//   key = value
//
// Sections and keys are closed sets; anything unknown is an error so typos
// cannot silently fall back to defaults. [baseline_slice] may repeat.

struct IniSection {
  std::string name;
  std::size_t line = 0;
  std::vector<std::pair<std::string, std::string>> entries;
  std::vector<std::size_t> entry_lines;
};

inline std::vector<IniSection> parse_ini(std::istream &in, const std::string &origin) {
  std::vector<IniSection> out;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = csv::trim(raw);
    if (line.empty() || line.front() == '#' || line.front() == ';') {
      continue;
    }
    const auto where = origin + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw InvalidInput(where + ": malformed section header");
      }
      out.push_back({std::string(csv::trim(line.substr(1, line.size() - 2))), line_no, {}, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw InvalidInput(where + ": expected 'key = value'");
    }
    if (out.empty()) {
      throw InvalidInput(where + ": key outside of any section");
    }
    const auto key = std::string(csv::trim(line.substr(0, eq)));
    const auto value = std::string(csv::trim(line.substr(eq + 1)));
    if (key.empty()) {
      throw InvalidInput(where + ": empty key");
    }
    for (const auto &[k, _] : out.back().entries) {
      if (k == key) {
        throw InvalidInput(where + ": duplicate key '" + key + "'");
      }
    }
    out.back().entries.emplace_back(key, value);
    out.back().entry_lines.push_back(line_no);
  }
  return out;
}

struct BaselineSliceSpec {
  std::string path;
  std::string simulation_id;
  double age_bp = 6000.0;
};

struct GridSpec {
  double lon_min = -180.0;
  double lon_max = 180.0;
  double lat_min = -90.0;
  double lat_max = 90.0;
  double resolution = 1.0; // degrees
  std::vector<double> ages_bp{0.0};
};

struct ValidateSpec {
  std::string mode = "sweep"; // sweep | single
  std::string simulation_id = "sim";
  double held_out_age_bp = 0.0;
};

/// Synthetic corpus: gridded "simulation" slices plus scattered "pollen"
/// cores, all drawn from the prior with known hyperparameters plus noise.
struct SynthSpec {
  double lon_min = -10.0;
  double lon_max = 50.0;
  double lat_min = 35.0;
  double lat_max = 70.0;
  std::size_t grid_nx = 20;
  std::size_t grid_ny = 15;
  std::size_t num_slices = 6;
  double max_age_bp = 20000.0;
  std::string simulation_id = "sim";
  std::size_t num_pollen = 18200;
  std::size_t num_cores = 910;
  double age_resolution = 1000.0;
  std::size_t num_baseline_slices = 3;
  double baseline_age_bp = 6000.0;
  SpatialParams spatial;
  TemporalParams temporal;
  double noise_sigma = 1.6;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::size_t threads = 1;
  std::string observations; // raw observations CSV
  std::size_t baseline_max_nodes = 5000;
  std::vector<BaselineSliceSpec> baseline_slices;
  TrainConfig train;
  ValidateSpec validate;
  GridSpec grid;
  SynthSpec synth;

  /// Text covering everything that determines a fit, for the checkpoint hash.
  std::string fit_fingerprint() const {
    std::ostringstream os;
    const auto f = [](double v) { return csv::format_double(v); };
    os << "seed=" << seed << ";epochs=" << train.epochs << ";batch=" << train.batch_size
       << ";ms=" << train.num_spatial_inducing << ";mt=" << train.num_temporal_inducing
       << ";rho=" << f(train.natgrad_rho) << ";warm=" << train.warmup_steps << ","
       << f(train.warmup_rho) << ";final=" << train.final_site_pass
       << ";adam=" << f(train.adam.learning_rate) << "," << f(train.adam.beta1) << ","
       << f(train.adam.beta2) << "," << f(train.adam.epsilon) << ";jitter=" << f(train.jitter)
       << ";init=" << f(train.init_spatial.ell_lon) << "," << f(train.init_spatial.ell_lat) << ","
       << f(train.init_temporal.ell_t) << "," << f(train.init_temporal.sigma_f) << ","
       << f(train.init_noise_sigma);
    return os.str();
  }
};

namespace detail {

inline double parse_number(const std::string &v, const std::string &where) {
  double out = 0.0;
  if (!csv::parse_double(v, out) || !std::isfinite(out)) {
    throw InvalidInput(where + ": expected a finite number, got '" + v + "'");
  }
  return out;
}

inline std::size_t parse_count(const std::string &v, const std::string &where) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw InvalidInput(where + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string &v, const std::string &where) {
  if (v == "true" || v == "1" || v == "yes") {
    return true;
  }
  if (v == "false" || v == "0" || v == "no") {
    return false;
  }
  throw InvalidInput(where + ": expected true/false, got '" + v + "'");
}

inline std::vector<double> parse_list(const std::string &v, const std::string &where) {
  std::vector<double> out;
  for (auto f : csv::split(v)) {
    out.push_back(parse_number(std::string(csv::trim(f)), where));
  }
  if (out.empty()) {
    throw InvalidInput(where + ": empty list");
  }
  return out;
}

inline std::string parse_token(const std::string &v, const std::string &where) {
  if (v.empty() || v.find_first_of(" \t,") != std::string::npos) {
    throw InvalidInput(where + ": expected a token without spaces or commas, got '" + v + "'");
  }
  return v;
}

using Setter = std::function<void(const std::string &value, const std::string &where)>;

} // namespace detail

/// Parses a config. Relative paths are resolved against `base_dir`.
inline RunConfig parse_run_config(std::istream &in, const std::string &origin,
                                  const std::filesystem::path &base_dir = {}) {
  using namespace detail;
  RunConfig cfg;
  const auto path = [&](const std::string &v) {
    std::filesystem::path p(v);
    return (p.is_relative() && !base_dir.empty() ? base_dir / p : p).lexically_normal().string();
  };
  auto num = [](double &dst) {
    return Setter([&dst](const std::string &v, const std::string &w) { dst = parse_number(v, w); });
  };
  auto cnt = [](std::size_t &dst) {
    return Setter([&dst](const std::string &v, const std::string &w) { dst = parse_count(v, w); });
  };
  auto u64 = [](std::uint64_t &dst) {
    return Setter([&dst](const std::string &v, const std::string &w) { dst = parse_count(v, w); });
  };
  auto flag = [](bool &dst) {
    return Setter([&dst](const std::string &v, const std::string &w) { dst = parse_bool(v, w); });
  };
  auto tok = [](std::string &dst) {
    return Setter([&dst](const std::string &v, const std::string &w) { dst = parse_token(v, w); });
  };
  auto file = [&path](std::string &dst) {
    return Setter([&dst, &path](const std::string &v, const std::string &) { dst = path(v); });
  };
  auto list = [](std::vector<double> &dst) {
    return Setter([&dst](const std::string &v, const std::string &w) { dst = parse_list(v, w); });
  };

  auto &t = cfg.train;
  auto &s = cfg.synth;
  auto &g = cfg.grid;
  std::map<std::string, std::map<std::string, Setter>> schema{
      {"run", {{"seed", u64(cfg.seed)}, {"out_dir", file(cfg.out_dir)}, {"threads", cnt(cfg.threads)}}},
      {"data", {{"observations", file(cfg.observations)}}},
      {"baseline", {{"max_nodes", cnt(cfg.baseline_max_nodes)}}},
      {"train",
       {{"epochs", cnt(t.epochs)},
        {"batch_size", cnt(t.batch_size)},
        {"num_spatial_inducing", cnt(t.num_spatial_inducing)},
        {"num_temporal_inducing", cnt(t.num_temporal_inducing)},
        {"natgrad_rho", num(t.natgrad_rho)},
        {"warmup_steps", cnt(t.warmup_steps)},
        {"warmup_rho", num(t.warmup_rho)},
        {"final_site_pass", flag(t.final_site_pass)},
        {"learning_rate", num(t.adam.learning_rate)},
        {"beta1", num(t.adam.beta1)},
        {"beta2", num(t.adam.beta2)},
        {"epsilon", num(t.adam.epsilon)},
        {"jitter", num(t.jitter)},
        {"init_ell_lon", num(t.init_spatial.ell_lon)},
        {"init_ell_lat", num(t.init_spatial.ell_lat)},
        {"init_ell_t", num(t.init_temporal.ell_t)},
        {"init_sigma_f", num(t.init_temporal.sigma_f)},
        {"init_sigma", num(t.init_noise_sigma)}}},
      {"validate",
       {{"mode", tok(cfg.validate.mode)},
        {"simulation_id", tok(cfg.validate.simulation_id)},
        {"held_out_age_bp", num(cfg.validate.held_out_age_bp)}}},
      {"grid",
       {{"lon_min", num(g.lon_min)},
        {"lon_max", num(g.lon_max)},
        {"lat_min", num(g.lat_min)},
        {"lat_max", num(g.lat_max)},
        {"resolution", num(g.resolution)},
        {"ages_bp", list(g.ages_bp)}}},
      {"synth",
       {{"lon_min", num(s.lon_min)},
        {"lon_max", num(s.lon_max)},
        {"lat_min", num(s.lat_min)},
        {"lat_max", num(s.lat_max)},
        {"grid_nx", cnt(s.grid_nx)},
        {"grid_ny", cnt(s.grid_ny)},
        {"num_slices", cnt(s.num_slices)},
        {"max_age_bp", num(s.max_age_bp)},
        {"simulation_id", tok(s.simulation_id)},
        {"num_pollen", cnt(s.num_pollen)},
        {"num_cores", cnt(s.num_cores)},
        {"age_resolution", num(s.age_resolution)},
        {"num_baseline_slices", cnt(s.num_baseline_slices)},
        {"baseline_age_bp", num(s.baseline_age_bp)},
        {"ell_lon", num(s.spatial.ell_lon)},
        {"ell_lat", num(s.spatial.ell_lat)},
        {"ell_t", num(s.temporal.ell_t)},
        {"sigma_f", num(s.temporal.sigma_f)},
        {"sigma", num(s.noise_sigma)}}},
  };

  std::set<std::string> seen;
  for (const auto &sec : parse_ini(in, origin)) {
    const auto where_sec = origin + ":" + std::to_string(sec.line);
    if (sec.name == "baseline_slice") {
      BaselineSliceSpec spec;
      bool has_path = false;
      std::map<std::string, Setter> keys{{"path", Setter([&](const std::string &v, const std::string &) {
                                            spec.path = path(v);
                                            has_path = true;
                                          })},
                                         {"simulation_id", tok(spec.simulation_id)},
                                         {"age_bp", num(spec.age_bp)}};
      for (std::size_t i = 0; i < sec.entries.size(); ++i) {
        const auto &[k, v] = sec.entries[i];
        const auto where = origin + ":" + std::to_string(sec.entry_lines[i]);
        const auto it = keys.find(k);
        if (it == keys.end()) {
          throw InvalidInput(where + ": unknown key '" + k + "' in [baseline_slice]");
        }
        it->second(v, where);
      }
      if (!has_path || spec.simulation_id.empty()) {
        throw InvalidInput(where_sec + ": [baseline_slice] needs path and simulation_id");
      }
      cfg.baseline_slices.push_back(spec);
      continue;
    }
    const auto it = schema.find(sec.name);
    if (it == schema.end()) {
      throw InvalidInput(where_sec + ": unknown section [" + sec.name + "]");
    }
    if (!seen.insert(sec.name).second) {
      throw InvalidInput(where_sec + ": section [" + sec.name + "] appears twice");
    }
    for (std::size_t i = 0; i < sec.entries.size(); ++i) {
      const auto &[k, v] = sec.entries[i];
      const auto where = origin + ":" + std::to_string(sec.entry_lines[i]);
      const auto kt = it->second.find(k);
      if (kt == it->second.end()) {
        throw InvalidInput(where + ": unknown key '" + k + "' in [" + sec.name + "]");
      }
      kt->second(v, where);
    }
  }

  t.seed = cfg.seed;
  t.validate();
  if (cfg.validate.mode != "sweep" && cfg.validate.mode != "single") {
    throw InvalidInput(origin + ": [validate] mode must be 'sweep' or 'single'");
  }
  if (!(g.resolution > 0.0) || !(g.lon_max >= g.lon_min) || !(g.lat_max >= g.lat_min)) {
    throw InvalidInput(origin + ": [grid] needs resolution > 0 and min <= max");
  }
  if (cfg.threads < 1) {
    throw InvalidInput(origin + ": [run] threads must be at least 1");
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string &path) {
  auto in = csv::open_in(path);
  return parse_run_config(in, path, std::filesystem::path(path).parent_path());
}

} // namespace dsgp
