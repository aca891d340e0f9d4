// dsgp: command-line front end. Exit codes: 0 ok, 2 input error,
// 3 numerical failure, 4 I/O failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsgp/checkpoint.hpp"
#include "dsgp/config.hpp"
#include "dsgp/data_pipeline.hpp"
#include "dsgp/errors.hpp"
#include "dsgp/parallel.hpp"
#include "dsgp/synth.hpp"
#include "dsgp/training.hpp"

namespace fs = std::filesystem;
using namespace dsgp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

constexpr std::string_view kCenteredHeader = "lon,lat,age_bp,value_c,source,value_centered";
constexpr std::string_view kPredictionHeader =
    "lon,lat,age_bp,mean_c,std_latent,std_predictive";

constexpr const char *kConfigHelp = R"(Config file (INI, '#' or ';' comments; unknown sections or keys are fatal).
Relative paths resolve against the config file's directory. Defaults:
  [run]       seed = 0, out_dir = out, threads = 1
  [data]      observations = <path to lon,lat,age_bp,value_c,source CSV>
  [baseline]  max_nodes = 5000 (grid nodes kept per slice for the spline fit)
  [baseline_slice]  (repeatable) path = <lon,lat,value_c CSV>, simulation_id, age_bp
  [train]     epochs = 30, batch_size = 1000, num_spatial_inducing = 100,
              num_temporal_inducing = 6, natgrad_rho = 0.02, warmup_steps = 5,
              warmup_rho = 0.1, final_site_pass = true, learning_rate = 0.01,
              beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8, jitter = 1e-6,
              init_ell_lon = 19.6, init_ell_lat = 13.2, init_ell_t = 9.9 (ka),
              init_sigma_f = 2.9, init_sigma = 1.6
  [validate]  mode = sweep | single, simulation_id = sim, held_out_age_bp = 0
  [grid]      lon_min = -180, lon_max = 180, lat_min = -90, lat_max = 90,
              resolution = 1 (degrees), ages_bp = 0
  [synth]     lon_min = -10, lon_max = 50, lat_min = 35, lat_max = 70,
              grid_nx = 20, grid_ny = 15, num_slices = 6, max_age_bp = 20000,
              simulation_id = sim, num_pollen = 18200, num_cores = 910,
              age_resolution = 1000, num_baseline_slices = 3,
              baseline_age_bp = 6000, ell_lon = 19.6, ell_lat = 13.2,
              ell_t = 9.9, sigma_f = 2.9, sigma = 1.6
Exit codes: 0 ok, 2 input error, 3 numerical failure, 4 I/O failure.)";

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App &cmd, Common &c, bool config_required) {
  auto *opt = cmd.add_option("--config", c.config, "INI run configuration; unknown keys are fatal");
  if (config_required) {
    opt->required();
  }
  cmd.add_option("--seed", c.seed, "override [run] seed (default 0)");
  cmd.add_option("--out", c.out, "override [run] out_dir, the output directory (default 'out')");
  cmd.add_option("--threads", c.threads, "override [run] threads, worker threads (default 1)")
      ->check(CLI::PositiveNumber);
}

std::string fmt(double v) { return csv::format_double(v); }

RunConfig resolve(const Common &c) {
  RunConfig cfg;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) {
      throw InvalidInput("config file not found: " + c.config);
    }
    cfg = load_run_config(c.config);
  }
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.train.seed = *c.seed;
  }
  if (c.out) {
    cfg.out_dir = *c.out;
  }
  if (c.threads) {
    cfg.threads = *c.threads;
  }
  num_threads() = cfg.threads;
  return cfg;
}

fs::path ensure_dir(const std::string &dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw IoFailure("cannot create directory " + dir + ": " + ec.message());
  }
  return fs::path(dir);
}

void require_input(const std::string &path, const std::string &what) {
  if (path.empty()) {
    throw InvalidInput(what + " is not set");
  }
  if (!fs::is_regular_file(path)) {
    throw InvalidInput(what + " not found: " + path);
  }
}

void write_text(const fs::path &path, const std::string &text) {
  auto out = csv::open_out(path.string());
  out << text;
  out.flush();
  if (!out) {
    throw IoFailure("failed writing " + path.string());
  }
}

// ---- centered data ---------------------------------------------------------

void save_centered(const fs::path &path, const std::vector<ObservationRecord> &records) {
  auto out = csv::open_out(path.string());
  out << kCenteredHeader << '\n';
  for (const auto &r : records) {
    out << fmt(r.lon) << ',' << fmt(r.lat) << ',' << fmt(r.age_bp) << ',' << fmt(r.value) << ','
        << r.source << ',' << fmt(r.value_centered) << '\n';
  }
  out.flush();
  if (!out) {
    throw IoFailure("failed writing " + path.string());
  }
}

std::vector<ObservationRecord> load_centered(const std::string &path) {
  require_input(path, "centered data (run 'dsgp preprocess' first)");
  auto in = csv::open_in(path);
  std::string line;
  if (!std::getline(in, line) || csv::trim(line) != kCenteredHeader) {
    throw InvalidInput(path + ": expected header '" + std::string(kCenteredHeader) + "'");
  }
  std::vector<ObservationRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (csv::trim(line).empty()) {
      continue;
    }
    const auto f = csv::split(line);
    ObservationRecord r;
    if (f.size() != 6 || !csv::parse_double(f[0], r.lon) || !csv::parse_double(f[1], r.lat) ||
        !csv::parse_double(f[2], r.age_bp) || !csv::parse_double(f[3], r.value) ||
        !csv::parse_double(f[5], r.value_centered)) {
      throw InvalidInput(path + " line " + std::to_string(line_no) + ": malformed row");
    }
    r.source = std::string(csv::trim(f[4]));
    out.push_back(std::move(r));
  }
  if (out.empty()) {
    throw InvalidInput(path + ": no records");
  }
  return out;
}

// ---- reports ---------------------------------------------------------------

std::string summary_text(const Hyperparams &h) {
  // same quantities and units as the published hyperparameter listing
  std::ostringstream os;
  os << "ell_lon_deg = " << fmt(h.spatial.ell_lon) << '\n'
     << "ell_lat_deg = " << fmt(h.spatial.ell_lat) << '\n'
     << "ell_t_years = " << fmt(h.temporal.ell_t * 1000.0) << '\n'
     << "sigma_f_c = " << fmt(h.temporal.sigma_f) << '\n'
     << "sigma_c = " << fmt(h.noise_sigma) << '\n';
  os << "inducing_points = " << h.inducing.spatial.size() << '\n';
  for (const auto &z : h.inducing.spatial) {
    os << fmt(z.lon) << ',' << fmt(z.lat) << '\n';
  }
  return os.str();
}

std::string report_text(const EvalReport &r) {
  std::ostringstream os;
  os << "count = " << r.count << '\n'
     << "mean_error = " << fmt(r.mean_error) << '\n'
     << "mean_abs_error = " << fmt(r.mean_abs_error) << '\n'
     << "median_error = " << fmt(r.median_error) << '\n';
  for (const auto &ci : r.intervals) {
    const int pct = static_cast<int>(std::lround(ci.level * 100.0));
    os << "interval_" << pct << " = " << fmt(ci.lower) << ", " << fmt(ci.upper) << '\n';
  }
  os << "coverage_1sd = " << fmt(r.coverage1) << '\n'
     << "coverage_2sd = " << fmt(r.coverage2) << '\n'
     << "coverage_3sd = " << fmt(r.coverage3) << '\n';
  return os.str();
}

void append_error_rows(std::ostream &out, double held_out, const EvalReport &r) {
  for (const auto &row : r.rows) {
    out << fmt(held_out) << ',' << fmt(row.record.lon) << ',' << fmt(row.record.lat) << ','
        << fmt(row.record.age_bp) << ',' << fmt(row.record.value) << ',' << fmt(row.pp_mean) << ','
        << fmt(row.pp_std) << ',' << fmt(row.error) << ',' << fmt(row.normalized) << '\n';
  }
}

void write_kde(const fs::path &path, const EvalReport &r) {
  auto out = csv::open_out(path.string());
  out << "normalized_error,density\n";
  if (r.rows.size() >= 2) {
    for (const auto &[x, d] : kde_silverman(r.normalized_errors())) {
      out << fmt(x) << ',' << fmt(d) << '\n';
    }
  }
  out.flush();
  if (!out) {
    throw IoFailure("failed writing " + path.string());
  }
}

std::vector<PredictiveMarginal> predict_rows(const TrainedModel &model,
                                             const std::vector<std::array<double, 3>> &pts) {
  std::vector<std::pair<LonLat, double>> q;
  q.reserve(pts.size());
  for (const auto &p : pts) {
    q.emplace_back(LonLat{p[0], p[1]}, age_to_time_ka(p[2]));
  }
  return model.predict(q);
}

void write_predictions(const fs::path &path, const std::vector<std::array<double, 3>> &pts,
                       const std::vector<PredictiveMarginal> &pred) {
  auto out = csv::open_out(path.string());
  out << kPredictionHeader << '\n';
  for (std::size_t i = 0; i < pts.size(); ++i) {
    out << fmt(pts[i][0]) << ',' << fmt(pts[i][1]) << ',' << fmt(pts[i][2]) << ','
        << fmt(pred[i].mean) << ',' << fmt(std::sqrt(pred[i].var_latent)) << ','
        << fmt(std::sqrt(pred[i].var_observation)) << '\n';
  }
  out.flush();
  if (!out) {
    throw IoFailure("failed writing " + path.string());
  }
}

std::string default_checkpoint(const RunConfig &cfg) {
  return (fs::path(cfg.out_dir) / "checkpoint.txt").string();
}

TrainedModel load_model(const std::string &path) {
  require_input(path, "checkpoint");
  return load_checkpoint(path).model;
}

// ---- commands --------------------------------------------------------------

void cmd_synth(const Common &c) {
  const auto cfg = resolve(c);
  const auto corpus = synthesize(cfg.synth, cfg.seed);
  write_synth_corpus(ensure_dir(cfg.out_dir), corpus, cfg.synth, cfg.seed);
  std::cout << "wrote " << corpus.records.size() << " records (" << corpus.slice_ages_bp.size()
            << " simulation slices, " << corpus.baseline_slices.size() << " baseline slices) to "
            << cfg.out_dir << '\n';
}

void cmd_preprocess(const Common &c) {
  const auto cfg = resolve(c);
  require_input(cfg.observations, "[data] observations");
  for (const auto &b : cfg.baseline_slices) {
    require_input(b.path, "baseline slice");
  }
  IngestReport report;
  auto records = load_observations(cfg.observations, report);
  const auto dir = ensure_dir(cfg.out_dir);
  write_text(dir / "ingest_report.txt", report.to_text());
  std::cout << report.to_text();
  if (report.rows_rejected() > 0) {
    throw InvalidInput(std::to_string(report.rows_rejected()) + " rows rejected in " +
                       cfg.observations);
  }
  if (records.empty()) {
    throw InvalidInput(cfg.observations + ": no records");
  }

  BaselineModel baseline;
  if (cfg.baseline_slices.empty()) {
    double sum = 0.0;
    for (const auto &r : records) {
      sum += r.value;
    }
    baseline = BaselineModel::constant(sum / static_cast<double>(records.size()));
  } else {
    std::vector<GriddedSlice> slices;
    for (const auto &b : cfg.baseline_slices) {
      slices.push_back(load_gridded_slice(b.path, b.simulation_id, b.age_bp));
    }
    baseline = fit_baseline(slices, cfg.baseline_max_nodes);
  }
  center(records, baseline);
  save_baseline((dir / "baseline.txt").string(), baseline);
  save_centered(dir / "centered.csv", records);
}

void cmd_fit(const Common &c) {
  const auto cfg = resolve(c);
  const fs::path dir(cfg.out_dir);
  const auto records = load_centered((dir / "centered.csv").string());
  require_input((dir / "baseline.txt").string(), "baseline (run 'dsgp preprocess' first)");
  const auto baseline = load_baseline((dir / "baseline.txt").string());

  auto trace = csv::open_out((dir / "elbo_trace.csv").string());
  trace << "iteration,epoch,elbo_estimate\n";
  const auto result = fit(cfg.train, records, baseline, [&](const TraceRow &row, const Hyperparams &) {
    trace << row.iteration << ',' << row.epoch << ',' << fmt(row.elbo) << '\n';
  });
  trace.flush();
  if (!trace) {
    throw IoFailure("failed writing elbo_trace.csv");
  }
  save_checkpoint((dir / "checkpoint.txt").string(),
                  Checkpoint{result.model, fnv1a(cfg.fit_fingerprint())});
  const auto summary = summary_text(result.model.hyper);
  write_text(dir / "fit_summary.txt", summary);
  std::cout << summary;
}

std::vector<std::array<double, 3>> load_points(const std::string &path) {
  require_input(path, "points file");
  auto in = csv::open_in(path);
  std::string line;
  if (!std::getline(in, line) || csv::trim(line) != "lon,lat,age_bp") {
    throw InvalidInput(path + ": expected header 'lon,lat,age_bp'");
  }
  std::vector<std::array<double, 3>> pts;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (csv::trim(line).empty()) {
      continue;
    }
    const auto f = csv::split(line);
    std::array<double, 3> p{};
    if (f.size() != 3 || !csv::parse_double(f[0], p[0]) || !csv::parse_double(f[1], p[1]) ||
        !csv::parse_double(f[2], p[2]) || !std::isfinite(p[0]) || !std::isfinite(p[1]) ||
        !std::isfinite(p[2])) {
      throw InvalidInput(path + " line " + std::to_string(line_no) + ": malformed point");
    }
    pts.push_back(p);
  }
  return pts;
}

void cmd_predict(const Common &c, const std::string &checkpoint, const std::string &points,
                 const std::string &output) {
  const auto cfg = resolve(c);
  const auto model = load_model(checkpoint.empty() ? default_checkpoint(cfg) : checkpoint);
  const auto pts = load_points(points);
  const fs::path out_path =
      output.empty() ? ensure_dir(cfg.out_dir) / "predictions.csv" : fs::path(output);
  write_predictions(out_path, pts, predict_rows(model, pts));
}

std::vector<double> grid_axis(double lo, double hi, double step) {
  std::vector<double> axis;
  for (std::size_t i = 0;; ++i) {
    const double v = lo + step * static_cast<double>(i);
    if (v > hi + 1e-9 * std::max(1.0, std::abs(hi))) {
      break;
    }
    axis.push_back(v);
  }
  return axis;
}

void cmd_export_grid(const Common &c, const std::string &checkpoint,
                     const std::vector<double> &bbox, std::optional<double> resolution,
                     const std::vector<double> &ages) {
  auto cfg = resolve(c);
  auto g = cfg.grid;
  if (!bbox.empty()) {
    if (bbox.size() != 4) {
      throw InvalidInput("--bbox takes lon_min,lon_max,lat_min,lat_max");
    }
    g.lon_min = bbox[0];
    g.lon_max = bbox[1];
    g.lat_min = bbox[2];
    g.lat_max = bbox[3];
  }
  if (resolution) {
    g.resolution = *resolution;
  }
  if (!ages.empty()) {
    g.ages_bp = ages;
  }
  if (!(g.resolution > 0.0) || !(g.lon_max >= g.lon_min) || !(g.lat_max >= g.lat_min)) {
    throw InvalidInput("grid needs resolution > 0 and min <= max");
  }
  if (g.ages_bp.empty()) {
    throw InvalidInput("no ages requested");
  }
  const auto model = load_model(checkpoint.empty() ? default_checkpoint(cfg) : checkpoint);
  const auto dir = ensure_dir(cfg.out_dir);
  const auto lons = grid_axis(g.lon_min, g.lon_max, g.resolution);
  const auto lats = grid_axis(g.lat_min, g.lat_max, g.resolution);
  for (double age : g.ages_bp) {
    std::vector<std::array<double, 3>> pts;
    for (double lat : lats) {
      for (double lon : lons) {
        pts.push_back({lon, lat, age});
      }
    }
    write_predictions(dir / ("grid_" + fmt(age) + ".csv"), pts, predict_rows(model, pts));
  }
}

void cmd_validate(const Common &c) {
  const auto cfg = resolve(c);
  const fs::path dir(cfg.out_dir);
  const auto records = load_centered((dir / "centered.csv").string());
  require_input((dir / "baseline.txt").string(), "baseline (run 'dsgp preprocess' first)");
  const auto baseline = load_baseline((dir / "baseline.txt").string());
  const auto &vs = cfg.validate;

  auto errors = csv::open_out((dir / "errors.csv").string());
  errors << "held_out_age_bp,lon,lat,age_bp,value_c,pp_mean,pp_std,error,normalized\n";
  EvalReport aggregate;
  double prior_mae = 0.0;
  if (vs.mode == "sweep") {
    const auto sweep = sweep_leave_one_out(cfg.train, records, vs.simulation_id, baseline);
    for (const auto &e : sweep.per_slice) {
      write_text(dir / ("report_" + fmt(e.held_out_age_bp) + ".txt"),
                 "held_out_age_bp = " + fmt(e.held_out_age_bp) + "\n" + report_text(e.report));
      append_error_rows(errors, e.held_out_age_bp, e.report);
    }
    aggregate = sweep.aggregate;
    prior_mae = sweep.prior_mean_abs_error;
  } else {
    const auto split = split_leave_time_slice_out(records, vs.held_out_age_bp, vs.simulation_id);
    const auto fitted = fit(cfg.train, split.train, baseline);
    aggregate = validate(fitted.model, split.test);
    append_error_rows(errors, vs.held_out_age_bp, aggregate);
    for (const auto &r : split.test) {
      prior_mae += std::abs(r.value_centered);
    }
    prior_mae /= static_cast<double>(split.test.size());
  }
  errors.flush();
  if (!errors) {
    throw IoFailure("failed writing errors.csv");
  }
  const auto text = "mode = " + vs.mode + "\n" + report_text(aggregate) +
                    "prior_mean_abs_error = " + fmt(prior_mae) + "\n";
  write_text(dir / "report.txt", text);
  write_kde(dir / "kde.csv", aggregate);
  std::cout << text;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Doubly sparse spatiotemporal GP for paleoclimate field reconstruction"};
  app.require_subcommand(1);
  app.footer(kConfigHelp);

  Common common;
  auto *synth = app.add_subcommand("synth", "generate a synthetic corpus from the prior plus noise");
  add_common(*synth, common, false);

  auto *pre = app.add_subcommand("preprocess", "fit the baseline m(x) and center observations");
  add_common(*pre, common, true);

  auto *fitc = app.add_subcommand("fit", "train the model on preprocessed data");
  add_common(*fitc, common, true);

  std::string checkpoint;
  std::string points;
  std::string output;
  auto *pred = app.add_subcommand("predict", "posterior predictive marginals at query points");
  add_common(*pred, common, false);
  pred->add_option("--checkpoint", checkpoint, "checkpoint file (default <out>/checkpoint.txt)");
  pred->add_option("--points", points, "CSV with header lon,lat,age_bp")->required();
  pred->add_option("--output", output, "output CSV (default <out>/predictions.csv)");

  std::vector<double> bbox;
  std::optional<double> resolution;
  std::vector<double> ages;
  auto *grid = app.add_subcommand("export-grid", "posterior mean and std on a lon/lat grid per age");
  add_common(*grid, common, false);
  grid->add_option("--checkpoint", checkpoint, "checkpoint file (default <out>/checkpoint.txt)");
  grid->add_option("--bbox", bbox, "lon_min,lon_max,lat_min,lat_max (default from [grid])")
      ->delimiter(',')
      ->expected(4);
  grid->add_option("--resolution", resolution, "grid spacing in degrees (default [grid] resolution, 1)");
  grid->add_option("--ages", ages, "comma-separated ages in years BP (default [grid] ages_bp)")
      ->delimiter(',');

  auto *val = app.add_subcommand("validate", "leave-one-time-slice-out evaluation per [validate]");
  add_common(*val, common, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (*synth) {
      cmd_synth(common);
    } else if (*pre) {
      cmd_preprocess(common);
    } else if (*fitc) {
      cmd_fit(common);
    } else if (*pred) {
      cmd_predict(common, checkpoint, points, output);
    } else if (*grid) {
      cmd_export_grid(common, checkpoint, bbox, resolution, ages);
    } else if (*val) {
      cmd_validate(common);
    }
  } catch (const InvalidInput &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const NumericalFailure &e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const IoFailure &e) {
    std::cerr << "i/o failure: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitOk;
}
