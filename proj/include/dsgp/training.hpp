#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dsgp/data_pipeline.hpp"
#include "dsgp/errors.hpp"
#include "dsgp/sparse_gp.hpp"

namespace dsgp {

struct AdamConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 1000;
  std::size_t num_spatial_inducing = 100;
  std::size_t num_temporal_inducing = 6;
  double natgrad_rho = 0.02;
  std::size_t warmup_steps = 5;
  double warmup_rho = 0.1;
  /// After the last epoch, set the sites to the exact full-data CVI target.
  bool final_site_pass = true;
  AdamConfig adam;
  std::uint64_t seed = 0;
  double jitter = 1e-6;
  // initial hyperparameters
  SpatialParams init_spatial;
  TemporalParams init_temporal;
  double init_noise_sigma = 1.6;

  void validate() const {
    if (batch_size < 1 || num_spatial_inducing < 1 || num_temporal_inducing < 1) {
      throw InvalidInput("batch size and inducing counts must be at least 1");
    }
    if (!(natgrad_rho > 0.0 && natgrad_rho <= 1.0) || !(warmup_rho > 0.0 && warmup_rho <= 1.0)) {
      throw InvalidInput("natural-gradient step sizes must lie in (0, 1]");
    }
    if (!(adam.learning_rate >= 0.0) || !(adam.beta1 >= 0.0 && adam.beta1 < 1.0) ||
        !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.epsilon > 0.0)) {
      throw InvalidInput("invalid Adam settings");
    }
    init_spatial.validate();
    init_temporal.validate();
    if (!(init_noise_sigma > 0.0)) {
      throw InvalidInput("initial noise sigma must be positive");
    }
  }
};

/// Independent random stream per named consumer, derived from one seed.
inline std::mt19937_64 substream(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : name) {
    h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

struct AdamState {
  Vec m;
  Vec v;
  std::uint64_t step = 0;

  static AdamState zeros(Eigen::Index n) { return {Vec::Zero(n), Vec::Zero(n), 0}; }
};

/// Bias-corrected Adam. Returns the parameter delta for minimizing the loss
/// whose gradient is `grad`.
inline Vec adam_step(const Vec &grad, AdamState &state, const AdamConfig &cfg) {
  if (grad.size() != state.m.size() || grad.size() != state.v.size()) {
    throw InvalidInput("Adam state and gradient have different shapes");
  }
  ++state.step;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  return (-cfg.learning_rate * (state.m / c1).array() /
          ((state.v / c2).array().sqrt() + cfg.epsilon))
      .matrix();
}

/// k-means++ style seeding: first point uniform, then D^2-weighted draws
/// over the distinct training coordinates.
inline std::vector<LonLat> kmeanspp_select(std::vector<LonLat> candidates, std::size_t k,
                                           std::mt19937_64 &rng) {
  std::sort(candidates.begin(), candidates.end(), [](const LonLat &a, const LonLat &b) {
    return a.lon != b.lon ? a.lon < b.lon : a.lat < b.lat;
  });
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  if (candidates.empty()) {
    throw InvalidInput("no coordinates to place inducing points on");
  }
  k = std::min(k, candidates.size());
  std::vector<LonLat> chosen;
  std::vector<double> d2(candidates.size(), std::numeric_limits<double>::infinity());
  std::uniform_int_distribution<std::size_t> first(0, candidates.size() - 1);
  chosen.push_back(candidates[first(rng)]);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  while (chosen.size() < k) {
    const auto &last = chosen.back();
    double total = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const double du = candidates[i].lon - last.lon;
      const double dv = candidates[i].lat - last.lat;
      d2[i] = std::min(d2[i], du * du + dv * dv);
      total += d2[i];
    }
    if (!(total > 0.0)) {
      break;
    }
    const double target = unif(rng) * total;
    double run = 0.0;
    std::size_t pick = candidates.size() - 1;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      run += d2[i];
      if (run >= target && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    chosen.push_back(candidates[pick]);
  }
  return chosen;
}

/// Equally spaced knots over [t_min, t_max] including both ends.
inline std::vector<double> equally_spaced_knots(double t_min, double t_max, std::size_t count) {
  if (count <= 1 || !(t_max > t_min)) {
    return {t_min};
  }
  std::vector<double> knots(count);
  for (std::size_t j = 0; j < count; ++j) {
    knots[j] = t_min + (t_max - t_min) * static_cast<double>(j) / static_cast<double>(count - 1);
  }
  knots.back() = t_max;
  return knots;
}

inline Hyperparams initial_hyperparams(const TrainConfig &cfg,
                                       const std::vector<ObservationRecord> &data) {
  if (data.empty()) {
    throw InvalidInput("cannot initialize a model without data");
  }
  std::vector<LonLat> coords;
  coords.reserve(data.size());
  double t_min = std::numeric_limits<double>::infinity();
  double t_max = -t_min;
  for (const auto &r : data) {
    coords.push_back(r.coords());
    t_min = std::min(t_min, r.time_ka());
    t_max = std::max(t_max, r.time_ka());
  }
  Hyperparams h;
  h.spatial = cfg.init_spatial;
  h.temporal = cfg.init_temporal;
  h.noise_sigma = cfg.init_noise_sigma;
  h.jitter = cfg.jitter;
  h.inducing.bbox = BoundingBox::of(coords);
  auto rng = substream(cfg.seed, "inducing");
  h.inducing.spatial = kmeanspp_select(std::move(coords), cfg.num_spatial_inducing, rng);
  h.inducing.times = equally_spaced_knots(t_min, t_max, cfg.num_temporal_inducing);
  h.validate();
  return h;
}

/// Hyperparameters, sites and baseline: everything a prediction needs.
struct TrainedModel {
  Hyperparams hyper;
  ChainSites sites;
  BaselineModel baseline;

  PriorStructure structure() const { return PriorStructure(hyper); }

  VariationalState state(const PriorStructure &s) const {
    VariationalState v;
    v.sites = sites;
    v.refresh(s);
    return v;
  }

  std::vector<PredictiveMarginal>
  predict(std::span<const std::pair<LonLat, double>> points) const {
    const auto s = structure();
    return dsgp::predict(points, state(s), s, baseline);
  }
};

struct TraceRow {
  std::size_t iteration;
  std::size_t epoch;
  double elbo;
};

struct FitResult {
  TrainedModel model;
  std::vector<TraceRow> trace;
};

inline std::string describe(const Hyperparams &h) {
  std::ostringstream os;
  os.precision(17);
  os << "ell_lon=" << h.spatial.ell_lon << " ell_lat=" << h.spatial.ell_lat
     << " ell_t=" << h.temporal.ell_t << " sigma_f=" << h.temporal.sigma_f
     << " sigma=" << h.noise_sigma;
  return os.str();
}

using FitObserver = std::function<void(const TraceRow &, const Hyperparams &)>;

/// Alternates CVI site updates and Adam hyperparameter steps over shuffled
/// minibatches. `data` must be centered.
inline FitResult fit(const TrainConfig &cfg, const std::vector<ObservationRecord> &data,
                     const BaselineModel &baseline, const FitObserver &observer = {}) {
  cfg.validate();
  FitResult out;
  out.model.baseline = baseline;
  Hyperparams h = initial_hyperparams(cfg, data);
  auto structure = std::make_unique<PriorStructure>(h);
  auto state = VariationalState::prior(*structure);
  const auto n_total = static_cast<double>(data.size());
  auto rng = substream(cfg.seed, "batches");
  AdamState adam = AdamState::zeros(static_cast<Eigen::Index>(h.num_unconstrained()));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<ObservationRecord> batch;
  std::size_t iteration = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    // ceil(N / N_b) batches of near-equal size, so no tiny remainder batch
    // carries an outsized N / |batch| weight
    const std::size_t num_batches = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
    for (std::size_t b = 0; b < num_batches; ++b) {
      const std::size_t start = b * order.size() / num_batches;
      const std::size_t stop = (b + 1) * order.size() / num_batches;
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) {
        batch.push_back(data[order[i]]);
      }
      try {
        const double rho = iteration < cfg.warmup_steps ? cfg.warmup_rho : cfg.natgrad_rho;
        state = natgrad_step(batch, state, *structure, n_total, rho);
        const auto hg = hyper_gradient(batch, state, *structure, n_total);
        const Vec delta = adam_step(-hg.grad, adam, cfg.adam);
        h.unpack(h.pack() + delta);
        h.clamp_inducing();
        for (const auto &zz : h.inducing.spatial) {
          if (!h.inducing.bbox.contains(zz)) {
            throw NumericalFailure("inducing point escaped the bounding box");
          }
        }
        structure = std::make_unique<PriorStructure>(h);
        state.refresh(*structure);
        out.trace.push_back({iteration, epoch, hg.elbo});
        if (observer) {
          observer(out.trace.back(), h);
        }
      } catch (const NumericalFailure &e) {
        throw NumericalFailure("iteration " + std::to_string(iteration) + " (" + describe(h) +
                               "): " + e.what());
      }
      ++iteration;
    }
  }

  if (cfg.epochs > 0 && cfg.final_site_pass) {
    try {
      state.sites = likelihood_sites(data, state, *structure, n_total);
      state.refresh(*structure);
    } catch (const NumericalFailure &e) {
      throw NumericalFailure("final site pass (" + describe(h) + "): " + e.what());
    }
  }
  out.model.hyper = h;
  out.model.sites = state.sites;
  return out;
}

/// Linearly interpolated empirical quantile (type 7) of sorted data.
inline double quantile_sorted(const std::vector<double> &sorted, double p) {
  if (sorted.empty()) {
    throw InvalidInput("quantile of empty data");
  }
  const double hpos = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(hpos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (hpos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct CentralInterval {
  double level;
  double lower;
  double upper;
};

struct EvalRow {
  ObservationRecord record;
  double pp_mean;
  double pp_std;
  double error;      // pp_mean - value
  double normalized; // error / pp_std
};

struct EvalReport {
  std::size_t count = 0;
  double mean_error = 0.0;
  double mean_abs_error = 0.0;
  double median_error = 0.0;
  std::vector<CentralInterval> intervals; // 20/40/60/80/95 %
  double coverage1 = 0.0;
  double coverage2 = 0.0;
  double coverage3 = 0.0;
  std::vector<EvalRow> rows;

  std::vector<double> normalized_errors() const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto &r : rows) {
      out.push_back(r.normalized);
    }
    return out;
  }
};

inline constexpr double kIntervalLevels[] = {0.2, 0.4, 0.6, 0.8, 0.95};

/// Summary statistics from raw (error, normalized error) pairs.
inline EvalReport summarize(std::vector<EvalRow> rows) {
  if (rows.empty()) {
    throw InvalidInput("cannot summarize an empty evaluation");
  }
  EvalReport rep;
  rep.count = rows.size();
  std::vector<double> errs;
  errs.reserve(rows.size());
  double sum = 0.0;
  double sum_abs = 0.0;
  std::size_t c1 = 0;
  std::size_t c2 = 0;
  std::size_t c3 = 0;
  for (const auto &r : rows) {
    errs.push_back(r.error);
    sum += r.error;
    sum_abs += std::abs(r.error);
    const double a = std::abs(r.normalized);
    c1 += a <= 1.0;
    c2 += a <= 2.0;
    c3 += a <= 3.0;
  }
  const auto n = static_cast<double>(rows.size());
  rep.mean_error = sum / n;
  rep.mean_abs_error = sum_abs / n;
  rep.coverage1 = static_cast<double>(c1) / n;
  rep.coverage2 = static_cast<double>(c2) / n;
  rep.coverage3 = static_cast<double>(c3) / n;
  std::sort(errs.begin(), errs.end());
  rep.median_error = quantile_sorted(errs, 0.5);
  for (double level : kIntervalLevels) {
    rep.intervals.push_back({level, quantile_sorted(errs, 0.5 - level / 2.0),
                             quantile_sorted(errs, 0.5 + level / 2.0)});
  }
  rep.rows = std::move(rows);
  return rep;
}

/// Posterior-predictive errors on uncentered values.
inline EvalReport validate(const TrainedModel &model, const std::vector<ObservationRecord> &test) {
  if (test.empty()) {
    throw InvalidInput("validation set is empty");
  }
  std::vector<std::pair<LonLat, double>> pts;
  pts.reserve(test.size());
  for (const auto &r : test) {
    pts.emplace_back(r.coords(), r.time_ka());
  }
  const auto pred = model.predict(pts);
  std::vector<EvalRow> rows;
  rows.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double sd = std::sqrt(pred[i].var_observation);
    const double err = pred[i].mean - test[i].value;
    rows.push_back({test[i], pred[i].mean, sd, err, err / sd});
  }
  return summarize(std::move(rows));
}

struct SweepEntry {
  double held_out_age_bp;
  EvalReport report;
};

struct SweepResult {
  std::vector<SweepEntry> per_slice;
  EvalReport aggregate;
  double prior_mean_abs_error = 0.0; // predicting m(x) alone on the same rows
};

/// Leave-one-time-slice-out over every slice of one simulation. Records
/// must be centered with the shared baseline.
inline SweepResult sweep_leave_one_out(const TrainConfig &cfg,
                                       const std::vector<ObservationRecord> &records,
                                       const std::string &simulation_id,
                                       const BaselineModel &baseline) {
  const auto ages = slice_ages(records, simulation_id);
  if (ages.size() < 2) {
    throw InvalidInput("simulation '" + simulation_id + "' needs at least 2 slices for a sweep");
  }
  SweepResult out;
  std::vector<EvalRow> all;
  for (double age : ages) {
    const auto split = split_leave_time_slice_out(records, age, simulation_id);
    const auto fitted = fit(cfg, split.train, baseline);
    auto rep = validate(fitted.model, split.test);
    for (const auto &r : split.test) {
      out.prior_mean_abs_error += std::abs(r.value_centered);
    }
    all.insert(all.end(), rep.rows.begin(), rep.rows.end());
    out.per_slice.push_back({age, std::move(rep)});
  }
  out.aggregate = summarize(std::move(all));
  out.prior_mean_abs_error /= static_cast<double>(out.aggregate.count);
  return out;
}

/// Gaussian KDE with Silverman's rule-of-thumb bandwidth on an even grid.
inline std::vector<std::pair<double, double>> kde_silverman(std::vector<double> samples,
                                                           std::size_t grid_points = 200) {
  if (samples.size() < 2) {
    throw InvalidInput("KDE needs at least two samples");
  }
  std::sort(samples.begin(), samples.end());
  const auto n = static_cast<double>(samples.size());
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double var = 0.0;
  for (double x : samples) {
    var += (x - mean) * (x - mean);
  }
  const double sd = std::sqrt(var / (n - 1.0));
  const double iqr = quantile_sorted(samples, 0.75) - quantile_sorted(samples, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) {
    spread = sd > 0.0 ? sd : 1.0;
  }
  const double bw = 0.9 * spread * std::pow(n, -0.2);
  const double lo = samples.front() - 3.0 * bw;
  const double hi = samples.back() + 3.0 * bw;
  std::vector<std::pair<double, double>> out;
  const double norm = 1.0 / (n * bw * std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t g = 0; g < grid_points; ++g) {
    const double x = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid_points - 1);
    double dens = 0.0;
    for (double s : samples) {
      const double u = (x - s) / bw;
      dens += std::exp(-0.5 * u * u);
    }
    out.emplace_back(x, dens * norm);
  }
  return out;
}

} // namespace dsgp
