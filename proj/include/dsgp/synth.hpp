#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dsgp/config.hpp"
#include "dsgp/data_pipeline.hpp"
#include "dsgp/kernels.hpp"
#include "dsgp/linalg.hpp"
#include "dsgp/training.hpp"

namespace dsgp {

/// Smooth, mildly nonlinear climatology the synthetic anomalies sit on.
inline double synth_climatology(const LonLat &x) {
  return 14.0 - 0.55 * (x.lat - 35.0) + 2.0 * std::sin(x.lon * std::numbers::pi / 60.0);
}

struct SynthCorpus {
  std::vector<ObservationRecord> records; // simulation slices first, then cores
  std::vector<GriddedSlice> baseline_slices;
  std::vector<double> slice_ages_bp;
};

inline void validate_synth(const SynthSpec &s) {
  s.spatial.validate();
  s.temporal.validate();
  if (!(s.noise_sigma > 0.0)) {
    throw InvalidInput("[synth] sigma must be positive");
  }
  if (!(s.lon_min < s.lon_max) || !(s.lat_min < s.lat_max) || s.lon_min < -180.0 ||
      s.lon_max > 180.0 || s.lat_min < -90.0 || s.lat_max > 90.0) {
    throw InvalidInput("[synth] region must be a nonempty lon/lat box");
  }
  if (s.grid_nx < 2 || s.grid_ny < 2) {
    throw InvalidInput("[synth] grid needs at least 2 x 2 nodes");
  }
  if (s.num_slices < 1 || s.num_baseline_slices < 1) {
    throw InvalidInput("[synth] need at least one simulation and one baseline slice");
  }
  if (!(s.age_resolution > 0.0) || !(s.max_age_bp > 0.0)) {
    throw InvalidInput("[synth] ages must be positive");
  }
  const auto age_levels = static_cast<std::size_t>(std::floor(s.max_age_bp / s.age_resolution)) + 1;
  if (s.num_pollen > 0 &&
      (s.num_cores < 1 || (s.num_pollen + s.num_cores - 1) / s.num_cores > age_levels)) {
    throw InvalidInput("[synth] more records per core than distinct ages");
  }
}

/// Draws a corpus from the separable prior plus Gaussian noise. The latent
/// field over the union of all locations follows the exact vector OU
/// recursion between consecutive distinct times.
inline SynthCorpus synthesize(const SynthSpec &spec, std::uint64_t seed) {
  validate_synth(spec);
  SynthCorpus out;

  std::vector<LonLat> grid;
  for (std::size_t j = 0; j < spec.grid_ny; ++j) {
    for (std::size_t i = 0; i < spec.grid_nx; ++i) {
      grid.push_back(
          {spec.lon_min + (spec.lon_max - spec.lon_min) * static_cast<double>(i) /
                              static_cast<double>(spec.grid_nx - 1),
           spec.lat_min + (spec.lat_max - spec.lat_min) * static_cast<double>(j) /
                              static_cast<double>(spec.grid_ny - 1)});
    }
  }
  for (std::size_t k = 0; k < spec.num_slices; ++k) {
    const double age = spec.num_slices == 1
                           ? 0.0
                           : spec.max_age_bp * static_cast<double>(k) /
                                 static_cast<double>(spec.num_slices - 1);
    out.slice_ages_bp.push_back(age);
  }

  // cores: location plus a set of distinct ages on the age lattice
  auto core_rng = substream(seed, "synth.cores");
  std::uniform_real_distribution<double> ulon(spec.lon_min, spec.lon_max);
  std::uniform_real_distribution<double> ulat(spec.lat_min, spec.lat_max);
  std::vector<LonLat> cores;
  for (std::size_t c = 0; c < (spec.num_pollen > 0 ? spec.num_cores : 0); ++c) {
    const double lon = ulon(core_rng);
    cores.push_back({lon, ulat(core_rng)});
  }
  const auto age_levels =
      static_cast<std::size_t>(std::floor(spec.max_age_bp / spec.age_resolution)) + 1;
  std::vector<double> lattice(age_levels);
  for (std::size_t i = 0; i < age_levels; ++i) {
    lattice[i] = spec.age_resolution * static_cast<double>(i);
  }
  auto age_rng = substream(seed, "synth.ages");
  struct Pending {
    std::size_t loc;
    double age;
    std::string source;
  };
  std::vector<Pending> pending;
  for (double age : out.slice_ages_bp) {
    for (std::size_t i = 0; i < grid.size(); ++i) {
      pending.push_back({i, age, spec.simulation_id});
    }
  }
  for (std::size_t c = 0; c < cores.size(); ++c) {
    const std::size_t count = spec.num_pollen / cores.size() + (c < spec.num_pollen % cores.size());
    std::vector<double> ages;
    std::sample(lattice.begin(), lattice.end(), std::back_inserter(ages), count, age_rng);
    for (double a : ages) {
      pending.push_back({grid.size() + c, a, "pollen"});
    }
  }

  // latent field over the union of locations
  std::vector<LonLat> locs = grid;
  locs.insert(locs.end(), cores.begin(), cores.end());
  const double sf2 = spec.temporal.sigma_f * spec.temporal.sigma_f;
  Mat k = sf2 * spatial_gram(locs, locs, spec.spatial, 1e-8);
  const Mat l = checked_llt(k, "synthetic spatial covariance").matrixL();

  std::vector<double> times;
  for (const auto &p : pending) {
    times.push_back(age_to_time_ka(p.age));
  }
  std::vector<double> uniq = times;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

  // which records need the field at each distinct time
  std::vector<std::vector<std::size_t>> by_time(uniq.size());
  for (std::size_t r = 0; r < pending.size(); ++r) {
    const auto it = std::lower_bound(uniq.begin(), uniq.end(), times[r]);
    by_time[static_cast<std::size_t>(it - uniq.begin())].push_back(r);
  }

  auto field_rng = substream(seed, "synth.field");
  std::normal_distribution<double> nd;
  const auto n = static_cast<Eigen::Index>(locs.size());
  auto draw = [&] {
    Vec z(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      z(i) = nd(field_rng);
    }
    return Vec(l.triangularView<Eigen::Lower>() * z);
  };
  std::vector<double> latent(pending.size());
  Vec f = draw();
  for (std::size_t ti = 0; ti < uniq.size(); ++ti) {
    if (ti > 0) {
      const double a = std::exp(-(uniq[ti] - uniq[ti - 1]) / spec.temporal.ell_t);
      f = a * f + std::sqrt(1.0 - a * a) * draw();
    }
    for (auto r : by_time[ti]) {
      latent[r] = f(static_cast<Eigen::Index>(pending[r].loc));
    }
  }

  auto noise_rng = substream(seed, "synth.noise");
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  out.records.reserve(pending.size());
  for (std::size_t r = 0; r < pending.size(); ++r) {
    const auto &x = locs[pending[r].loc];
    ObservationRecord rec;
    rec.lon = x.lon;
    rec.lat = x.lat;
    rec.age_bp = pending[r].age;
    rec.value = synth_climatology(x) + latent[r] + noise(noise_rng);
    rec.source = pending[r].source;
    out.records.push_back(rec);
  }

  // baseline fields: climatology with per-model offsets that average to zero
  for (std::size_t b = 0; b < spec.num_baseline_slices; ++b) {
    GriddedSlice s;
    s.simulation_id = "mh" + std::to_string(b);
    s.age_bp = spec.baseline_age_bp;
    const double offset =
        0.8 * (static_cast<double>(b) - 0.5 * static_cast<double>(spec.num_baseline_slices - 1));
    for (const auto &x : grid) {
      s.nodes.push_back(x);
      s.values.push_back(synth_climatology(x) + offset);
    }
    out.baseline_slices.push_back(std::move(s));
  }
  return out;
}

/// Writes observations.csv, baseline_<k>.csv, truth.txt and a ready-to-run
/// run.ini into `dir`.
inline void write_synth_corpus(const std::filesystem::path &dir, const SynthCorpus &corpus,
                               const SynthSpec &spec, std::uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw IoFailure("cannot create directory " + dir.string() + ": " + ec.message());
  }
  save_observations((dir / "observations.csv").string(), corpus.records);
  for (std::size_t b = 0; b < corpus.baseline_slices.size(); ++b) {
    save_gridded_slice((dir / ("baseline_" + std::to_string(b) + ".csv")).string(),
                       corpus.baseline_slices[b]);
  }
  const auto f = [](double v) { return csv::format_double(v); };
  {
    auto out = csv::open_out((dir / "truth.txt").string());
    out << "ell_lon = " << f(spec.spatial.ell_lon) << "\n"
        << "ell_lat = " << f(spec.spatial.ell_lat) << "\n"
        << "ell_t = " << f(spec.temporal.ell_t) << "\n"
        << "sigma_f = " << f(spec.temporal.sigma_f) << "\n"
        << "sigma = " << f(spec.noise_sigma) << "\n"
        << "records = " << corpus.records.size() << "\n"
        << "slices = " << corpus.slice_ages_bp.size() << "\n";
  }
  auto out = csv::open_out((dir / "run.ini").string());
  out << "# generated by 'dsgp synth'\n"
      << "[run]\nseed = " << seed << "\nout_dir = run\n\n"
      << "[data]\nobservations = observations.csv\n\n";
  // one temporal knot per lattice age keeps every record on a knot
  const auto levels = static_cast<std::size_t>(std::floor(spec.max_age_bp / spec.age_resolution)) + 1;
  out << "[train]\nnum_temporal_inducing = " << std::min<std::size_t>(levels, 64) << "\n\n";
  for (std::size_t b = 0; b < corpus.baseline_slices.size(); ++b) {
    out << "[baseline_slice]\npath = baseline_" << b << ".csv\nsimulation_id = "
        << corpus.baseline_slices[b].simulation_id
        << "\nage_bp = " << f(corpus.baseline_slices[b].age_bp) << "\n\n";
  }
  out << "[validate]\nmode = sweep\nsimulation_id = " << spec.simulation_id << "\n"
      << "held_out_age_bp = " << f(corpus.slice_ages_bp.front()) << "\n\n"
      << "[grid]\nlon_min = " << f(spec.lon_min) << "\nlon_max = " << f(spec.lon_max)
      << "\nlat_min = " << f(spec.lat_min) << "\nlat_max = " << f(spec.lat_max)
      << "\nresolution = 2\nages_bp = 0, 6000, 20500\n";
}

} // namespace dsgp
