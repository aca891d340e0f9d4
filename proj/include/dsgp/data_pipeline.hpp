#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dsgp/errors.hpp"
#include "dsgp/kernels.hpp"
#include "dsgp/linalg.hpp"

namespace dsgp {

/// One datum. Ages are years BP on disk; the model works in t = -age/1000 ka.
struct ObservationRecord {
  double lon = 0.0;
  double lat = 0.0;
  double age_bp = 0.0;
  double value = 0.0;
  std::string source;
  double value_centered = std::numeric_limits<double>::quiet_NaN();

  double time_ka() const { return -age_bp / 1000.0; }
  LonLat coords() const { return {lon, lat}; }
};

inline bool operator==(const ObservationRecord &a, const ObservationRecord &b) {
  return a.lon == b.lon && a.lat == b.lat && a.age_bp == b.age_bp && a.value == b.value &&
         a.source == b.source;
}

inline double age_to_time_ka(double age_bp) { return -age_bp / 1000.0; }
inline double time_ka_to_age(double t) { return -t * 1000.0; }

struct IngestReport {
  std::size_t rows_read = 0;
  std::size_t rows_accepted = 0;
  std::map<std::string, std::size_t> rejected;
  /// "line N: reason", capped so huge files do not flood the report.
  std::vector<std::string> diagnostics;

  std::size_t rows_rejected() const {
    std::size_t n = 0;
    for (const auto &[_, c] : rejected) {
      n += c;
    }
    return n;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "rows_read = " << rows_read << "\n";
    os << "rows_accepted = " << rows_accepted << "\n";
    os << "rows_rejected = " << rows_rejected() << "\n";
    for (const auto &[reason, count] : rejected) {
      os << "rejected[" << reason << "] = " << count << "\n";
    }
    for (const auto &d : diagnostics) {
      os << "# " << d << "\n";
    }
    return os.str();
  }
};

namespace csv {

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

inline bool parse_double(std::string_view s, double &out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') {
    s.remove_prefix(1);
  }
  if (s.empty()) {
    return false;
  }
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::ifstream open_in(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw IoFailure("cannot open input file: " + path);
  }
  return in;
}

inline std::ofstream open_out(const std::string &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoFailure("cannot open output file: " + path);
  }
  return out;
}

} // namespace csv

inline constexpr std::string_view kObservationHeader = "lon,lat,age_bp,value_c,source";

/// Parses the observation CSV. Bad rows are rejected and counted per reason;
/// a missing or wrong header is fatal.
inline std::vector<ObservationRecord> parse_observations(std::istream &in, IngestReport &report,
                                                         const std::string &name = "<stream>") {
  constexpr std::size_t kMaxDiagnostics = 50;
  std::vector<ObservationRecord> records;
  std::string line;
  if (!std::getline(in, line) || csv::trim(line) != kObservationHeader) {
    throw InvalidInput(name + ": missing or malformed header, expected '" +
                       std::string(kObservationHeader) + "'");
  }
  std::size_t line_no = 1;
  auto reject = [&](const std::string &reason) {
    ++report.rejected[reason];
    if (report.diagnostics.size() < kMaxDiagnostics) {
      report.diagnostics.push_back(name + " line " + std::to_string(line_no) + ": " + reason);
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (csv::trim(line).empty()) {
      continue;
    }
    ++report.rows_read;
    const auto fields = csv::split(line);
    if (fields.size() != 5) {
      reject("wrong field count");
      continue;
    }
    ObservationRecord r;
    if (!csv::parse_double(fields[0], r.lon) || !csv::parse_double(fields[1], r.lat) ||
        !csv::parse_double(fields[2], r.age_bp) || !csv::parse_double(fields[3], r.value)) {
      reject("unparseable number");
      continue;
    }
    if (!std::isfinite(r.lon) || !std::isfinite(r.lat) || !std::isfinite(r.age_bp) ||
        !std::isfinite(r.value)) {
      reject("non-finite value");
      continue;
    }
    if (r.lon < -180.0 || r.lon > 180.0) {
      reject("lon out of range");
      continue;
    }
    if (r.lat < -90.0 || r.lat > 90.0) {
      reject("lat out of range");
      continue;
    }
    if (r.age_bp < 0.0) {
      reject("negative age");
      continue;
    }
    r.source = std::string(csv::trim(fields[4]));
    if (r.source.empty()) {
      reject("empty source");
      continue;
    }
    records.push_back(std::move(r));
  }
  report.rows_accepted = records.size();
  return records;
}

inline std::vector<ObservationRecord> load_observations(const std::string &path,
                                                        IngestReport &report) {
  auto in = csv::open_in(path);
  return parse_observations(in, report, path);
}

inline void write_observations(std::ostream &out, const std::vector<ObservationRecord> &records) {
  out << kObservationHeader << "\n";
  for (const auto &r : records) {
    out << csv::format_double(r.lon) << ',' << csv::format_double(r.lat) << ','
        << csv::format_double(r.age_bp) << ',' << csv::format_double(r.value) << ',' << r.source
        << "\n";
  }
}

inline void save_observations(const std::string &path,
                              const std::vector<ObservationRecord> &records) {
  auto out = csv::open_out(path);
  write_observations(out, records);
  if (!out) {
    throw IoFailure("write failed: " + path);
  }
}

/// One gridded field (lon,lat,value_c) at a single age from one simulation.
struct GriddedSlice {
  std::string simulation_id;
  double age_bp = 0.0;
  std::vector<LonLat> nodes;
  std::vector<double> values;
};

inline GriddedSlice load_gridded_slice(const std::string &path, const std::string &simulation_id,
                                       double age_bp) {
  auto in = csv::open_in(path);
  std::string line;
  if (!std::getline(in, line) || csv::trim(line) != "lon,lat,value_c") {
    throw InvalidInput(path + ": expected header 'lon,lat,value_c'");
  }
  GriddedSlice s{simulation_id, age_bp, {}, {}};
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (csv::trim(line).empty()) {
      continue;
    }
    const auto f = csv::split(line);
    double lon = 0;
    double lat = 0;
    double v = 0;
    if (f.size() != 3 || !csv::parse_double(f[0], lon) || !csv::parse_double(f[1], lat) ||
        !csv::parse_double(f[2], v) || !std::isfinite(lon) || !std::isfinite(lat) ||
        !std::isfinite(v)) {
      throw InvalidInput(path + " line " + std::to_string(line_no) + ": malformed grid row");
    }
    s.nodes.push_back({lon, lat});
    s.values.push_back(v);
  }
  return s;
}

inline void save_gridded_slice(const std::string &path, const GriddedSlice &s) {
  auto out = csv::open_out(path);
  out << "lon,lat,value_c\n";
  for (std::size_t i = 0; i < s.nodes.size(); ++i) {
    out << csv::format_double(s.nodes[i].lon) << ',' << csv::format_double(s.nodes[i].lat) << ','
        << csv::format_double(s.values[i]) << "\n";
  }
}

/// Thin-plate spline phi(r) = r^2 log r with an affine tail, exact at nodes.
struct ThinPlateSpline {
  std::string slice_id;
  std::vector<LonLat> centers;
  Vec weights;
  Eigen::Vector3d affine = Eigen::Vector3d::Zero(); // c0 + c1 lon + c2 lat

  static double phi(double r2) { return r2 > 0.0 ? 0.5 * r2 * std::log(r2) : 0.0; }

  double operator()(const LonLat &x) const {
    double v = affine(0) + affine(1) * x.lon + affine(2) * x.lat;
    for (std::size_t i = 0; i < centers.size(); ++i) {
      const double du = x.lon - centers[i].lon;
      const double dv = x.lat - centers[i].lat;
      v += weights(static_cast<Eigen::Index>(i)) * phi(du * du + dv * dv);
    }
    return v;
  }
};

inline ThinPlateSpline fit_thin_plate_spline(std::vector<LonLat> nodes,
                                             const std::vector<double> &values,
                                             const std::string &slice_id) {
  const auto n = static_cast<Eigen::Index>(nodes.size());
  if (n < 3 || values.size() != nodes.size()) {
    throw InvalidInput("slice " + slice_id + ": need at least 3 nodes with values");
  }
  Eigen::MatrixXd p(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    p.row(i) << 1.0, nodes[i].lon, nodes[i].lat;
  }
  if (Eigen::ColPivHouseholderQR<Mat>(p).rank() < 3) {
    throw InvalidInput("slice " + slice_id + ": interpolation nodes are collinear");
  }
  Mat a = Mat::Zero(n + 3, n + 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) {
      const double du = nodes[i].lon - nodes[j].lon;
      const double dv = nodes[i].lat - nodes[j].lat;
      const double r2 = du * du + dv * dv;
      if (r2 == 0.0) {
        throw InvalidInput("slice " + slice_id + ": duplicate interpolation node");
      }
      a(i, j) = a(j, i) = ThinPlateSpline::phi(r2);
    }
  }
  a.topRightCorner(n, 3) = p;
  a.bottomLeftCorner(3, n) = p.transpose();
  Vec rhs = Vec::Zero(n + 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    rhs(i) = values[static_cast<std::size_t>(i)];
  }
  const Vec sol = a.partialPivLu().solve(rhs);
  const double resid = (a * sol - rhs).norm();
  if (!sol.allFinite() || resid > 1e-8 * (1.0 + rhs.norm())) {
    throw NumericalFailure("slice " + slice_id + ": singular interpolation system");
  }
  ThinPlateSpline s;
  s.slice_id = slice_id;
  s.centers = std::move(nodes);
  s.weights = sol.head(n);
  s.affine = sol.tail(3);
  return s;
}

/// m(x): arithmetic mean of one interpolant per slice.
struct BaselineModel {
  std::vector<ThinPlateSpline> interpolants;

  double operator()(const LonLat &x) const {
    if (interpolants.empty()) {
      throw InvalidInput("baseline has no interpolants");
    }
    double sum = 0.0;
    for (const auto &s : interpolants) {
      sum += s(x);
    }
    return sum / static_cast<double>(interpolants.size());
  }

  /// A single constant interpolant, used when no baseline slices are given.
  static BaselineModel constant(double c) {
    ThinPlateSpline s;
    s.slice_id = "constant";
    s.weights = Vec::Zero(0);
    s.affine << c, 0.0, 0.0;
    return BaselineModel{{s}};
  }
};

/// Fits one thin-plate interpolant per slice. Slices with more than
/// `max_nodes` nodes are thinned by keeping every k-th node.
inline BaselineModel fit_baseline(const std::vector<GriddedSlice> &slices,
                                  std::size_t max_nodes = 5000) {
  if (slices.empty()) {
    throw InvalidInput("fit_baseline needs at least one slice");
  }
  BaselineModel m;
  for (const auto &s : slices) {
    const std::size_t stride =
        max_nodes > 0 ? std::max<std::size_t>(1, (s.nodes.size() + max_nodes - 1) / max_nodes)
                      : 1;
    std::vector<LonLat> nodes;
    std::vector<double> values;
    for (std::size_t i = 0; i < s.nodes.size(); i += stride) {
      nodes.push_back(s.nodes[i]);
      values.push_back(s.values[i]);
    }
    const std::string id = s.simulation_id + "@" + csv::format_double(s.age_bp);
    m.interpolants.push_back(fit_thin_plate_spline(std::move(nodes), values, id));
  }
  return m;
}

inline void center(std::vector<ObservationRecord> &records, const BaselineModel &baseline) {
  for (auto &r : records) {
    r.value_centered = r.value - baseline(r.coords());
  }
}

inline void uncenter(std::vector<ObservationRecord> &records, const BaselineModel &baseline) {
  for (auto &r : records) {
    r.value = r.value_centered + baseline(r.coords());
  }
}

struct TrainTestSplit {
  std::vector<ObservationRecord> train;
  std::vector<ObservationRecord> test;
};

/// Holds out one time slice of one simulation; every other record, including
/// other sources at the same age, stays in train.
inline TrainTestSplit split_leave_time_slice_out(const std::vector<ObservationRecord> &records,
                                                 double held_out_age_bp,
                                                 const std::string &simulation_id) {
  TrainTestSplit out;
  for (const auto &r : records) {
    if (r.source == simulation_id && r.age_bp == held_out_age_bp) {
      out.test.push_back(r);
    } else {
      out.train.push_back(r);
    }
  }
  if (out.test.empty()) {
    throw InvalidInput("no records of '" + simulation_id + "' at age " +
                       csv::format_double(held_out_age_bp));
  }
  return out;
}

/// Distinct ages of one source, ascending.
inline std::vector<double> slice_ages(const std::vector<ObservationRecord> &records,
                                      const std::string &source) {
  std::vector<double> ages;
  for (const auto &r : records) {
    if (r.source == source) {
      ages.push_back(r.age_bp);
    }
  }
  std::sort(ages.begin(), ages.end());
  ages.erase(std::unique(ages.begin(), ages.end()), ages.end());
  return ages;
}

} // namespace dsgp
