#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dsgp/data_pipeline.hpp"
#include "dsgp/errors.hpp"
#include "dsgp/training.hpp"

namespace dsgp {

// Line-oriented text checkpoint. Every double is written as a C99 hex float,
// so save -> load -> save is bit-exact and files from identical runs compare
// equal byte for byte.

inline constexpr std::string_view kCheckpointMagic = "dsgp-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  }
  return h;
}

inline std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

struct Checkpoint {
  TrainedModel model;
  std::uint64_t config_hash = 0;
};

namespace detail {

class TokenReader {
public:
  explicit TokenReader(std::istream &in, std::string origin) : in_(in), origin_(std::move(origin)) {}

  std::string word() {
    std::string w;
    if (!(in_ >> w)) {
      fail("unexpected end of file");
    }
    return w;
  }

  void expect(std::string_view key) {
    const auto w = word();
    if (w != key) {
      fail("expected '" + std::string(key) + "', found '" + w + "'");
    }
  }

  double number() {
    const auto w = word();
    char *end = nullptr;
    const double v = std::strtod(w.c_str(), &end);
    if (end != w.c_str() + w.size()) {
      fail("malformed number '" + w + "'");
    }
    return v;
  }

  std::size_t count() {
    const auto w = word();
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(w.data(), w.data() + w.size(), v);
    if (ec != std::errc{} || p != w.data() + w.size()) {
      fail("malformed count '" + w + "'");
    }
    return v;
  }

  [[noreturn]] void fail(const std::string &why) const {
    throw InvalidInput(origin_ + ": corrupt checkpoint: " + why);
  }

private:
  std::istream &in_;
  std::string origin_;
};

} // namespace detail

inline void write_baseline(std::ostream &out, const BaselineModel &bl) {
  const auto hx = [](double v) { return hex_double(v); };
  out << "baseline " << bl.interpolants.size() << '\n';
  for (const auto &tps : bl.interpolants) {
    out << "interpolant " << tps.slice_id << ' ' << tps.centers.size() << ' ' << hx(tps.affine(0))
        << ' ' << hx(tps.affine(1)) << ' ' << hx(tps.affine(2)) << '\n';
    for (std::size_t i = 0; i < tps.centers.size(); ++i) {
      out << hx(tps.centers[i].lon) << ' ' << hx(tps.centers[i].lat) << ' '
          << hx(tps.weights(static_cast<Eigen::Index>(i))) << '\n';
    }
  }
}

inline BaselineModel read_baseline(detail::TokenReader &rd) {
  rd.expect("baseline");
  const auto k = rd.count();
  if (k == 0) {
    rd.fail("baseline has no interpolants");
  }
  BaselineModel bl;
  bl.interpolants.resize(k);
  for (auto &tps : bl.interpolants) {
    rd.expect("interpolant");
    tps.slice_id = rd.word();
    const auto nc = rd.count();
    tps.affine(0) = rd.number();
    tps.affine(1) = rd.number();
    tps.affine(2) = rd.number();
    tps.centers.resize(nc);
    tps.weights.resize(static_cast<Eigen::Index>(nc));
    for (std::size_t i = 0; i < nc; ++i) {
      tps.centers[i].lon = rd.number();
      tps.centers[i].lat = rd.number();
      tps.weights(static_cast<Eigen::Index>(i)) = rd.number();
    }
  }
  return bl;
}

/// Stand-alone baseline file written by preprocessing.
inline void save_baseline(const std::string &path, const BaselineModel &bl) {
  auto out = csv::open_out(path);
  write_baseline(out, bl);
  out << "end\n";
  out.flush();
  if (!out) {
    throw IoFailure("failed writing " + path);
  }
}

inline BaselineModel load_baseline(const std::string &path) {
  auto in = csv::open_in(path);
  detail::TokenReader rd(in, path);
  auto bl = read_baseline(rd);
  rd.expect("end");
  return bl;
}

inline void write_checkpoint(std::ostream &out, const Checkpoint &ck) {
  const auto &h = ck.model.hyper;
  const auto hx = [](double v) { return hex_double(v); };
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(ck.config_hash));
  out << "config_hash " << hash << '\n';
  out << "ell_lon " << hx(h.spatial.ell_lon) << '\n';
  out << "ell_lat " << hx(h.spatial.ell_lat) << '\n';
  out << "ell_t " << hx(h.temporal.ell_t) << '\n';
  out << "sigma_f " << hx(h.temporal.sigma_f) << '\n';
  out << "sigma " << hx(h.noise_sigma) << '\n';
  out << "jitter " << hx(h.jitter) << '\n';
  const auto &bb = h.inducing.bbox;
  out << "bbox " << hx(bb.lon_min) << ' ' << hx(bb.lon_max) << ' ' << hx(bb.lat_min) << ' '
      << hx(bb.lat_max) << '\n';
  out << "inducing " << h.inducing.spatial.size() << '\n';
  for (const auto &z : h.inducing.spatial) {
    out << hx(z.lon) << ' ' << hx(z.lat) << '\n';
  }
  out << "knots " << h.inducing.times.size() << '\n';
  for (double t : h.inducing.times) {
    out << hx(t) << '\n';
  }
  const auto &sites = ck.model.sites;
  out << "sites " << sites.knots.size() << ' ' << sites.cross.size() << '\n';
  for (const auto &s : sites.knots) {
    out << "site " << hx(s.log_scale) << '\n';
    for (Eigen::Index i = 0; i < s.lambda1.size(); ++i) {
      out << hx(s.lambda1(i)) << (i + 1 < s.lambda1.size() ? ' ' : '\n');
    }
    for (Eigen::Index r = 0; r < s.Lambda2.rows(); ++r) {
      for (Eigen::Index c = 0; c < s.Lambda2.cols(); ++c) {
        out << hx(s.Lambda2(r, c)) << (c + 1 < s.Lambda2.cols() ? ' ' : '\n');
      }
    }
  }
  for (const auto &m : sites.cross) {
    out << "cross\n";
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        out << hx(m(r, c)) << (c + 1 < m.cols() ? ' ' : '\n');
      }
    }
  }
  write_baseline(out, ck.model.baseline);
  out << "end\n";
}

inline Checkpoint read_checkpoint(std::istream &in, const std::string &origin = "checkpoint") {
  detail::TokenReader rd(in, origin);
  rd.expect(kCheckpointMagic);
  if (const auto v = rd.count(); v != static_cast<std::size_t>(kCheckpointVersion)) {
    rd.fail("unsupported version " + std::to_string(v));
  }
  Checkpoint ck;
  rd.expect("config_hash");
  {
    const auto w = rd.word();
    ck.config_hash = std::strtoull(w.c_str(), nullptr, 16);
  }
  auto &h = ck.model.hyper;
  rd.expect("ell_lon");
  h.spatial.ell_lon = rd.number();
  rd.expect("ell_lat");
  h.spatial.ell_lat = rd.number();
  rd.expect("ell_t");
  h.temporal.ell_t = rd.number();
  rd.expect("sigma_f");
  h.temporal.sigma_f = rd.number();
  rd.expect("sigma");
  h.noise_sigma = rd.number();
  rd.expect("jitter");
  h.jitter = rd.number();
  rd.expect("bbox");
  h.inducing.bbox.lon_min = rd.number();
  h.inducing.bbox.lon_max = rd.number();
  h.inducing.bbox.lat_min = rd.number();
  h.inducing.bbox.lat_max = rd.number();
  rd.expect("inducing");
  const auto ms = rd.count();
  h.inducing.spatial.resize(ms);
  for (auto &z : h.inducing.spatial) {
    z.lon = rd.number();
    z.lat = rd.number();
  }
  rd.expect("knots");
  const auto mt = rd.count();
  h.inducing.times.resize(mt);
  for (auto &t : h.inducing.times) {
    t = rd.number();
  }
  rd.expect("sites");
  const auto n_sites = rd.count();
  const auto n_cross = rd.count();
  if (n_sites != mt || (n_cross != 0 && n_cross + 1 != mt)) {
    rd.fail("site counts do not match the knots");
  }
  const auto n = static_cast<Eigen::Index>(ms);
  auto &sites = ck.model.sites;
  sites.knots.resize(n_sites);
  for (auto &s : sites.knots) {
    rd.expect("site");
    s.log_scale = rd.number();
    s.lambda1.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      s.lambda1(i) = rd.number();
    }
    s.Lambda2.resize(n, n);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index c = 0; c < n; ++c) {
        s.Lambda2(r, c) = rd.number();
      }
    }
  }
  sites.cross.resize(n_cross);
  for (auto &m : sites.cross) {
    rd.expect("cross");
    m.resize(n, n);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index c = 0; c < n; ++c) {
        m(r, c) = rd.number();
      }
    }
  }
  ck.model.baseline = read_baseline(rd);
  rd.expect("end");
  h.validate();
  return ck;
}

inline void save_checkpoint(const std::string &path, const Checkpoint &ck) {
  auto out = csv::open_out(path);
  write_checkpoint(out, ck);
  out.flush();
  if (!out) {
    throw IoFailure("failed writing " + path);
  }
}

inline Checkpoint load_checkpoint(const std::string &path) {
  auto in = csv::open_in(path);
  return read_checkpoint(in, path);
}

} // namespace dsgp
