#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <random>
#include <sstream>

#include "dsgp/data_pipeline.hpp"

using namespace dsgp;

namespace {

std::vector<ObservationRecord> parse(const std::string &text, IngestReport &rep) {
  std::istringstream in(text);
  return parse_observations(in, rep, "mem");
}

GriddedSlice constant_slice(double c, const std::string &id) {
  GriddedSlice s{id, 6000.0, {}, {}};
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 4; ++j) {
      s.nodes.push_back({-10.0 + 5.0 * i, 40.0 + 4.0 * j});
      s.values.push_back(c);
    }
  }
  return s;
}

GriddedSlice wavy_slice(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> lon(-10, 40), lat(35, 70), v(-5, 25);
  GriddedSlice s{"wavy" + std::to_string(seed), 6000.0, {}, {}};
  for (int i = 0; i < 60; ++i) {
    s.nodes.push_back({lon(rng), lat(rng)});
    s.values.push_back(v(rng));
  }
  return s;
}

std::string temp_path(const std::string &name) {
  return (std::filesystem::temp_directory_path() /
          ("dsgp_" + std::to_string(::getpid()) + "_" + name))
      .string();
}

} // namespace

TEST(Ingest, WellFormedRows) {
  IngestReport rep;
  const auto r = parse("lon,lat,age_bp,value_c,source\n"
                       "10,50,0,12.5,pollen\n"
                       "-5.5,41.25,6000,8,sim\n"
                       "179,-89,21000,-3,pollen\n",
                       rep);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(rep.rows_read, 3u);
  EXPECT_EQ(rep.rows_rejected(), 0u);
  EXPECT_DOUBLE_EQ(r[1].lat, 41.25);
  EXPECT_EQ(r[1].source, "sim");
  EXPECT_DOUBLE_EQ(r[2].time_ka(), -21.0);
}

TEST(Ingest, RejectsAndCountsBadRows) {
  IngestReport rep;
  const auto r = parse("lon,lat,age_bp,value_c,source\n"
                       "10,95,0,12.5,pollen\n"
                       "190,50,0,1,pollen\n"
                       "10,50,-1,1,pollen\n"
                       "10,50,0,nan,pollen\n"
                       "10,50,0,abc,pollen\n"
                       "10,50,0,1\n"
                       "10,50,0,1,\n"
                       "1,2,3,4,ok\n",
                       rep);
  EXPECT_EQ(r.size(), 1u);
  EXPECT_EQ(rep.rows_read, 8u);
  EXPECT_EQ(rep.rejected["lat out of range"], 1u);
  EXPECT_EQ(rep.rejected["lon out of range"], 1u);
  EXPECT_EQ(rep.rejected["negative age"], 1u);
  EXPECT_EQ(rep.rejected["non-finite value"], 1u);
  EXPECT_EQ(rep.rejected["unparseable number"], 1u);
  EXPECT_EQ(rep.rejected["wrong field count"], 1u);
  EXPECT_EQ(rep.rejected["empty source"], 1u);
  EXPECT_EQ(rep.rows_rejected() + rep.rows_accepted, rep.rows_read);
  EXPECT_NE(rep.diagnostics.front().find("line 2"), std::string::npos);
}

TEST(Ingest, MissingHeaderIsFatal) {
  IngestReport rep;
  EXPECT_THROW(parse("10,50,0,12.5,pollen\n", rep), InvalidInput);
  EXPECT_THROW(parse("", rep), InvalidInput);
}

TEST(Ingest, SaveLoadRoundTripIsExact) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<ObservationRecord> recs;
  for (int i = 0; i < 200; ++i) {
    ObservationRecord r;
    r.lon = 180.0 * u(rng);
    r.lat = 90.0 * u(rng);
    r.age_bp = 21000.0 * std::abs(u(rng));
    r.value = 30.0 * u(rng);
    r.source = i % 2 ? "pollen" : "sim";
    recs.push_back(r);
  }
  const auto path = temp_path("roundtrip.csv");
  save_observations(path, recs);
  IngestReport rep;
  const auto back = load_observations(path, rep);
  std::filesystem::remove(path);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_TRUE(back[i] == recs[i]) << i;
  }
}

TEST(Ingest, LargeCorpusLoadsQuickly) {
  // same row count as the full compilation
  constexpr std::size_t kRows = 661'028;
  const auto path = temp_path("large.csv");
  {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> lon(-180, 180), lat(-90, 90), age(0, 21000),
        v(-30, 30);
    std::vector<ObservationRecord> recs(kRows);
    for (auto &r : recs) {
      r = {lon(rng), lat(rng), age(rng), v(rng), "pollen"};
    }
    save_observations(path, recs);
  }
  const auto t0 = std::chrono::steady_clock::now();
  IngestReport rep;
  const auto recs = load_observations(path, rep);
  const double sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::filesystem::remove(path);
  EXPECT_EQ(recs.size(), kRows);
  EXPECT_LT(sec, 60.0);
}

TEST(Baseline, ConstantFields) {
  const auto one = fit_baseline({constant_slice(4.0, "a")});
  EXPECT_NEAR(one({3.0, 55.0}), 4.0, 1e-9);
  EXPECT_NEAR(one({-100.0, 0.0}), 4.0, 1e-9);
  const auto two = fit_baseline({constant_slice(1.0, "a"), constant_slice(3.0, "b")});
  EXPECT_NEAR(two({12.0, 47.0}), 2.0, 1e-9);
  EXPECT_NEAR(two({80.0, -20.0}), 2.0, 1e-9);
}

TEST(Baseline, InterpolantsAreExactAtNodes) {
  const auto slices = std::vector{wavy_slice(3), wavy_slice(4)};
  const auto m = fit_baseline(slices);
  for (std::size_t k = 0; k < slices.size(); ++k) {
    for (std::size_t i = 0; i < slices[k].nodes.size(); ++i) {
      EXPECT_NEAR(m.interpolants[k](slices[k].nodes[i]), slices[k].values[i], 1e-6);
    }
  }
}

TEST(Baseline, OrderOfSlicesDoesNotMatter) {
  const auto a = fit_baseline({wavy_slice(5), wavy_slice(6), constant_slice(2.0, "c")});
  const auto b = fit_baseline({constant_slice(2.0, "c"), wavy_slice(6), wavy_slice(5)});
  for (const LonLat x : {LonLat{0, 40}, LonLat{25, 60}, LonLat{-3, 66}}) {
    EXPECT_NEAR(a(x), b(x), 1e-10);
  }
}

TEST(Baseline, RejectsDegenerateSlices) {
  GriddedSlice line{"line", 0.0, {{0, 0}, {1, 1}, {2, 2}, {3, 3}}, {1, 2, 3, 4}};
  EXPECT_THROW(fit_baseline({line}), InvalidInput);
  GriddedSlice tiny{"tiny", 0.0, {{0, 0}, {1, 0}}, {1, 2}};
  EXPECT_THROW(fit_baseline({tiny}), InvalidInput);
  EXPECT_THROW(fit_baseline({}), InvalidInput);
}

TEST(Baseline, ThinningKeepsEveryKthNode) {
  const auto s = wavy_slice(7);
  const auto m = fit_baseline({s}, 20);
  EXPECT_EQ(m.interpolants[0].centers.size(), 20u);
  EXPECT_EQ(m.interpolants[0].centers[1], s.nodes[3]);
}

TEST(Center, RoundTripAndConstantShift) {
  const auto m = fit_baseline({wavy_slice(8)});
  std::vector<ObservationRecord> recs;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> lon(-10, 40), lat(35, 70), v(-5, 25);
  for (int i = 0; i < 50; ++i) {
    recs.push_back({lon(rng), lat(rng), 1000.0, v(rng), "pollen"});
  }
  auto c = recs;
  center(c, m);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_DOUBLE_EQ(c[i].value_centered, recs[i].value - m(recs[i].coords()));
  }
  auto u = c;
  for (auto &r : u) {
    r.value = 0.0;
  }
  uncenter(u, m);
  for (std::size_t i = 0; i < u.size(); ++i) {
    EXPECT_NEAR(u[i].value, recs[i].value, 1e-12);
  }

  const auto k = BaselineModel::constant(3.5);
  auto d = recs;
  center(d, k);
  EXPECT_DOUBLE_EQ(d[0].value_centered, recs[0].value - 3.5);
  auto on = std::vector<ObservationRecord>{{5.0, 50.0, 0.0, m({5.0, 50.0}), "sim"}};
  center(on, m);
  EXPECT_EQ(on[0].value_centered, 0.0);
}

TEST(Split, LeaveOneSliceOutPartitions) {
  std::vector<ObservationRecord> recs;
  for (int a = 0; a < 16; ++a) {
    for (int i = 0; i < 7; ++i) {
      recs.push_back({1.0 * i, 40.0, 1000.0 * a, 0.1 * i, "sim"});
    }
  }
  recs.push_back({3.0, 45.0, 5000.0, 1.0, "pollen"});
  recs.push_back({4.0, 46.0, 9000.0, 1.0, "other"});
  const auto ages = slice_ages(recs, "sim");
  ASSERT_EQ(ages.size(), 16u);
  std::size_t united = 0;
  for (double age : ages) {
    const auto sp = split_leave_time_slice_out(recs, age, "sim");
    EXPECT_EQ(sp.test.size(), 7u);
    EXPECT_EQ(sp.train.size() + sp.test.size(), recs.size());
    for (const auto &t : sp.test) {
      EXPECT_EQ(t.source, "sim");
      EXPECT_EQ(t.age_bp, age);
      EXPECT_EQ(std::count(sp.train.begin(), sp.train.end(), t), 0);
    }
    united += sp.test.size();
  }
  EXPECT_EQ(united, 16u * 7u);
  const auto sp = split_leave_time_slice_out(recs, 5000.0, "sim");
  EXPECT_EQ(std::count_if(sp.train.begin(), sp.train.end(),
                          [](const auto &r) { return r.source == "pollen"; }),
            1);
  EXPECT_THROW(split_leave_time_slice_out(recs, 123.0, "sim"), InvalidInput);
}
