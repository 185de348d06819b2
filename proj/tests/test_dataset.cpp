#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "owdf/dataset.hpp"

using namespace owdf;
using namespace owdf::data;

namespace {

std::vector<sim::PacketRecord> make_trace(int n, std::uint64_t seed = 3) {
  sim::SimConfig c;
  c.gain_profile = sim::GainProfile::Reduced;
  c.n_packets = n;
  c.seed = seed;
  return sim::simulate_trace(c);
}

std::string temp_dir(const char* tag) {
  auto p = std::filesystem::temp_directory_path() /
           (std::string("owdf_test_") + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace

TEST_CASE("window count and record reconstruction") {
  auto recs = make_trace(120);
  WindowConfig cfg{10, 5};
  auto windows = build_windows(recs, cfg);
  REQUIRE(static_cast<int>(windows.size()) == 120 - 10 - 5 + 2);

  const auto& w = windows[7];  // m = 9 + 7 = 16
  REQUIRE(w.first_record() == 7);
  REQUIRE(w.last_record() == 16 + 4);
  for (int i = 0; i < 10; ++i)
    REQUIRE(w.history(i).seq == recs[static_cast<std::size_t>(7 + i)].seq);
  for (int l = 0; l < 5; ++l)
    REQUIRE(w.future_delay_ms(l) ==
            recs[static_cast<std::size_t>(16 + l)].delay_ms);
  // the first target is the last history record's own delay
  REQUIRE(w.future_delay_ms(0) == w.history(9).delay_ms);
}

TEST_CASE("windowing rejects too-short traces") {
  auto recs = make_trace(10);
  REQUIRE_THROWS_AS(build_windows(recs, WindowConfig{8, 4}), DataError);
  REQUIRE_NOTHROW(build_windows(recs, WindowConfig{6, 5}));
  REQUIRE_THROWS_AS(build_windows(recs, WindowConfig{0, 5}), ConfigError);
}

TEST_CASE("normalization: train features standardize to zero mean unit var") {
  auto ds = prepare_dataset(make_trace(400), {10, 5}, 0.2, 7);
  auto train = select(ds.samples, ds.split.train);
  double s = 0, q = 0;
  std::size_t n = 0;
  for (const auto& w : train)
    for (int i = 0; i < 10; ++i) {
      double z = ds.stats.z_delay(w.history(i).delay_ms);
      s += z;
      q += z * z;
      ++n;
    }
  double mean = s / static_cast<double>(n);
  REQUIRE(mean == Catch::Approx(0.0).margin(1e-9));
  REQUIRE(q / static_cast<double>(n) - mean * mean ==
          Catch::Approx(1.0).margin(1e-9));
  // round trip
  REQUIRE(ds.stats.delay_to_ms(ds.stats.delay_to_std(37.5)) ==
          Catch::Approx(37.5).margin(1e-12));
}

TEST_CASE("split: test segment shares no records with train or val") {
  auto ds = prepare_dataset(make_trace(500), {10, 10}, 0.25, 9);
  REQUIRE(!ds.split.test.empty());
  int min_test_record = 1 << 30;
  for (int i : ds.split.test)
    min_test_record =
        std::min(min_test_record, ds.samples[static_cast<std::size_t>(i)].first_record());
  for (int i : ds.split.train)
    REQUIRE(ds.samples[static_cast<std::size_t>(i)].last_record() < min_test_record);
  for (int i : ds.split.val)
    REQUIRE(ds.samples[static_cast<std::size_t>(i)].last_record() < min_test_record);

  std::set<int> tr(ds.split.train.begin(), ds.split.train.end());
  for (int i : ds.split.val) REQUIRE(tr.count(i) == 0);
  // roughly 80/20 pool split
  double ratio = static_cast<double>(ds.split.train.size()) /
                 static_cast<double>(ds.split.train.size() + ds.split.val.size());
  REQUIRE(ratio == Catch::Approx(0.8).margin(0.01));
}

TEST_CASE("split is deterministic per seed and varies across seeds") {
  auto recs = make_trace(300);
  auto w = build_windows(recs, {5, 5});
  auto a = split_dataset(w, 0.2, 42);
  auto b = split_dataset(w, 0.2, 42);
  REQUIRE(a.train == b.train);
  REQUIRE(a.val == b.val);
  auto c = split_dataset(w, 0.2, 43);
  REQUIRE(a.train != c.train);
  REQUIRE(a.test == c.test);  // test segment depends only on the fraction
}

TEST_CASE("dataset save/load round trip") {
  std::string dir = temp_dir("ds_roundtrip");
  auto ds = prepare_dataset(make_trace(300), {8, 6}, 0.2, 11);
  save_dataset(ds, dir);
  Dataset back = load_dataset(dir);
  REQUIRE(back.records->size() == ds.records->size());
  REQUIRE(back.window.history_len == 8);
  REQUIRE(back.window.horizon_len == 6);
  REQUIRE(back.stats.delay_mean == Catch::Approx(ds.stats.delay_mean));
  REQUIRE(back.split.train == ds.split.train);
  REQUIRE(back.split.val == ds.split.val);
  REQUIRE(back.split.test == ds.split.test);
  REQUIRE(back.samples.size() == ds.samples.size());
}

TEST_CASE("tampered trace fails the manifest hash check") {
  std::string dir = temp_dir("ds_tamper");
  auto ds = prepare_dataset(make_trace(300), {8, 6}, 0.2, 11);
  save_dataset(ds, dir);
  std::ofstream f(dir + "/trace.jsonl", std::ios::app);
  f << "\n";
  f.close();
  REQUIRE_THROWS_AS(load_dataset(dir), DataError);
}

TEST_CASE("moved dataset keeps sample views valid") {
  auto ds = prepare_dataset(make_trace(200), {5, 5}, 0.2, 3);
  double before = ds.samples[0].future_delay_ms(0);
  Dataset moved = std::move(ds);
  REQUIRE(moved.samples[0].future_delay_ms(0) == before);
}

TEST_CASE("invalid split parameters throw") {
  auto recs = make_trace(100);
  auto w = build_windows(recs, {5, 5});
  REQUIRE_THROWS_AS(split_dataset(w, 1.0, 1), ConfigError);
  REQUIRE_THROWS_AS(split_dataset(w, -0.1, 1), ConfigError);
  REQUIRE_THROWS_AS(split_dataset(w, 0.99, 1), DataError);  // empty pool
}
