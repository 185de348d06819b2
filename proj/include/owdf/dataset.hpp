#pragma once

// Windowed supervised samples over a packet trace, normalization statistics,
// and leak-free train/val/test splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "owdf/common.hpp"
#include "owdf/trace_sim.hpp"

namespace owdf::data {

struct WindowConfig {
  int history_len = 50;  // H
  int horizon_len = 50;  // L

  void validate() const {
    if (history_len < 1 || horizon_len < 1)
      throw ConfigError("history_len and horizon_len must be >= 1");
  }
};

// A sample is a view into the source trace: history records
// [m-H+1, m] and future delays of records [m, m+L-1]. The delay of record m
// is the first prediction target; its value is masked out of the model input
// by the tokenizer.
struct WindowSample {
  const std::vector<sim::PacketRecord>* records = nullptr;
  int m = 0;  // index of the last history record
  WindowConfig cfg;

  const sim::PacketRecord& history(int i) const {
    return (*records)[static_cast<std::size_t>(m - cfg.history_len + 1 + i)];
  }
  double future_delay_ms(int l) const {
    return (*records)[static_cast<std::size_t>(m + l)].delay_ms;
  }
  int first_record() const { return m - cfg.history_len + 1; }
  int last_record() const { return m + cfg.horizon_len - 1; }
};

inline std::vector<WindowSample> build_windows(
    const std::vector<sim::PacketRecord>& records, const WindowConfig& cfg) {
  cfg.validate();
  int n = static_cast<int>(records.size());
  int h = cfg.history_len, l = cfg.horizon_len;
  if (n < h + l - 1)
    throw DataError("too few records for windowing: have " + std::to_string(n) +
                    ", need at least " + std::to_string(h + l - 1));
  std::vector<WindowSample> out;
  out.reserve(static_cast<std::size_t>(n - h - l + 2));
  for (int m = h - 1; m <= n - l; ++m) out.push_back({&records, m, cfg});
  return out;
}

struct NormStats {
  double delay_mean = 0.0, delay_std = 1.0;
  double size_mean = 0.0, size_std = 1.0;
  double ia_mean = 0.0, ia_std = 1.0;

  double z_delay(double v) const { return (v - delay_mean) / delay_std; }
  double z_size(double v) const { return (v - size_mean) / size_std; }
  double z_ia(double v) const { return (v - ia_mean) / ia_std; }
  // standardized delay <-> ms affine map
  double delay_to_std(double ms) const { return (ms - delay_mean) / delay_std; }
  double delay_to_ms(double s) const { return s * delay_std + delay_mean; }
};

inline NormStats fit_norm_stats(const std::vector<WindowSample>& train) {
  if (train.empty()) throw DataError("fit_norm_stats: empty training split");
  double sd = 0, ss = 0, si = 0;
  double qd = 0, qs = 0, qi = 0;
  std::size_t n = 0;
  for (const auto& w : train)
    for (int i = 0; i < w.cfg.history_len; ++i) {
      const auto& r = w.history(i);
      sd += r.delay_ms;
      ss += r.size_bytes;
      si += r.inter_arrival_ms;
      ++n;
    }
  double md = sd / n, ms = ss / n, mi = si / n;
  for (const auto& w : train)
    for (int i = 0; i < w.cfg.history_len; ++i) {
      const auto& r = w.history(i);
      qd += (r.delay_ms - md) * (r.delay_ms - md);
      qs += (r.size_bytes - ms) * (r.size_bytes - ms);
      qi += (r.inter_arrival_ms - mi) * (r.inter_arrival_ms - mi);
    }
  const double floor = 1e-6;
  NormStats st;
  st.delay_mean = md;
  st.delay_std = std::max(floor, std::sqrt(qd / n));
  st.size_mean = ms;
  st.size_std = std::max(floor, std::sqrt(qs / n));
  st.ia_mean = mi;
  st.ia_std = std::max(floor, std::sqrt(qi / n));
  return st;
}

struct DatasetSplit {
  std::vector<int> train, val, test;  // indices into the sample vector
  int n_samples = 0;
  int n_features = 7;
  std::string source_id;
};

// The trailing test_fraction of the trace is held out; windows touching both
// regions are dropped so no record is shared between test and train/val.
inline DatasetSplit split_dataset(const std::vector<WindowSample>& samples,
                                  double test_fraction, std::uint64_t seed) {
  if (samples.empty()) throw DataError("split_dataset: no samples");
  if (test_fraction < 0.0 || test_fraction >= 1.0)
    throw ConfigError("test_fraction must be in [0,1)");

  int n_records = static_cast<int>(samples[0].records->size());
  int test_start_record =
      n_records - static_cast<int>(std::floor(test_fraction * n_records));

  DatasetSplit sp;
  sp.n_samples = static_cast<int>(samples.size());
  std::vector<int> pool;
  for (int i = 0; i < sp.n_samples; ++i) {
    const auto& w = samples[static_cast<std::size_t>(i)];
    if (w.last_record() < test_start_record)
      pool.push_back(i);
    else if (w.first_record() >= test_start_record)
      sp.test.push_back(i);
    // windows straddling the boundary are discarded
  }
  if (pool.size() < 5)
    throw DataError("split_dataset: not enough samples outside the test "
                    "segment (" + std::to_string(pool.size()) + ")");

  Rng rng(seed);
  shuffle_indices(pool, rng);
  std::size_t n_train = (pool.size() * 8) / 10;
  sp.train.assign(pool.begin(), pool.begin() + static_cast<long>(n_train));
  sp.val.assign(pool.begin() + static_cast<long>(n_train), pool.end());
  std::sort(sp.train.begin(), sp.train.end());
  std::sort(sp.val.begin(), sp.val.end());
  return sp;
}

template <typename Idx>
inline std::vector<WindowSample> select(const std::vector<WindowSample>& all,
                                        const Idx& idx) {
  std::vector<WindowSample> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(all[static_cast<std::size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------
// prepared-dataset manifest (directory with manifest.json + trace.jsonl)
// ---------------------------------------------------------------------------

// records live behind a shared_ptr so WindowSample views stay valid when the
// Dataset itself is moved around
struct Dataset {
  std::shared_ptr<std::vector<sim::PacketRecord>> records;
  WindowConfig window;
  NormStats stats;
  DatasetSplit split;
  std::vector<WindowSample> samples;  // views into *records
};

inline nlohmann::json norm_stats_to_json(const NormStats& s) {
  return {{"delay_mean", s.delay_mean}, {"delay_std", s.delay_std},
          {"size_mean", s.size_mean},   {"size_std", s.size_std},
          {"ia_mean", s.ia_mean},       {"ia_std", s.ia_std}};
}

inline NormStats norm_stats_from_json(const nlohmann::json& j) {
  NormStats s;
  s.delay_mean = j.at("delay_mean");
  s.delay_std = j.at("delay_std");
  s.size_mean = j.at("size_mean");
  s.size_std = j.at("size_std");
  s.ia_mean = j.at("ia_mean");
  s.ia_std = j.at("ia_std");
  if (s.delay_std <= 0 || s.size_std <= 0 || s.ia_std <= 0)
    throw DataError("norm stats: scales must be > 0");
  return s;
}

inline std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  sim::write_records(*ds.records, dir + "/trace.jsonl");
  nlohmann::json j;
  j["window"] = {{"history_len", ds.window.history_len},
                 {"horizon_len", ds.window.horizon_len}};
  j["norm_stats"] = norm_stats_to_json(ds.stats);
  j["split"] = {{"train", ds.split.train},
                {"val", ds.split.val},
                {"test", ds.split.test}};
  j["n_samples"] = ds.split.n_samples;
  j["n_features"] = ds.split.n_features;
  j["source_hash"] = fnv1a(slurp(dir + "/trace.jsonl"));
  std::ofstream f(dir + "/manifest.json");
  if (!f) throw DataError("cannot write manifest in " + dir);
  f << j.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  ds.records = std::make_shared<std::vector<sim::PacketRecord>>(
      sim::ingest_records(dir + "/trace.jsonl"));
  nlohmann::json j = nlohmann::json::parse(slurp(dir + "/manifest.json"));
  ds.window.history_len = j.at("window").at("history_len");
  ds.window.horizon_len = j.at("window").at("horizon_len");
  ds.window.validate();
  ds.stats = norm_stats_from_json(j.at("norm_stats"));
  ds.split.train = j.at("split").at("train").get<std::vector<int>>();
  ds.split.val = j.at("split").at("val").get<std::vector<int>>();
  ds.split.test = j.at("split").at("test").get<std::vector<int>>();
  ds.split.n_samples = j.at("n_samples");
  ds.split.n_features = j.at("n_features");
  std::uint64_t h = fnv1a(slurp(dir + "/trace.jsonl"));
  if (j.contains("source_hash") && j["source_hash"].get<std::uint64_t>() != h)
    throw DataError("dataset trace does not match manifest source_hash");
  ds.samples = build_windows(*ds.records, ds.window);
  return ds;
}

inline Dataset prepare_dataset(std::vector<sim::PacketRecord> records,
                               WindowConfig window, double test_fraction,
                               std::uint64_t seed) {
  Dataset ds;
  ds.records =
      std::make_shared<std::vector<sim::PacketRecord>>(std::move(records));
  ds.window = window;
  ds.samples = build_windows(*ds.records, window);
  ds.split = split_dataset(ds.samples, test_fraction, seed);
  ds.stats = fit_norm_stats(select(ds.samples, ds.split.train));
  return ds;
}

}  // namespace owdf::data
