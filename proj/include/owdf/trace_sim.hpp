#pragma once

// Synthetic 5G-uplink delay traces plus JSONL ingestion of recorded traces.
//
// Delay model per packet:
//   delay = queue_wait + frame_alignment + base_delay
//         + harq_retx * harq_penalty + rlc_retx * rlc_penalty
// with queue_wait from the single-server FIFO departure recursion
//   departure_n = max(arrival_n, departure_{n-1}) + service_n.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "owdf/common.hpp"

namespace owdf::sim {

enum class GainProfile { StableHigh, Reduced };

struct SimConfig {
  int packet_size_bytes = 100;          // B_s
  double inter_arrival_ms = 50.0;       // T_s
  int n_packets = 1000;
  GainProfile gain_profile = GainProfile::StableHigh;
  double frame_period_ms = 10.0;
  int slots_per_frame = 10;
  std::vector<int> eligible_slots = {0};  // uplink-eligible slot starts
  double base_delay_ms = 5.0;
  double harq_penalty_ms = 7.5;
  double rlc_penalty_ms = 25.0;
  int harq_max_attempts = 4;
  double clock_offset_drift_ms_per_packet = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (packet_size_bytes <= 0) throw ConfigError("packet_size_bytes must be > 0");
    if (inter_arrival_ms <= 0.0) throw ConfigError("inter_arrival_ms must be > 0");
    if (n_packets <= 0) throw ConfigError("n_packets must be > 0");
    if (frame_period_ms <= 0.0) throw ConfigError("frame_period_ms must be > 0");
    if (slots_per_frame < 1) throw ConfigError("slots_per_frame must be >= 1");
    if (base_delay_ms <= 0.0) throw ConfigError("base_delay_ms must be > 0");
    if (harq_penalty_ms <= 0.0) throw ConfigError("harq_penalty_ms must be > 0");
    if (rlc_penalty_ms <= 0.0) throw ConfigError("rlc_penalty_ms must be > 0");
    if (harq_max_attempts < 1) throw ConfigError("harq_max_attempts must be >= 1");
    if (eligible_slots.empty())
      throw ConfigError("eligible_slots must not be empty");
    for (int s : eligible_slots)
      if (s < 0 || s >= slots_per_frame)
        throw ConfigError("eligible slot out of range");
  }
};

struct ChannelState {
  int mcs_index = 20;
  double bler = 0.0;
};

inline ChannelState initial_channel(GainProfile profile) {
  if (profile == GainProfile::StableHigh) return {20, 0.0};
  return {15, 0.10};
}

// bounded +-1 random walk on MCS for the reduced profile, identity otherwise
inline ChannelState step_channel(const ChannelState& state, GainProfile profile,
                                 Rng& rng) {
  if (profile == GainProfile::StableHigh) return state;
  ChannelState next = state;
  std::uint64_t r = rng.next_below(3);
  int step = static_cast<int>(r) - 1;
  next.mcs_index = std::min(18, std::max(12, state.mcs_index + step));
  next.bler = 0.10;
  return next;
}

// wait from arrival until the start of the next uplink-eligible slot;
// sawtooth in the arrival time with period frame_period_ms
inline double frame_alignment_delay(double arrival_time_ms,
                                    const SimConfig& cfg) {
  cfg.validate();
  double slot_len = cfg.frame_period_ms / cfg.slots_per_frame;
  double phase = std::fmod(arrival_time_ms, cfg.frame_period_ms);
  if (phase < 0.0) phase += cfg.frame_period_ms;
  double best = cfg.frame_period_ms;
  for (int s : cfg.eligible_slots) {
    double start = s * slot_len;
    double wait = start - phase;
    if (wait < 0.0) wait += cfg.frame_period_ms;
    // treat an arrival exactly at a slot start as aligned
    if (wait >= cfg.frame_period_ms - 1e-9) wait = 0.0;
    best = std::min(best, wait);
  }
  return best;
}

struct PacketRecord {
  std::int64_t seq = 0;
  double arrival_time_ms = 0.0;
  int size_bytes = 0;
  double inter_arrival_ms = 0.0;
  std::optional<int> slot;
  std::optional<int> mcs;
  std::optional<int> harq_retx;
  std::optional<int> rlc_retx;
  double delay_ms = 0.0;
};

// linear MCS -> throughput proxy; mcs 20 moves 1000 B/ms
inline double service_time_ms(int size_bytes, int mcs) {
  return static_cast<double>(size_bytes) / (50.0 * std::max(1, mcs));
}

inline std::vector<PacketRecord> simulate_trace(const SimConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  ChannelState ch = initial_channel(cfg.gain_profile);

  std::vector<PacketRecord> out;
  out.reserve(static_cast<std::size_t>(cfg.n_packets));
  double slot_len = cfg.frame_period_ms / cfg.slots_per_frame;
  double prev_departure = -1e18;

  for (int n = 0; n < cfg.n_packets; ++n) {
    if (n > 0) ch = step_channel(ch, cfg.gain_profile, rng);

    double arrival = n * cfg.inter_arrival_ms;
    // phase relative to the 5G frame clock; the sender clock drifts
    double radio_time =
        arrival + n * cfg.clock_offset_drift_ms_per_packet;
    double phase = std::fmod(radio_time, cfg.frame_period_ms);
    if (phase < 0.0) phase += cfg.frame_period_ms;

    double service = service_time_ms(cfg.packet_size_bytes, ch.mcs_index);
    double start = std::max(arrival, prev_departure);
    double queue_wait = start - arrival;
    prev_departure = start + service;

    // HARQ rounds: i.i.d. Bernoulli(bler) failures per attempt; an exhausted
    // round triggers an RLC retransmission and a fresh round
    int harq_retx = 0;
    int rlc_retx = 0;
    for (;;) {
      int fails = 0;
      bool success = false;
      for (int a = 0; a < cfg.harq_max_attempts; ++a) {
        if (rng.uniform() >= ch.bler) {
          success = true;
          break;
        }
        ++fails;
      }
      if (success) {
        harq_retx = fails;
        break;
      }
      ++rlc_retx;
      if (rlc_retx >= 8) {  // give up counting; delay already dominated
        harq_retx = cfg.harq_max_attempts - 1;
        break;
      }
    }

    double align = frame_alignment_delay(radio_time, cfg);
    PacketRecord rec;
    rec.seq = n;
    rec.arrival_time_ms = arrival;
    rec.size_bytes = cfg.packet_size_bytes;
    rec.inter_arrival_ms = cfg.inter_arrival_ms;
    rec.slot = static_cast<int>(phase / slot_len) % cfg.slots_per_frame;
    rec.mcs = ch.mcs_index;
    rec.harq_retx = harq_retx;
    rec.rlc_retx = rlc_retx;
    rec.delay_ms = queue_wait + align + cfg.base_delay_ms +
                   harq_retx * cfg.harq_penalty_ms +
                   rlc_retx * cfg.rlc_penalty_ms;
    out.push_back(rec);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL trace files
// ---------------------------------------------------------------------------

inline nlohmann::json record_to_json(const PacketRecord& r) {
  nlohmann::json j;
  j["seq"] = r.seq;
  j["arrival_time_ms"] = r.arrival_time_ms;
  j["size_bytes"] = r.size_bytes;
  j["inter_arrival_ms"] = r.inter_arrival_ms;
  if (r.slot) j["slot"] = *r.slot;
  if (r.mcs) j["mcs"] = *r.mcs;
  if (r.harq_retx) j["harq_retx"] = *r.harq_retx;
  if (r.rlc_retx) j["rlc_retx"] = *r.rlc_retx;
  j["delay_ms"] = r.delay_ms;
  return j;
}

inline void write_records(const std::vector<PacketRecord>& recs,
                          std::ostream& os) {
  for (const auto& r : recs) os << record_to_json(r).dump() << "\n";
}

inline void write_records(const std::vector<PacketRecord>& recs,
                          const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot open for writing: " + path);
  write_records(recs, f);
}

inline std::vector<PacketRecord> ingest_records(std::istream& is,
                                                const std::string& origin) {
  std::vector<PacketRecord> out;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(origin + ":" + std::to_string(lineno) +
                      ": parse error: " + e.what());
    }
    try {
      PacketRecord r;
      r.seq = j.at("seq").get<std::int64_t>();
      r.arrival_time_ms = j.at("arrival_time_ms").get<double>();
      r.size_bytes = j.at("size_bytes").get<int>();
      r.inter_arrival_ms = j.at("inter_arrival_ms").get<double>();
      if (j.contains("slot")) r.slot = j["slot"].get<int>();
      if (j.contains("mcs")) r.mcs = j["mcs"].get<int>();
      if (j.contains("harq_retx")) r.harq_retx = j["harq_retx"].get<int>();
      if (j.contains("rlc_retx")) r.rlc_retx = j["rlc_retx"].get<int>();
      r.delay_ms = j.at("delay_ms").get<double>();
      if (r.delay_ms <= 0.0)
        throw DataError(origin + ":" + std::to_string(lineno) +
                        ": delay_ms must be > 0");
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(origin + ":" + std::to_string(lineno) +
                      ": parse error: " + e.what());
    }
    std::size_t k = out.size();
    if (k == 1) {
      if (out[0].seq != 0)
        throw DataError(origin + ":" + std::to_string(lineno) +
                        ": seq must start at 0");
    } else if (out[k - 1].seq <= out[k - 2].seq) {
      throw DataError(origin + ":" + std::to_string(lineno) +
                      ": seq not strictly increasing");
    }
  }
  return out;
}

inline std::vector<PacketRecord> ingest_records(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open trace file: " + path);
  return ingest_records(f, path);
}

// config (de)serialization for the CLI
inline SimConfig sim_config_from_json(const nlohmann::json& j) {
  SimConfig c;
  if (j.contains("packet_size_bytes")) c.packet_size_bytes = j["packet_size_bytes"];
  if (j.contains("inter_arrival_ms")) c.inter_arrival_ms = j["inter_arrival_ms"];
  if (j.contains("n_packets")) c.n_packets = j["n_packets"];
  if (j.contains("gain_profile")) {
    std::string p = j["gain_profile"];
    if (p == "stable_high") c.gain_profile = GainProfile::StableHigh;
    else if (p == "reduced") c.gain_profile = GainProfile::Reduced;
    else throw ConfigError("unknown gain_profile: " + p);
  }
  if (j.contains("frame_period_ms")) c.frame_period_ms = j["frame_period_ms"];
  if (j.contains("slots_per_frame")) c.slots_per_frame = j["slots_per_frame"];
  if (j.contains("eligible_slots"))
    c.eligible_slots = j["eligible_slots"].get<std::vector<int>>();
  if (j.contains("base_delay_ms")) c.base_delay_ms = j["base_delay_ms"];
  if (j.contains("harq_penalty_ms")) c.harq_penalty_ms = j["harq_penalty_ms"];
  if (j.contains("rlc_penalty_ms")) c.rlc_penalty_ms = j["rlc_penalty_ms"];
  if (j.contains("harq_max_attempts")) c.harq_max_attempts = j["harq_max_attempts"];
  if (j.contains("clock_offset_drift_ms_per_packet"))
    c.clock_offset_drift_ms_per_packet = j["clock_offset_drift_ms_per_packet"];
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  c.validate();
  return c;
}

inline nlohmann::json sim_config_to_json(const SimConfig& c) {
  nlohmann::json j;
  j["packet_size_bytes"] = c.packet_size_bytes;
  j["inter_arrival_ms"] = c.inter_arrival_ms;
  j["n_packets"] = c.n_packets;
  j["gain_profile"] =
      c.gain_profile == GainProfile::StableHigh ? "stable_high" : "reduced";
  j["frame_period_ms"] = c.frame_period_ms;
  j["slots_per_frame"] = c.slots_per_frame;
  j["eligible_slots"] = c.eligible_slots;
  j["base_delay_ms"] = c.base_delay_ms;
  j["harq_penalty_ms"] = c.harq_penalty_ms;
  j["rlc_penalty_ms"] = c.rlc_penalty_ms;
  j["harq_max_attempts"] = c.harq_max_attempts;
  j["clock_offset_drift_ms_per_packet"] = c.clock_offset_drift_ms_per_packet;
  j["seed"] = c.seed;
  return j;
}

}  // namespace owdf::sim
