#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "owdf/trace_sim.hpp"

using namespace owdf;
using namespace owdf::sim;

namespace {

SimConfig reduced_cfg() {
  SimConfig c;
  c.gain_profile = GainProfile::Reduced;
  c.packet_size_bytes = 200;
  c.inter_arrival_ms = 50.0;
  c.n_packets = 4000;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("frame alignment matches slot-grid enumeration") {
  SimConfig c;
  // oracle: scan candidate departure instants on a fine grid and take the
  // first eligible slot start at or after the arrival
  auto oracle = [&](double arrival) {
    double slot_len = c.frame_period_ms / c.slots_per_frame;
    for (double w = 0.0; w <= c.frame_period_ms + 1e-9; w += 1e-4) {
      double tt = arrival + w;
      double phase = std::fmod(tt, c.frame_period_ms);
      for (int s : c.eligible_slots) {
        double dist = std::fabs(phase - s * slot_len);
        dist = std::min(dist, c.frame_period_ms - dist);  // circular
        if (dist < 5e-5) return w;
      }
    }
    return -1.0;
  };
  for (double a : {0.0, 0.05, 2.5, 9.99, 10.0, 37.3, 123.456}) {
    double got = frame_alignment_delay(a, c);
    REQUIRE(got == Catch::Approx(oracle(a)).margin(2e-4));
  }
  // exact arrivals on a slot start align with zero wait
  REQUIRE(frame_alignment_delay(0.0, c) == 0.0);
  REQUIRE(frame_alignment_delay(20.0, c) == 0.0);
  // multiple eligible slots pick the nearest
  SimConfig c2;
  c2.eligible_slots = {0, 5};
  REQUIRE(frame_alignment_delay(4.0, c2) == Catch::Approx(1.0).margin(1e-9));
  REQUIRE(frame_alignment_delay(6.0, c2) == Catch::Approx(4.0).margin(1e-9));
}

TEST_CASE("queue recursion: hand-stepped FIFO oracle under congestion") {
  // arrivals every 1 ms but service takes 2 ms -> queue grows linearly
  SimConfig c;
  c.inter_arrival_ms = 1.0;
  c.packet_size_bytes = 2000;  // service = 2000/(50*20) = 2 ms
  c.n_packets = 6;
  c.frame_period_ms = 10.0;
  c.eligible_slots = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};  // no alignment effect
  auto recs = simulate_trace(c);
  // departure_n = max(arrival_n, departure_{n-1}) + 2; arrival_n = n
  double dep = -1e18;
  for (int n = 0; n < 6; ++n) {
    double arrival = n * 1.0;
    double start = std::max(arrival, dep);
    dep = start + 2.0;
    double queue = start - arrival;
    REQUIRE(recs[static_cast<std::size_t>(n)].delay_ms ==
            Catch::Approx(queue + c.base_delay_ms).margin(1e-9));
  }
}

TEST_CASE("stable-high profile: mcs pinned at 20, no retransmissions") {
  SimConfig c;
  c.n_packets = 500;
  auto recs = simulate_trace(c);
  for (const auto& r : recs) {
    REQUIRE(*r.mcs == 20);
    REQUIRE(*r.harq_retx == 0);
    REQUIRE(*r.rlc_retx == 0);
  }
}

TEST_CASE("reduced profile: clamped MCS walk stays in [12,18], mean near 15") {
  auto recs = simulate_trace(reduced_cfg());
  double sum = 0;
  for (const auto& r : recs) {
    REQUIRE(*r.mcs >= 12);
    REQUIRE(*r.mcs <= 18);
    sum += *r.mcs;
  }
  // symmetric reflected walk: stationary mean is the midpoint 15
  REQUIRE(sum / recs.size() == Catch::Approx(15.0).margin(0.5));
}

TEST_CASE("HARQ retransmission frequency tracks the BLER") {
  auto recs = simulate_trace(reduced_cfg());
  double with_retx = 0;
  for (const auto& r : recs)
    if (*r.harq_retx > 0 || *r.rlc_retx > 0) with_retx += 1;
  // P(first attempt fails) = bler = 0.10
  REQUIRE(with_retx / recs.size() == Catch::Approx(0.10).margin(0.01));
}

TEST_CASE("delay decomposes into alignment, base, and 7.5/25 ms jumps") {
  SimConfig c = reduced_cfg();
  c.clock_offset_drift_ms_per_packet = 1.0;
  c.n_packets = 1000;
  auto recs = simulate_trace(c);
  for (std::size_t n = 0; n < recs.size(); ++n) {
    const auto& r = recs[n];
    double radio = r.arrival_time_ms + static_cast<double>(n) * 1.0;
    double align = frame_alignment_delay(radio, c);
    double expect = align + c.base_delay_ms + *r.harq_retx * 7.5 +
                    *r.rlc_retx * 25.0;  // no queuing at this load
    REQUIRE(r.delay_ms == Catch::Approx(expect).margin(1e-9));
  }
}

TEST_CASE("clock drift produces a periodic slot sawtooth") {
  SimConfig c = reduced_cfg();
  c.clock_offset_drift_ms_per_packet = 1.0;
  c.n_packets = 100;
  auto recs = simulate_trace(c);
  // radio time advances 51 ms per packet -> phase walks 1 ms per packet,
  // so the slot label cycles with period 10
  for (std::size_t n = 0; n < recs.size(); ++n)
    REQUIRE(*recs[n].slot == static_cast<int>(n % 10));
}

TEST_CASE("simulation is deterministic per seed") {
  auto a = simulate_trace(reduced_cfg());
  auto b = simulate_trace(reduced_cfg());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].delay_ms == b[i].delay_ms);
    REQUIRE(*a[i].mcs == *b[i].mcs);
  }
  SimConfig c = reduced_cfg();
  c.seed = 6;
  auto d = simulate_trace(c);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].delay_ms != d[i].delay_ms) differs = true;
  REQUIRE(differs);
}

TEST_CASE("JSONL round trip preserves records") {
  auto recs = simulate_trace(reduced_cfg());
  recs.resize(50);
  std::ostringstream os;
  write_records(recs, os);
  std::istringstream is(os.str());
  auto back = ingest_records(is, "mem");
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    REQUIRE(back[i].seq == recs[i].seq);
    REQUIRE(back[i].delay_ms == recs[i].delay_ms);
    REQUIRE(back[i].slot == recs[i].slot);
    REQUIRE(back[i].harq_retx == recs[i].harq_retx);
  }
}

TEST_CASE("ingest rejects malformed input with line numbers") {
  {
    std::istringstream is("{\"seq\":0,\"arrival_time_ms\":0,\"size_bytes\":1,"
                          "\"inter_arrival_ms\":1,\"delay_ms\":5}\nnot json\n");
    try {
      ingest_records(is, "t");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      REQUIRE(std::string(e.what()).find("t:2") != std::string::npos);
    }
  }
  {
    // non-monotone seq
    std::istringstream is(
        "{\"seq\":0,\"arrival_time_ms\":0,\"size_bytes\":1,"
        "\"inter_arrival_ms\":1,\"delay_ms\":5}\n"
        "{\"seq\":0,\"arrival_time_ms\":1,\"size_bytes\":1,"
        "\"inter_arrival_ms\":1,\"delay_ms\":5}\n");
    REQUIRE_THROWS_AS(ingest_records(is, "t"), DataError);
  }
  {
    // nonpositive delay
    std::istringstream is("{\"seq\":0,\"arrival_time_ms\":0,\"size_bytes\":1,"
                          "\"inter_arrival_ms\":1,\"delay_ms\":0}\n");
    REQUIRE_THROWS_AS(ingest_records(is, "t"), DataError);
  }
  {
    // missing required key
    std::istringstream is("{\"seq\":0}\n");
    REQUIRE_THROWS_AS(ingest_records(is, "t"), DataError);
  }
}

TEST_CASE("optional radio features survive as missing") {
  std::istringstream is("{\"seq\":0,\"arrival_time_ms\":0,\"size_bytes\":1,"
                        "\"inter_arrival_ms\":1,\"delay_ms\":5}\n");
  auto recs = ingest_records(is, "t");
  REQUIRE(!recs[0].slot.has_value());
  REQUIRE(!recs[0].mcs.has_value());
}

TEST_CASE("config validation rejects nonsense") {
  SimConfig c;
  c.n_packets = 0;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  SimConfig c2;
  c2.eligible_slots = {12};
  REQUIRE_THROWS_AS(c2.validate(), ConfigError);
  SimConfig c3;
  c3.inter_arrival_ms = -1;
  REQUIRE_THROWS_AS(c3.validate(), ConfigError);
}

TEST_CASE("sim config JSON round trip") {
  SimConfig c = reduced_cfg();
  c.eligible_slots = {0, 4};
  c.clock_offset_drift_ms_per_packet = 0.25;
  SimConfig back = sim_config_from_json(sim_config_to_json(c));
  REQUIRE(back.gain_profile == c.gain_profile);
  REQUIRE(back.eligible_slots == c.eligible_slots);
  REQUIRE(back.clock_offset_drift_ms_per_packet ==
          c.clock_offset_drift_ms_per_packet);
  REQUIRE(back.seed == c.seed);
}
