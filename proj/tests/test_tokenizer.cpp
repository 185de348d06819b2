#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "owdf/tokenizer.hpp"

using namespace owdf;
using namespace owdf::tok;

namespace {

data::Dataset small_dataset(int n = 200, int h = 6, int l = 4) {
  sim::SimConfig c;
  c.gain_profile = sim::GainProfile::Reduced;
  c.n_packets = n;
  c.seed = 17;
  return data::prepare_dataset(sim::simulate_trace(c), {h, l}, 0.2, 1);
}

}  // namespace

TEST_CASE("discrete ids shift by one for the padding row") {
  REQUIRE(detail::map_id(std::nullopt, 11, "slot") == 0);
  REQUIRE(detail::map_id(0, 11, "slot") == 1);
  REQUIRE(detail::map_id(9, 11, "slot") == 10);
  REQUIRE(detail::map_id(500, 11, "slot") == 10);  // clamped to the last row
  REQUIRE_THROWS_AS(detail::map_id(-1, 11, "slot"), DataError);
}

TEST_CASE("feature batch masks the last history delay") {
  auto ds = small_dataset();
  TokenizerConfig cfg;
  auto windows = data::select(ds.samples, ds.split.train);
  windows.resize(3);
  FeatureBatch fb = make_feature_batch(windows, ds.stats, cfg);
  REQUIRE(fb.batch == 3);
  REQUIRE(fb.history == 6);
  REQUIRE(fb.delay.size() == 18);
  for (int b = 0; b < 3; ++b) {
    for (int i = 0; i < 5; ++i)
      REQUIRE(fb.delay[static_cast<std::size_t>(b * 6 + i)] ==
              Catch::Approx(ds.stats.z_delay(windows[static_cast<std::size_t>(b)]
                                                 .history(i)
                                                 .delay_ms)));
    // the last history record's delay is the first target: zeroed on input
    REQUIRE(fb.delay[static_cast<std::size_t>(b * 6 + 5)] == 0.0);
  }
}

TEST_CASE("the first prediction target never leaks into the embedding") {
  auto ds = small_dataset();
  TokenizerConfig cfg;
  diff::ParamStore ps;
  Rng init_rng(5);
  init_params(ps, cfg, init_rng);

  // two traces identical except for the delay of the window's last record
  auto recs_a = *ds.records;
  auto recs_b = *ds.records;
  recs_b[10].delay_ms += 100.0;
  data::WindowConfig w{6, 4};
  data::WindowSample wa{&recs_a, 10, w}, wb{&recs_b, 10, w};

  Rng r1(9), r2(9);
  auto ua = embed_window(wa, ds.stats, ps, cfg, false, r1);
  auto ub = embed_window(wb, ds.stats, ps, cfg, false, r2);
  REQUIRE(ua == ub);
}

TEST_CASE("batched embedding equals per-window embedding") {
  auto ds = small_dataset();
  TokenizerConfig cfg;
  diff::ParamStore ps;
  Rng init_rng(6);
  init_params(ps, cfg, init_rng);

  auto windows = data::select(ds.samples, ds.split.val);
  windows.resize(4);
  FeatureBatch fb = make_feature_batch(windows, ds.stats, cfg);
  Rng r(0);
  diff::Tape t;
  diff::Var u = embed_batch(t, ps, cfg, fb, false, r);
  REQUIRE(u.value().dim(0) == 4);
  REQUIRE(u.value().dim(1) == 6);
  REQUIRE(u.value().dim(2) == cfg.token_dim);

  std::size_t per = static_cast<std::size_t>(6 * cfg.token_dim);
  for (int b = 0; b < 4; ++b) {
    auto single =
        embed_window(windows[static_cast<std::size_t>(b)], ds.stats, ps, cfg,
                     false, r);
    REQUIRE(single.size() == per);
    for (std::size_t i = 0; i < per; ++i)
      REQUIRE(single[i] ==
              Catch::Approx(
                  u.value()[static_cast<std::size_t>(b) * per + i])
                  .margin(1e-12));
  }
}

TEST_CASE("embedding is deterministic at inference, stochastic in training") {
  auto ds = small_dataset();
  TokenizerConfig cfg;
  diff::ParamStore ps;
  Rng init_rng(7);
  init_params(ps, cfg, init_rng);
  const auto& w = ds.samples[0];

  Rng ra(3), rb(99);
  auto a = embed_window(w, ds.stats, ps, cfg, false, ra);
  auto b = embed_window(w, ds.stats, ps, cfg, false, rb);
  REQUIRE(a == b);

  Rng rc(3), rd(4);
  auto c = embed_window(w, ds.stats, ps, cfg, true, rc);
  auto d = embed_window(w, ds.stats, ps, cfg, true, rd);
  REQUIRE(c != d);
}

TEST_CASE("tokenizer gradients pass finite differences") {
  auto ds = small_dataset(120, 4, 3);
  TokenizerConfig cfg;
  cfg.token_dim = 6;
  diff::ParamStore ps;
  Rng init_rng(8);
  init_params(ps, cfg, init_rng);

  auto windows = data::select(ds.samples, ds.split.train);
  windows.resize(2);
  FeatureBatch fb = make_feature_batch(windows, ds.stats, cfg);
  Rng r(0);
  auto fn = [&]() {
    diff::Tape t;
    diff::Var u = embed_batch(t, ps, cfg, fb, false, r);
    diff::Var loss = diff::mean_all(t, diff::mul(t, u, u));
    t.backward(loss);
    return loss.scalar();
  };
  REQUIRE(diff::finite_diff_check(fn, ps, 1e-5, 48) < 1e-6);
}

TEST_CASE("tokenizer config validation") {
  TokenizerConfig cfg;
  cfg.token_dim = 7;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg.token_dim = 16;
  cfg.harq_rows = 1;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}
