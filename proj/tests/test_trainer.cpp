#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "owdf/evaluator.hpp"
#include "owdf/trainer.hpp"

using namespace owdf;
using namespace owdf::train;

namespace {

// raw head output encoding an exact standard normal: one component, weight 1,
// mu 0, softplus(sigma_raw) + floor = 1
double std_normal_sigma_raw() { return std::log(std::exp(1.0 - mdn::kSigmaFloor) - 1.0); }

// i.i.d. Gaussian delays: the best achievable standardized NLL is the entropy
// of N(0,1), 0.5*ln(2*pi*e) = 1.418939
std::vector<sim::PacketRecord> gaussian_trace(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<sim::PacketRecord> recs;
  for (int i = 0; i < n; ++i) {
    sim::PacketRecord r;
    r.seq = i;
    r.arrival_time_ms = 10.0 * i;
    r.inter_arrival_ms = 10.0;
    r.size_bytes = 500;
    r.delay_ms = std::max(0.1, 30.0 + 2.0 * rng.normal());
    recs.push_back(r);
  }
  return recs;
}

model::Forecaster small_mlp(int history, int horizon, std::uint64_t seed) {
  model::Forecaster f;
  f.cfg.kind = model::ModelKind::Mlp;
  f.cfg.token_dim = 8;
  f.cfg.mixture_components = 4;
  f.cfg.history = history;
  f.cfg.horizon = horizon;
  Rng rng(seed);
  f.init(rng);
  return f;
}

std::string temp_path(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "owdf_trainer_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

}  // namespace

TEST_CASE("nll_loss: standard normal theta at y=0 gives 0.5*ln(2*pi)") {
  diff::Tape t;
  // K=1: [logit, mu, sigma_raw] per (sample, step)
  diff::Var theta = t.constant(diff::Tensor::from(
      {2, 1, 3}, {0.0, 0.0, std_normal_sigma_raw(),
                  0.0, 0.0, std_normal_sigma_raw()}));
  diff::Var loss =
      nll_loss(t, theta, {0.0, 0.0}, 1, LossMode::MultiStep);
  REQUIRE(loss.scalar() == Catch::Approx(mdn::kHalfLog2Pi).margin(1e-9));
}

TEST_CASE("nll_loss sums scalar log-probs across the horizon") {
  Rng rng(31);
  int b = 2, l = 3, k = 2;
  std::vector<double> raw, y;
  for (int i = 0; i < b * l * 3 * k; ++i) raw.push_back(rng.uniform(-1, 1));
  for (int i = 0; i < b * l; ++i) y.push_back(rng.uniform(-1, 1));

  double expect = 0;
  for (int i = 0; i < b * l; ++i) {
    std::vector<double> row(raw.begin() + i * 3 * k,
                            raw.begin() + (i + 1) * 3 * k);
    expect -= mdn::log_prob(mdn::to_mixture(row), y[static_cast<std::size_t>(i)]);
  }
  expect /= b;

  diff::Tape t;
  diff::Var theta =
      t.constant(diff::Tensor::from({b, l, 3 * k}, std::vector<double>(raw)));
  diff::Var loss = nll_loss(t, theta, y, l, LossMode::MultiStep);
  REQUIRE(loss.scalar() == Catch::Approx(expect).margin(1e-10));
}

TEST_CASE("single-step loss tiles one distribution over every step") {
  Rng rng(32);
  int k = 2, l = 4;
  std::vector<double> raw, y;
  for (int i = 0; i < 3 * k; ++i) raw.push_back(rng.uniform(-1, 1));
  for (int i = 0; i < l; ++i) y.push_back(rng.uniform(-1, 1));
  mdn::MixtureParams m = mdn::to_mixture(raw);
  double expect = 0;
  for (double yy : y) expect -= mdn::log_prob(m, yy);

  diff::Tape t;
  diff::Var theta =
      t.constant(diff::Tensor::from({1, 1, 3 * k}, std::vector<double>(raw)));
  diff::Var loss = nll_loss(t, theta, y, l, LossMode::SingleStep);
  REQUIRE(loss.scalar() == Catch::Approx(expect).margin(1e-10));

  REQUIRE_THROWS_AS(
      nll_loss(t, t.constant(diff::Tensor({1, 2, 6})), y, l,
               LossMode::SingleStep),
      ShapeError);
  REQUIRE_THROWS_AS(
      nll_loss(t, t.constant(diff::Tensor({1, 2, 6})), y, l,
               LossMode::MultiStep),
      ShapeError);
  REQUIRE_THROWS_AS(
      nll_loss(t, theta, {std::nan("")}, 1, LossMode::SingleStep), DataError);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  auto ds = data::prepare_dataset(gaussian_trace(150, 41), {4, 1}, 0.2, 1);
  model::Forecaster f = small_mlp(4, 1, 2);
  auto before = f.params.get("head.w");
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.max_epochs = 2;
  owdf::train::train(f, ds, cfg);
  const auto& after = f.params.get("head.w");
  for (std::size_t i = 0; i < before.size(); ++i)
    REQUIRE(after[i] == before[i]);
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto ds = data::prepare_dataset(gaussian_trace(150, 42), {4, 1}, 0.2, 1);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.seed = 77;

  model::Forecaster a = small_mlp(4, 1, 5);
  model::Forecaster b = small_mlp(4, 1, 5);
  TrainHistory ha = owdf::train::train(a, ds, cfg);
  TrainHistory hb = owdf::train::train(b, ds, cfg);
  REQUIRE(ha.train_nll == hb.train_nll);
  REQUIRE(ha.val_nll == hb.val_nll);
  const auto& wa = a.params.get("head.w");
  const auto& wb = b.params.get("head.w");
  for (std::size_t i = 0; i < wa.size(); ++i) REQUIRE(wa[i] == wb[i]);

  cfg.seed = 78;
  model::Forecaster c = small_mlp(4, 1, 5);
  TrainHistory hc = owdf::train::train(c, ds, cfg);
  REQUIRE(ha.train_nll != hc.train_nll);
}

TEST_CASE("trainer recovers the entropy of an i.i.d. Gaussian source") {
  auto ds = data::prepare_dataset(gaussian_trace(500, 43), {4, 1}, 0.2, 1);
  model::Forecaster f = small_mlp(4, 1, 6);
  f.cfg.dropout = 0.05;
  TrainConfig cfg;
  cfg.max_epochs = 40;
  cfg.patience = 12;
  TrainHistory h = owdf::train::train(f, ds, cfg);

  REQUIRE(h.best_val_nll < h.val_nll.front());  // it actually learned
  REQUIRE(h.per_sample_time_s > 0.0);
  double test_nll = evaluate_split_nll(
      f, data::select(ds.samples, ds.split.test), ds.stats, 64);
  // entropy of N(0,1) in standardized units; finite-sample slack
  REQUIRE(test_nll == Catch::Approx(1.4189385).margin(0.12));
}

TEST_CASE("early stopping restores the best epoch's weights") {
  auto ds = data::prepare_dataset(gaussian_trace(200, 44), {4, 1}, 0.2, 1);
  model::Forecaster f = small_mlp(4, 1, 7);
  TrainConfig cfg;
  cfg.max_epochs = 8;
  cfg.patience = 2;
  TrainHistory h = owdf::train::train(f, ds, cfg);
  REQUIRE(h.best_epoch >= 0);
  REQUIRE(h.best_val_nll ==
          Catch::Approx(*std::min_element(h.val_nll.begin(), h.val_nll.end()))
              .margin(1e-12));
  // restored weights reproduce the best validation score exactly
  double val = evaluate_split_nll(
      f, data::select(ds.samples, ds.split.val), ds.stats, cfg.batch_size);
  REQUIRE(val == Catch::Approx(h.best_val_nll).margin(1e-12));
}

TEST_CASE("checkpoint round trip preserves config and weights") {
  auto ds = data::prepare_dataset(gaussian_trace(150, 45), {4, 2}, 0.2, 1);
  model::Forecaster f;
  f.cfg.kind = model::ModelKind::Lstm;
  f.cfg.token_dim = 8;
  f.cfg.mixture_components = 2;
  f.cfg.history = 4;
  f.cfg.horizon = 2;
  f.cfg.n_rec = 1;
  f.cfg.decode_mode = model::DecodeMode::Autoregressive;
  Rng rng(8);
  f.init(rng);
  TrainConfig cfg;
  cfg.max_epochs = 1;
  TrainHistory h = owdf::train::train(f, ds, cfg);

  std::string path = temp_path("roundtrip.ckpt");
  save_checkpoint(f, ds.window, ds.stats, h, 1234, path);
  Checkpoint ck = load_checkpoint(path);

  REQUIRE(ck.model.cfg.kind == model::ModelKind::Lstm);
  REQUIRE(ck.model.cfg.decode_mode == model::DecodeMode::Autoregressive);
  REQUIRE(ck.window.history_len == 4);
  REQUIRE(ck.window.horizon_len == 2);
  REQUIRE(ck.seed == 1234);
  REQUIRE(ck.stats.delay_mean == Catch::Approx(ds.stats.delay_mean));

  for (const auto& name : f.params.names()) {
    const diff::Tensor& orig = f.params.get(name);
    const diff::Tensor& back = ck.model.params.get(name);
    REQUIRE(orig.shape() == back.shape());
    for (std::size_t i = 0; i < orig.size(); ++i)
      REQUIRE(back[i] ==
              Catch::Approx(orig[i]).margin(1e-6 + 1e-6 * std::fabs(orig[i])));
  }

  // loaded model predicts nearly identically (float32 storage)
  auto split = data::select(ds.samples, ds.split.test);
  split.resize(3);
  auto pa = eval::predict_all(f, split, ds.stats);
  auto pb = eval::predict_all(ck.model, split, ds.stats);
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t l = 0; l < pa[i].steps.size(); ++l)
      for (int c = 0; c < pa[i].steps[l].components(); ++c)
        REQUIRE(pb[i].steps[l].mu[static_cast<std::size_t>(c)] ==
                Catch::Approx(pa[i].steps[l].mu[static_cast<std::size_t>(c)])
                    .margin(1e-4));

  // training curve artifact sits next to the checkpoint
  std::ifstream curve(path + ".history.csv");
  std::string line;
  REQUIRE(std::getline(curve, line));
  REQUIRE(line == "epoch,train_nll,val_nll");
}

TEST_CASE("checkpoint loader rejects bad version and truncated payloads") {
  auto ds = data::prepare_dataset(gaussian_trace(150, 46), {4, 1}, 0.2, 1);
  model::Forecaster f = small_mlp(4, 1, 9);
  TrainHistory h;

  std::string good = temp_path("good.ckpt");
  save_checkpoint(f, ds.window, ds.stats, h, 1, good);

  // corrupt the version string
  std::ifstream in(good, std::ios::binary);
  std::string header;
  std::getline(in, header);
  std::string rest((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  in.close();
  std::string bad = temp_path("badversion.ckpt");
  {
    std::ofstream out(bad, std::ios::binary);
    nlohmann::json j = nlohmann::json::parse(header);
    j["version"] = "owdf-ckpt/999";
    out << j.dump() << "\n" << rest;
  }
  REQUIRE_THROWS_AS(load_checkpoint(bad), DataError);

  std::string trunc = temp_path("trunc.ckpt");
  {
    std::ofstream out(trunc, std::ios::binary);
    out << header << "\n" << rest.substr(0, rest.size() / 2);
  }
  REQUIRE_THROWS_AS(load_checkpoint(trunc), DataError);

  REQUIRE_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), DataError);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.batch_size = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.learning_rate = -1.0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.clip_norm = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}
