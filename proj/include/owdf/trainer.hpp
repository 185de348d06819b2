#pragma once

// NLL minimization over a dataset split: adaptive moment optimizer with
// gradient clipping, early stopping on validation NLL with best-epoch
// restore, and checkpoint serialization (JSON header + float32 payload).

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "owdf/backbones.hpp"
#include "owdf/common.hpp"
#include "owdf/dataset.hpp"
#include "owdf/diff.hpp"
#include "owdf/mdn.hpp"
#include "owdf/tokenizer.hpp"

namespace owdf::train {

enum class LossMode { MultiStep, SingleStep };

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 5.0;
  int batch_size = 64;
  int max_epochs = 200;
  int patience = 10;
  std::uint64_t seed = 1;
  LossMode loss_mode = LossMode::MultiStep;
  std::ostream* progress = nullptr;  // optional per-epoch log sink

  void validate() const {
    if (learning_rate < 0.0 || batch_size < 1 || max_epochs < 1 ||
        patience < 1 || clip_norm <= 0.0)
      throw ConfigError("TrainConfig: rates and sizes must be positive");
  }
};

// theta: (B,Lout,V) raw mixture parameters; y_std: (B*L) standardized
// targets. Single-step mode shares one theta across all L steps.
// Returns the batch loss: mean over samples of -sum_l ln P.
inline diff::Var nll_loss(diff::Tape& t, const diff::Var& theta,
                          const std::vector<double>& y_std, int horizon,
                          LossMode mode) {
  for (double y : y_std)
    if (!std::isfinite(y)) throw DataError("nll_loss: non-finite target");
  int b = theta.value().dim(0);
  int lout = theta.value().dim(1);
  diff::Var th = theta;
  if (mode == LossMode::SingleStep) {
    if (lout != 1) throw ShapeError("nll_loss: single_step expects one theta");
    if (horizon > 1) th = diff::tile_axis1(t, th, horizon);
  } else if (lout != horizon) {
    throw ShapeError("nll_loss: theta steps != horizon");
  }
  diff::Var ll = mdn::log_prob_graph(t, th, y_std);  // (B,L,1)
  return diff::scale(t, diff::sum_all(t, ll), -1.0 / b);
}

class Adam {
 public:
  Adam(diff::ParamStore& ps, const TrainConfig& cfg) : ps_(ps), cfg_(cfg) {
    for (const auto& name : ps.names()) {
      m_[name] = diff::Tensor(ps.get(name).shape());
      v_[name] = diff::Tensor(ps.get(name).shape());
    }
  }

  void step() {
    double norm_sq = 0.0;
    for (const auto& name : ps_.names()) {
      const diff::Tensor& g = ps_.grad(name);
      for (std::size_t i = 0; i < g.size(); ++i) norm_sq += g[i] * g[i];
    }
    double norm = std::sqrt(norm_sq);
    if (!std::isfinite(norm))
      throw TrainingDiverged("gradient norm is non-finite");
    double gscale = norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (const auto& name : ps_.names()) {
      diff::Tensor& p = ps_.get(name);
      const diff::Tensor& grad = ps_.grad(name);
      diff::Tensor& m = m_[name];
      diff::Tensor& v = v_[name];
      for (std::size_t i = 0; i < p.size(); ++i) {
        double g = grad[i] * gscale;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        p[i] -= cfg_.learning_rate * (m[i] / bc1) /
                (std::sqrt(v[i] / bc2) + cfg_.epsilon);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  diff::ParamStore& ps_;
  TrainConfig cfg_;
  int t_ = 0;
  std::unordered_map<std::string, diff::Tensor> m_, v_;
};

struct TrainHistory {
  std::vector<double> train_nll;  // standardized, per epoch
  std::vector<double> val_nll;
  int best_epoch = -1;
  double best_val_nll = std::numeric_limits<double>::infinity();
  double per_sample_time_s = 0.0;  // optimizer wall time / samples processed
};

namespace detail {

inline std::vector<double> targets_std(
    const std::vector<data::WindowSample>& batch, const data::NormStats& stats,
    int horizon, bool training, Rng& noise_rng) {
  std::vector<double> y;
  y.reserve(batch.size() * static_cast<std::size_t>(horizon));
  for (const auto& w : batch)
    for (int l = 0; l < horizon; ++l)
      y.push_back(mdn::inject_noise(stats.delay_to_std(w.future_delay_ms(l)),
                                    noise_rng, training));
  return y;
}

inline std::unordered_map<std::string, diff::Tensor> snapshot(
    const diff::ParamStore& ps) {
  std::unordered_map<std::string, diff::Tensor> out;
  for (const auto& name : ps.names()) out[name] = ps.get(name);
  return out;
}

inline void restore(diff::ParamStore& ps,
                    const std::unordered_map<std::string, diff::Tensor>& snap) {
  for (const auto& [name, t] : snap) ps.get(name) = t;
}

}  // namespace detail

// Mean per-(sample,step) NLL in standardized units, inference mode.
inline double evaluate_split_nll(model::Forecaster& model,
                                 const std::vector<data::WindowSample>& split,
                                 const data::NormStats& stats, int batch_size) {
  if (split.empty()) throw DataError("evaluate_split_nll: empty split");
  int horizon = split[0].cfg.horizon_len;
  Rng dummy(0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t off = 0; off < split.size();
       off += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(split.size(), off + static_cast<std::size_t>(batch_size));
    std::vector<data::WindowSample> batch(split.begin() + static_cast<long>(off),
                                          split.begin() + static_cast<long>(end));
    tok::FeatureBatch fb = tok::make_feature_batch(batch, stats, model.tok_cfg);
    std::vector<double> y = detail::targets_std(batch, stats, horizon, false, dummy);
    diff::Tape t;
    diff::Var theta = model.forward(t, fb, false, dummy);
    diff::Var th = theta.value().dim(1) == 1 && horizon > 1
                       ? diff::tile_axis1(t, theta, horizon)
                       : theta;
    diff::Var ll = mdn::log_prob_graph(t, th, y);
    for (std::size_t i = 0; i < ll.value().size(); ++i) total -= ll.value()[i];
    count += ll.value().size();
  }
  return total / static_cast<double>(count);
}

inline TrainHistory train(model::Forecaster& model, const data::Dataset& ds,
                          const TrainConfig& cfg) {
  cfg.validate();
  auto train_split = data::select(ds.samples, ds.split.train);
  auto val_split = data::select(ds.samples, ds.split.val);
  if (train_split.empty() || val_split.empty())
    throw DataError("train: empty train or val split");
  int horizon = ds.window.horizon_len;
  LossMode mode = model.cfg.single_step() ? LossMode::SingleStep : cfg.loss_mode;

  Rng shuffle_rng(cfg.seed);
  Rng model_rng = shuffle_rng.spawn(0xD0);   // dropout streams
  Rng noise_rng = shuffle_rng.spawn(0x7A);   // target jitter

  Adam opt(model.params, cfg);
  TrainHistory hist;
  auto best = detail::snapshot(model.params);
  int since_best = 0;
  double opt_seconds = 0.0;
  std::size_t samples_processed = 0;

  std::vector<int> order(train_split.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle_indices(order, shuffle_rng);
    double epoch_nll_sum = 0.0;  // over (sample, step) pairs
    std::size_t epoch_pairs = 0;
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t off = 0; off < order.size();
         off += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
      std::vector<data::WindowSample> batch;
      batch.reserve(end - off);
      for (std::size_t i = off; i < end; ++i)
        batch.push_back(train_split[static_cast<std::size_t>(order[i])]);

      tok::FeatureBatch fb = tok::make_feature_batch(batch, ds.stats, model.tok_cfg);
      std::vector<double> y = detail::targets_std(batch, ds.stats, horizon, true, noise_rng);
      diff::Tape t;
      diff::Var theta = model.forward(t, fb, true, model_rng);
      diff::Var loss = nll_loss(t, theta, y, horizon, mode);
      double loss_val = loss.scalar();
      if (!std::isfinite(loss_val))
        throw TrainingDiverged("epoch " + std::to_string(epoch) +
                               ": train loss is non-finite");
      model.params.zero_grads();
      t.backward(loss);
      opt.step();
      epoch_nll_sum += loss_val * static_cast<double>(batch.size());
      epoch_pairs += batch.size() * static_cast<std::size_t>(horizon);
      samples_processed += batch.size();
    }
    auto t1 = std::chrono::steady_clock::now();
    opt_seconds += std::chrono::duration<double>(t1 - t0).count();

    hist.train_nll.push_back(epoch_nll_sum / static_cast<double>(epoch_pairs));
    double val = evaluate_split_nll(model, val_split, ds.stats, cfg.batch_size);
    hist.val_nll.push_back(val);

    if (cfg.progress)
      *cfg.progress << "epoch " << epoch << " train_nll " << hist.train_nll.back()
                    << " val_nll " << val << std::endl;

    if (val < hist.best_val_nll) {
      hist.best_val_nll = val;
      hist.best_epoch = epoch;
      best = detail::snapshot(model.params);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  detail::restore(model.params, best);
  hist.per_sample_time_s =
      samples_processed > 0 ? opt_seconds / static_cast<double>(samples_processed) : 0.0;
  return hist;
}

// ---------------------------------------------------------------------------
// checkpoint serialization: one-line JSON header + little-endian float32
// ---------------------------------------------------------------------------

constexpr const char* kCheckpointVersion = "owdf-ckpt/1";

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

inline nlohmann::json model_config_to_json(const model::ModelConfig& c) {
  return {{"kind", model::kind_name(c.kind)},
          {"token_dim", c.token_dim},
          {"mixture_components", c.mixture_components},
          {"history", c.history},
          {"horizon", c.horizon},
          {"n_rec", c.n_rec},
          {"n_enc", c.n_enc},
          {"n_dec", c.n_dec},
          {"n_heads", c.n_heads},
          {"ffn_mult", c.ffn_mult},
          {"mlp_mult", c.mlp_mult},
          {"dropout", c.dropout},
          {"decode_mode", c.decode_mode == model::DecodeMode::Parallel
                              ? "parallel"
                              : "autoregressive"}};
}

inline model::ModelConfig model_config_from_json(const nlohmann::json& j) {
  model::ModelConfig c;
  c.kind = model::kind_from_name(j.at("kind"));
  c.token_dim = j.at("token_dim");
  c.mixture_components = j.at("mixture_components");
  c.history = j.at("history");
  c.horizon = j.at("horizon");
  c.n_rec = j.at("n_rec");
  c.n_enc = j.at("n_enc");
  c.n_dec = j.at("n_dec");
  c.n_heads = j.at("n_heads");
  c.ffn_mult = j.at("ffn_mult");
  c.mlp_mult = j.at("mlp_mult");
  c.dropout = j.at("dropout");
  std::string dm = j.at("decode_mode");
  if (dm == "parallel")
    c.decode_mode = model::DecodeMode::Parallel;
  else if (dm == "autoregressive")
    c.decode_mode = model::DecodeMode::Autoregressive;
  else
    throw ConfigError("unknown decode_mode: '" + dm + "'");
  c.validate();
  return c;
}

inline void save_checkpoint(const model::Forecaster& model,
                            const data::WindowConfig& window,
                            const data::NormStats& stats,
                            const TrainHistory& hist, std::uint64_t seed,
                            const std::string& path) {
  nlohmann::json j;
  j["version"] = kCheckpointVersion;
  j["model"] = model_config_to_json(model.cfg);
  j["tokenizer"] = {{"slot_rows", model.tok_cfg.slot_rows},
                    {"mcs_rows", model.tok_cfg.mcs_rows},
                    {"harq_rows", model.tok_cfg.harq_rows},
                    {"rlc_rows", model.tok_cfg.rlc_rows}};
  j["window"] = {{"history_len", window.history_len},
                 {"horizon_len", window.horizon_len}};
  j["norm_stats"] = data::norm_stats_to_json(stats);
  j["seed"] = seed;
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t total = 0;
  for (const auto& name : model.params.names()) {
    const diff::Tensor& p = model.params.get(name);
    manifest.push_back({{"name", name}, {"shape", p.shape()}});
    total += p.size();
  }
  j["params"] = manifest;
  j["payload_count"] = total;

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f << j.dump() << "\n";
  std::vector<float> buf;
  buf.reserve(total);
  for (const auto& name : model.params.names()) {
    const diff::Tensor& p = model.params.get(name);
    for (std::size_t i = 0; i < p.size(); ++i)
      buf.push_back(static_cast<float>(p[i]));
  }
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw DataError("short write on checkpoint: " + path);

  // human-readable training curve next to the binary artifact
  std::ofstream h(path + ".history.csv");
  h << "epoch,train_nll,val_nll\n";
  for (std::size_t e = 0; e < hist.train_nll.size(); ++e)
    h << e << "," << hist.train_nll[e] << "," << hist.val_nll[e] << "\n";
}

struct Checkpoint {
  model::Forecaster model;
  data::WindowConfig window;
  data::NormStats stats;
  std::uint64_t seed = 0;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::string header;
  if (!std::getline(f, header))
    throw DataError("checkpoint missing header: " + path);
  nlohmann::json j = nlohmann::json::parse(header, nullptr, false);
  if (j.is_discarded())
    throw DataError("checkpoint header is not valid JSON: " + path);
  if (j.at("version") != kCheckpointVersion)
    throw DataError("checkpoint version mismatch: expected " +
                    std::string(kCheckpointVersion) + ", got " +
                    j.at("version").get<std::string>());

  Checkpoint ck;
  ck.model.cfg = model_config_from_json(j.at("model"));
  ck.model.tok_cfg.token_dim = ck.model.cfg.token_dim;
  ck.model.tok_cfg.dropout = ck.model.cfg.dropout;
  ck.model.tok_cfg.slot_rows = j.at("tokenizer").at("slot_rows");
  ck.model.tok_cfg.mcs_rows = j.at("tokenizer").at("mcs_rows");
  ck.model.tok_cfg.harq_rows = j.at("tokenizer").at("harq_rows");
  ck.model.tok_cfg.rlc_rows = j.at("tokenizer").at("rlc_rows");
  ck.window.history_len = j.at("window").at("history_len");
  ck.window.horizon_len = j.at("window").at("horizon_len");
  ck.window.validate();
  ck.stats = data::norm_stats_from_json(j.at("norm_stats"));
  ck.seed = j.at("seed");

  Rng rng(0);
  ck.model.init(rng);  // allocate parameter tensors, then overwrite

  std::size_t total = j.at("payload_count");
  if (total != ck.model.params.total_count())
    throw DataError("checkpoint payload count does not match model config");
  const auto& manifest = j.at("params");
  if (manifest.size() != ck.model.params.names().size())
    throw DataError("checkpoint manifest length mismatch");

  std::vector<float> buf(total);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(total * sizeof(float)));
  if (f.gcount() != static_cast<std::streamsize>(total * sizeof(float)))
    throw DataError("checkpoint payload truncated: " + path);

  std::size_t off = 0;
  std::size_t mi = 0;
  for (const auto& name : ck.model.params.names()) {
    const auto& entry = manifest[mi++];
    if (entry.at("name") != name)
      throw DataError("checkpoint parameter order mismatch at '" + name + "'");
    diff::Tensor& p = ck.model.params.get(name);
    if (entry.at("shape").get<std::vector<int>>() != p.shape())
      throw DataError("checkpoint shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < p.size(); ++i)
      p[i] = static_cast<double>(buf[off++]);
  }
  return ck;
}

}  // namespace owdf::train
