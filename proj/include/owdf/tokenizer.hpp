#pragma once

// Learnable embedding of packet delay contexts into S-dimensional tokens.
// Continuous features are z-scored and linearly projected; discrete features
// go through embedding tables with a padding row at index 0; a three-layer
// fusion MLP (expand 4x, compress, project) emits the token.
//
// Each feature embeds into S/2 dimensions before fusion; the smaller
// per-feature width keeps the tokenizer within the parameter budget shared by
// all model variants.

#include <cstdio>
#include <string>
#include <vector>

#include "owdf/common.hpp"
#include "owdf/dataset.hpp"
#include "owdf/diff.hpp"

namespace owdf::tok {

constexpr int kNumFeatures = 7;  // delay, size, inter-arrival + 4 discrete

struct TokenizerConfig {
  int token_dim = 16;  // S, must be even
  int slot_rows = 11;  // slots_per_frame + padding row
  int mcs_rows = 30;
  int harq_rows = 6;
  int rlc_rows = 9;
  double dropout = 0.2;

  int feature_dim() const { return token_dim / 2; }
  void validate() const {
    if (token_dim < 2 || token_dim % 2 != 0)
      throw ConfigError("token_dim must be an even integer >= 2");
    if (slot_rows < 2 || mcs_rows < 2 || harq_rows < 2 || rlc_rows < 2)
      throw ConfigError("embedding tables need a padding row plus one category");
  }
};

// Flattened model inputs for a batch of windows, laid out (B*H) row-major.
// Continuous features are already z-scored; the delay of each window's last
// history record is masked (it is the first prediction target).
struct FeatureBatch {
  int batch = 0;
  int history = 0;
  std::vector<double> delay, size, inter_arrival;      // each B*H
  std::vector<int> slot, mcs, harq, rlc;               // padded ids, each B*H
};

namespace detail {

inline int map_id(std::optional<int> v, int rows, const char* feature) {
  if (!v) return 0;  // padding row
  if (*v < 0)
    throw DataError(std::string("negative category for feature '") + feature +
                    "': " + std::to_string(*v));
  int id = *v + 1;
  if (id >= rows) {
    static bool warned = false;
    if (!warned) {
      std::fprintf(stderr,
                   "warning: feature '%s' value %d above table range, "
                   "clamping\n",
                   feature, *v);
      warned = true;
    }
    id = rows - 1;
  }
  return id;
}

}  // namespace detail

inline FeatureBatch make_feature_batch(
    const std::vector<data::WindowSample>& windows,
    const data::NormStats& stats, const TokenizerConfig& cfg) {
  cfg.validate();
  if (windows.empty()) throw DataError("make_feature_batch: empty batch");
  FeatureBatch fb;
  fb.batch = static_cast<int>(windows.size());
  fb.history = windows[0].cfg.history_len;
  std::size_t n = static_cast<std::size_t>(fb.batch) * fb.history;
  fb.delay.reserve(n);
  fb.size.reserve(n);
  fb.inter_arrival.reserve(n);
  fb.slot.reserve(n);
  fb.mcs.reserve(n);
  fb.harq.reserve(n);
  fb.rlc.reserve(n);
  for (const auto& w : windows) {
    if (w.cfg.history_len != fb.history)
      throw ShapeError("make_feature_batch: inconsistent history lengths");
    for (int i = 0; i < fb.history; ++i) {
      const auto& r = w.history(i);
      bool last = (i == fb.history - 1);
      fb.delay.push_back(last ? 0.0 : stats.z_delay(r.delay_ms));
      fb.size.push_back(stats.z_size(r.size_bytes));
      fb.inter_arrival.push_back(stats.z_ia(r.inter_arrival_ms));
      fb.slot.push_back(detail::map_id(r.slot, cfg.slot_rows, "slot"));
      fb.mcs.push_back(detail::map_id(r.mcs, cfg.mcs_rows, "mcs"));
      fb.harq.push_back(detail::map_id(r.harq_retx, cfg.harq_rows, "harq_retx"));
      fb.rlc.push_back(detail::map_id(r.rlc_retx, cfg.rlc_rows, "rlc_retx"));
    }
  }
  return fb;
}

inline void init_params(diff::ParamStore& ps, const TokenizerConfig& cfg,
                        Rng& rng) {
  cfg.validate();
  int d = cfg.feature_dim();
  int s = cfg.token_dim;
  auto uniform_init = [&](diff::Tensor& t, int fan_in) {
    double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
  };
  for (const char* f : {"delay", "size", "ia"}) {
    uniform_init(ps.create(std::string("tok.cont.") + f + ".w", {1, d}), 1);
    ps.create(std::string("tok.cont.") + f + ".b", {d});
  }
  auto table = [&](const std::string& name, int rows) {
    diff::Tensor& t = ps.create(name, {rows, d});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-0.1, 0.1);
  };
  table("tok.emb.slot", cfg.slot_rows);
  table("tok.emb.mcs", cfg.mcs_rows);
  table("tok.emb.harq", cfg.harq_rows);
  table("tok.emb.rlc", cfg.rlc_rows);

  int cat = kNumFeatures * d;
  int wide = 4 * cat;
  uniform_init(ps.create("tok.fuse.w1", {cat, wide}), cat);
  ps.create("tok.fuse.b1", {wide});
  uniform_init(ps.create("tok.fuse.w2", {wide, cat}), wide);
  ps.create("tok.fuse.b2", {cat});
  uniform_init(ps.create("tok.fuse.w3", {cat, s}), cat);
  ps.create("tok.fuse.b3", {s});
}

// Embed a whole batch; returns tokens shaped (B, H, S).
inline diff::Var embed_batch(diff::Tape& t, diff::ParamStore& ps,
                             const TokenizerConfig& cfg, const FeatureBatch& fb,
                             bool training, Rng& rng) {
  cfg.validate();
  int n = fb.batch * fb.history;
  int d = cfg.feature_dim();

  auto cont = [&](const std::vector<double>& col, const char* f) {
    diff::Var x =
        t.constant(diff::Tensor::from({n, 1}, std::vector<double>(col)));
    diff::Var w = t.param(ps, std::string("tok.cont.") + f + ".w");
    diff::Var b = t.param(ps, std::string("tok.cont.") + f + ".b");
    return diff::add_bias(t, diff::matmul(t, x, w), b);
  };
  auto disc = [&](const std::vector<int>& ids, const char* name) {
    return diff::gather_rows(t, t.param(ps, std::string("tok.emb.") + name),
                             ids);
  };

  std::vector<diff::Var> parts{
      cont(fb.delay, "delay"),     cont(fb.size, "size"),
      cont(fb.inter_arrival, "ia"), disc(fb.slot, "slot"),
      disc(fb.mcs, "mcs"),         disc(fb.harq, "harq"),
      disc(fb.rlc, "rlc")};
  diff::Var x = diff::concat_last(t, parts);

  auto linear = [&](const diff::Var& in, const std::string& w,
                    const std::string& b) {
    return diff::add_bias(t, diff::matmul(t, in, t.param(ps, w)),
                          t.param(ps, b));
  };
  x = diff::relu(t, linear(x, "tok.fuse.w1", "tok.fuse.b1"));
  x = diff::dropout(t, x, cfg.dropout, rng, training);
  x = diff::relu(t, linear(x, "tok.fuse.w2", "tok.fuse.b2"));
  x = diff::dropout(t, x, cfg.dropout, rng, training);
  x = linear(x, "tok.fuse.w3", "tok.fuse.b3");
  (void)d;
  return diff::reshape(t, x, {fb.batch, fb.history, cfg.token_dim});
}

// Single-record and single-window conveniences used by tests and tools.
inline std::vector<double> embed_packet(const sim::PacketRecord& rec,
                                        const data::NormStats& stats,
                                        diff::ParamStore& ps,
                                        const TokenizerConfig& cfg,
                                        bool training, Rng& rng,
                                        bool mask_delay = false) {
  FeatureBatch fb;
  fb.batch = 1;
  fb.history = 1;
  fb.delay = {mask_delay ? 0.0 : stats.z_delay(rec.delay_ms)};
  fb.size = {stats.z_size(rec.size_bytes)};
  fb.inter_arrival = {stats.z_ia(rec.inter_arrival_ms)};
  fb.slot = {detail::map_id(rec.slot, cfg.slot_rows, "slot")};
  fb.mcs = {detail::map_id(rec.mcs, cfg.mcs_rows, "mcs")};
  fb.harq = {detail::map_id(rec.harq_retx, cfg.harq_rows, "harq_retx")};
  fb.rlc = {detail::map_id(rec.rlc_retx, cfg.rlc_rows, "rlc_retx")};
  diff::Tape tape;
  diff::Var u = embed_batch(tape, ps, cfg, fb, training, rng);
  const diff::Tensor& v = u.value();
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline std::vector<double> embed_window(const data::WindowSample& w,
                                        const data::NormStats& stats,
                                        diff::ParamStore& ps,
                                        const TokenizerConfig& cfg,
                                        bool training, Rng& rng) {
  FeatureBatch fb = make_feature_batch({w}, stats, cfg);
  diff::Tape tape;
  diff::Var u = embed_batch(tape, ps, cfg, fb, training, rng);
  const diff::Tensor& v = u.value();
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace owdf::tok
