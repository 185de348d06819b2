#pragma once

// Forecasting backbones over tokenized packet windows: a residual MLP on the
// last token, single-shot and sequence-to-sequence LSTMs, and an
// encoder-decoder transformer. All variants share the tokenizer and emit raw
// mixture parameters, (B, 1, V) for single-step heads and (B, L, V) for the
// sequence models.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "owdf/common.hpp"
#include "owdf/diff.hpp"
#include "owdf/tokenizer.hpp"

namespace owdf::model {

enum class ModelKind { Mlp, LstmSS, Lstm, Transformer };
enum class DecodeMode { Parallel, Autoregressive };

inline std::string kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::Mlp: return "mlp";
    case ModelKind::LstmSS: return "lstm_ss";
    case ModelKind::Lstm: return "lstm";
    case ModelKind::Transformer: return "transformer";
  }
  throw ConfigError("unknown model kind");
}

inline ModelKind kind_from_name(const std::string& s) {
  if (s == "mlp") return ModelKind::Mlp;
  if (s == "lstm_ss") return ModelKind::LstmSS;
  if (s == "lstm") return ModelKind::Lstm;
  if (s == "transformer") return ModelKind::Transformer;
  throw ConfigError("unknown model kind: '" + s + "'");
}

struct ModelConfig {
  ModelKind kind = ModelKind::Transformer;
  int token_dim = 16;         // S
  int mixture_components = 8;  // K
  int history = 50;            // H
  int horizon = 50;            // L
  int n_rec = 2;               // stacked LSTM layers
  int n_enc = 6;
  int n_dec = 6;
  int n_heads = 4;
  int ffn_mult = 6;            // transformer FFN hidden = ffn_mult * S
  int mlp_mult = 4;            // MLP hidden = mlp_mult * S
  double dropout = 0.2;
  DecodeMode decode_mode = DecodeMode::Parallel;

  int v() const { return 3 * mixture_components; }
  bool single_step() const {
    return kind == ModelKind::Mlp || kind == ModelKind::LstmSS;
  }
  int out_steps() const { return single_step() ? 1 : horizon; }

  void validate() const {
    if (token_dim < 2 || token_dim % 2 != 0)
      throw ConfigError("token_dim must be even and >= 2");
    if (mixture_components < 1)
      throw ConfigError("mixture_components must be >= 1");
    if (history < 1 || horizon < 1)
      throw ConfigError("history and horizon must be >= 1");
    if (n_rec < 1 || n_enc < 1 || n_dec < 1 || n_heads < 1 ||
        ffn_mult < 1 || mlp_mult < 1)
      throw ConfigError("layer counts and width multipliers must be >= 1");
    if (token_dim % n_heads != 0)
      throw ConfigError("token_dim must be divisible by n_heads");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("dropout must be in [0,1)");
  }
};

// Interleaved sinusoidal code: PE[p,2i] = sin(p / 10000^(2i/S)),
// PE[p,2i+1] = cos(p / 10000^(2i/S)).
inline diff::Tensor positional_encoding(int length, int dim) {
  if (length < 1 || dim < 2 || dim % 2 != 0)
    throw ConfigError("positional_encoding: need length >= 1 and even dim");
  diff::Tensor pe({length, dim});
  for (int p = 0; p < length; ++p)
    for (int i = 0; i < dim / 2; ++i) {
      double freq = std::pow(10000.0, -2.0 * i / dim);
      pe[static_cast<std::size_t>(p) * dim + 2 * i] = std::sin(p * freq);
      pe[static_cast<std::size_t>(p) * dim + 2 * i + 1] = std::cos(p * freq);
    }
  return pe;
}

// LSTM step with the pre-activation gates already formed; used directly when
// the input contribution is constant across generated steps and hoisted.
inline std::pair<diff::Var, diff::Var> lstm_cell_gates(diff::Tape& t,
                                                       const diff::Var& gates,
                                                       const diff::Var& c) {
  int s4 = gates.value().dim(gates.value().rank() - 1);
  if (s4 % 4 != 0) throw ShapeError("lstm_cell: gate width must be 4S");
  int s = s4 / 4;
  diff::Var i = diff::sigmoid(t, diff::slice_last(t, gates, 0, s));
  diff::Var f = diff::sigmoid(t, diff::slice_last(t, gates, s, s));
  diff::Var g = diff::tanh_op(t, diff::slice_last(t, gates, 2 * s, s));
  diff::Var o = diff::sigmoid(t, diff::slice_last(t, gates, 3 * s, s));
  diff::Var c2 = diff::add(t, diff::mul(t, f, c), diff::mul(t, i, g));
  diff::Var h2 = diff::mul(t, o, diff::tanh_op(t, c2));
  return {h2, c2};
}

// One LSTM step with gate order [i, f, g, o].
inline std::pair<diff::Var, diff::Var> lstm_cell(
    diff::Tape& t, const diff::Var& x, const diff::Var& h, const diff::Var& c,
    const diff::Var& wx, const diff::Var& wh, const diff::Var& b) {
  diff::Var gates = diff::add_bias(
      t, diff::add(t, diff::matmul(t, x, wx), diff::matmul(t, h, wh)), b);
  return lstm_cell_gates(t, gates, c);
}

struct Forecaster {
  ModelConfig cfg;
  tok::TokenizerConfig tok_cfg;
  diff::ParamStore params;

  void init(Rng& rng);
  // tokens from the feature batch -> raw mixture parameters
  diff::Var forward(diff::Tape& t, const tok::FeatureBatch& fb, bool training,
                    Rng& rng);

 private:
  void uniform_init_(diff::Tensor& w, int fan_in, Rng& rng) {
    double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-a, a);
  }
  void linear_params_(const std::string& pfx, int in, int out, Rng& rng) {
    uniform_init_(params.create(pfx + ".w", {in, out}), in, rng);
    params.create(pfx + ".b", {out});
  }
  void ln_params_(const std::string& pfx) {
    diff::Tensor& g = params.create(pfx + ".g", {cfg.token_dim});
    std::fill(g.data(), g.data() + g.size(), 1.0);
    params.create(pfx + ".b", {cfg.token_dim});
  }

  diff::Var linear_(diff::Tape& t, const diff::Var& x, const std::string& pfx) {
    return diff::add_bias(t, diff::matmul(t, x, t.param(params, pfx + ".w")),
                          t.param(params, pfx + ".b"));
  }
  diff::Var layernorm_(diff::Tape& t, const diff::Var& x,
                       const std::string& pfx) {
    return diff::layernorm_last(t, x, t.param(params, pfx + ".g"),
                                t.param(params, pfx + ".b"));
  }
  diff::Var drop_(diff::Tape& t, const diff::Var& x, Rng& rng, bool training) {
    return diff::dropout(t, x, cfg.dropout, rng, training);
  }

  diff::Var attention_(diff::Tape& t, const std::string& pfx,
                       const diff::Var& q_in, const diff::Var& kv_in,
                       bool causal);
  diff::Var encoder_layer_(diff::Tape& t, const std::string& pfx, diff::Var x,
                           bool training, Rng& rng);
  diff::Var decoder_layer_(diff::Tape& t, const std::string& pfx, diff::Var x,
                           const diff::Var& memory, bool training, Rng& rng);
  diff::Var decoder_stack_(diff::Tape& t, diff::Var x, const diff::Var& memory,
                           bool training, Rng& rng);
  diff::Var query_row_(diff::Tape& t, int l, const diff::Tensor& pe);

  diff::Var mlp_forward_(diff::Tape& t, const diff::Var& tokens, bool training,
                         Rng& rng);
  void lstm_encode_(diff::Tape& t, const diff::Var& tokens, bool training,
                    Rng& rng, std::vector<diff::Var>& h,
                    std::vector<diff::Var>& c);
  diff::Var lstm_ss_forward_(diff::Tape& t, const diff::Var& tokens,
                             bool training, Rng& rng);
  diff::Var lstm_forecast_(diff::Tape& t, const diff::Var& tokens,
                           bool training, Rng& rng);
  diff::Var transformer_forward_(diff::Tape& t, const diff::Var& tokens,
                                 bool training, Rng& rng);
};

inline void Forecaster::init(Rng& rng) {
  cfg.validate();
  tok_cfg.token_dim = cfg.token_dim;
  tok_cfg.dropout = cfg.dropout;
  tok::init_params(params, tok_cfg, rng);

  int s = cfg.token_dim;
  int v = cfg.v();
  switch (cfg.kind) {
    case ModelKind::Mlp: {
      int w = cfg.mlp_mult * s;
      linear_params_("mlp.l1", s, w, rng);
      linear_params_("mlp.l2", w, w, rng);
      linear_params_("mlp.l3", w, w, rng);
      linear_params_("mlp.l4", w, w, rng);
      linear_params_("head", w, v, rng);
      break;
    }
    case ModelKind::LstmSS:
    case ModelKind::Lstm: {
      for (int j = 0; j < cfg.n_rec; ++j) {
        std::string pfx = "lstm.l" + std::to_string(j);
        uniform_init_(params.create(pfx + ".wx", {s, 4 * s}), s, rng);
        uniform_init_(params.create(pfx + ".wh", {s, 4 * s}), s, rng);
        params.create(pfx + ".b", {4 * s});
      }
      if (cfg.kind == ModelKind::Lstm) {
        uniform_init_(params.create("lstm.pad", {1, s}), s, rng);
        linear_params_("fb", v, s, rng);  // feedback for autoregressive decode
      }
      linear_params_("head", s, v, rng);
      break;
    }
    case ModelKind::Transformer: {
      for (int j = 0; j < cfg.n_enc; ++j) {
        std::string pfx = "tf.enc" + std::to_string(j);
        linear_params_(pfx + ".wq", s, s, rng);
        linear_params_(pfx + ".wk", s, s, rng);
        linear_params_(pfx + ".wv", s, s, rng);
        linear_params_(pfx + ".wo", s, s, rng);
        ln_params_(pfx + ".ln1");
        linear_params_(pfx + ".f1", s, cfg.ffn_mult * s, rng);
        linear_params_(pfx + ".f2", cfg.ffn_mult * s, s, rng);
        ln_params_(pfx + ".ln2");
      }
      for (int j = 0; j < cfg.n_dec; ++j) {
        std::string pfx = "tf.dec" + std::to_string(j);
        linear_params_(pfx + ".self.wq", s, s, rng);
        linear_params_(pfx + ".self.wk", s, s, rng);
        linear_params_(pfx + ".self.wv", s, s, rng);
        linear_params_(pfx + ".self.wo", s, s, rng);
        ln_params_(pfx + ".ln1");
        linear_params_(pfx + ".cross.wq", s, s, rng);
        linear_params_(pfx + ".cross.wk", s, s, rng);
        linear_params_(pfx + ".cross.wv", s, s, rng);
        linear_params_(pfx + ".cross.wo", s, s, rng);
        ln_params_(pfx + ".ln2");
        linear_params_(pfx + ".f1", s, cfg.ffn_mult * s, rng);
        linear_params_(pfx + ".f2", cfg.ffn_mult * s, s, rng);
        ln_params_(pfx + ".ln3");
      }
      uniform_init_(params.create("tf.q", {cfg.horizon, s}), s, rng);
      linear_params_("fb", v, s, rng);
      linear_params_("head", s, v, rng);
      break;
    }
  }
}

inline diff::Var Forecaster::forward(diff::Tape& t,
                                     const tok::FeatureBatch& fb,
                                     bool training, Rng& rng) {
  cfg.validate();
  if (fb.history != cfg.history)
    throw ShapeError("forward: batch history " + std::to_string(fb.history) +
                     " != configured history " + std::to_string(cfg.history));
  diff::Var tokens = tok::embed_batch(t, params, tok_cfg, fb, training, rng);
  switch (cfg.kind) {
    case ModelKind::Mlp: return mlp_forward_(t, tokens, training, rng);
    case ModelKind::LstmSS: return lstm_ss_forward_(t, tokens, training, rng);
    case ModelKind::Lstm: return lstm_forecast_(t, tokens, training, rng);
    case ModelKind::Transformer:
      return transformer_forward_(t, tokens, training, rng);
  }
  throw ConfigError("unknown model kind");
}

// ---------------------------------------------------------------------------
// MLP on the final token
// ---------------------------------------------------------------------------

inline diff::Var Forecaster::mlp_forward_(diff::Tape& t,
                                          const diff::Var& tokens,
                                          bool training, Rng& rng) {
  int b = tokens.value().dim(0);
  diff::Var x = diff::time_slice(t, tokens, cfg.history - 1);  // (B,S)
  x = drop_(t, diff::gelu(t, linear_(t, x, "mlp.l1")), rng, training);
  for (const char* pfx : {"mlp.l2", "mlp.l3", "mlp.l4"}) {
    diff::Var y = drop_(t, diff::gelu(t, linear_(t, x, pfx)), rng, training);
    x = diff::add(t, x, y);  // residual, widths match from layer 2 on
  }
  diff::Var theta = linear_(t, x, "head");
  return diff::reshape(t, theta, {b, 1, cfg.v()});
}

// ---------------------------------------------------------------------------
// LSTM variants
// ---------------------------------------------------------------------------

inline void Forecaster::lstm_encode_(diff::Tape& t, const diff::Var& tokens,
                                     bool training, Rng& rng,
                                     std::vector<diff::Var>& h,
                                     std::vector<diff::Var>& c) {
  int b = tokens.value().dim(0);
  int s = cfg.token_dim;
  h.clear();
  c.clear();
  for (int j = 0; j < cfg.n_rec; ++j) {
    h.push_back(t.constant(diff::Tensor({b, s})));
    c.push_back(t.constant(diff::Tensor({b, s})));
  }
  for (int step = 0; step < cfg.history; ++step) {
    diff::Var u = diff::time_slice(t, tokens, step);
    for (int j = 0; j < cfg.n_rec; ++j) {
      std::string pfx = "lstm.l" + std::to_string(j);
      diff::Var in = (j == 0) ? u : drop_(t, h[static_cast<std::size_t>(j - 1)], rng, training);
      auto [h2, c2] = lstm_cell(t, in, h[static_cast<std::size_t>(j)],
                                c[static_cast<std::size_t>(j)],
                                t.param(params, pfx + ".wx"),
                                t.param(params, pfx + ".wh"),
                                t.param(params, pfx + ".b"));
      h[static_cast<std::size_t>(j)] = h2;
      c[static_cast<std::size_t>(j)] = c2;
    }
  }
}

inline diff::Var Forecaster::lstm_ss_forward_(diff::Tape& t,
                                              const diff::Var& tokens,
                                              bool training, Rng& rng) {
  int b = tokens.value().dim(0);
  std::vector<diff::Var> h, c;
  lstm_encode_(t, tokens, training, rng, h, c);
  diff::Var theta = linear_(t, h.back(), "head");
  return diff::reshape(t, theta, {b, 1, cfg.v()});
}

inline diff::Var Forecaster::lstm_forecast_(diff::Tape& t,
                                            const diff::Var& tokens,
                                            bool training, Rng& rng) {
  int b = tokens.value().dim(0);
  int s = cfg.token_dim;
  std::vector<diff::Var> h, c;
  lstm_encode_(t, tokens, training, rng, h, c);

  bool parallel = cfg.decode_mode == DecodeMode::Parallel;
  // In parallel decode every generated step feeds the same padding token, so
  // its input affine is formed once outside the loop.
  diff::Var pad_gates{};
  if (parallel) {
    diff::Var row = diff::add_bias(
        t, diff::matmul(t, t.param(params, "lstm.pad"),
                        t.param(params, "lstm.l0.wx")),
        t.param(params, "lstm.l0.b"));
    pad_gates = diff::reshape(t, row, {4 * s});
  }

  diff::Var out{};
  diff::Var prev_theta{};
  for (int l = 0; l < cfg.horizon; ++l) {
    for (int j = 0; j < cfg.n_rec; ++j) {
      std::string pfx = "lstm.l" + std::to_string(j);
      std::pair<diff::Var, diff::Var> hc;
      if (j == 0 && parallel) {
        diff::Var gates = diff::add_bias(
            t, diff::matmul(t, h[0], t.param(params, pfx + ".wh")), pad_gates);
        hc = lstm_cell_gates(t, gates, c[0]);
      } else {
        diff::Var in{};
        if (j > 0) {
          in = drop_(t, h[static_cast<std::size_t>(j - 1)], rng, training);
        } else if (l == 0) {
          // the first autoregressive step also consumes the padding token
          diff::Var ones = t.constant(diff::Tensor({b, 1}, 1.0));
          in = diff::matmul(t, ones, t.param(params, "lstm.pad"));
        } else {
          in = linear_(t, prev_theta, "fb");  // (B,S)
        }
        hc = lstm_cell(t, in, h[static_cast<std::size_t>(j)],
                       c[static_cast<std::size_t>(j)],
                       t.param(params, pfx + ".wx"),
                       t.param(params, pfx + ".wh"),
                       t.param(params, pfx + ".b"));
      }
      h[static_cast<std::size_t>(j)] = hc.first;
      c[static_cast<std::size_t>(j)] = hc.second;
    }
    diff::Var theta = linear_(t, h.back(), "head");  // (B,V)
    prev_theta = theta;
    diff::Var step = diff::reshape(t, theta, {b, 1, cfg.v()});
    out = (l == 0) ? step : diff::concat_axis1(t, out, step);
  }
  return out;  // (B,L,V)
}

// ---------------------------------------------------------------------------
// transformer
// ---------------------------------------------------------------------------

inline diff::Var Forecaster::attention_(diff::Tape& t, const std::string& pfx,
                                        const diff::Var& q_in,
                                        const diff::Var& kv_in, bool causal) {
  int s = cfg.token_dim;
  int dh = s / cfg.n_heads;
  int tq = q_in.value().dim(1), tk = kv_in.value().dim(1);
  diff::Var q = linear_(t, q_in, pfx + ".wq");
  diff::Var k = linear_(t, kv_in, pfx + ".wk");
  diff::Var v = linear_(t, kv_in, pfx + ".wv");

  diff::Var mask{};
  if (causal) {
    diff::Tensor m({tq, tk});
    for (int i = 0; i < tq; ++i)
      for (int j = 0; j < tk; ++j)
        m[static_cast<std::size_t>(i) * tk + j] = j > i ? -1e30 : 0.0;
    mask = t.constant(std::move(m));
  }

  std::vector<diff::Var> heads;
  heads.reserve(static_cast<std::size_t>(cfg.n_heads));
  for (int hd = 0; hd < cfg.n_heads; ++hd) {
    diff::Var qh = diff::slice_last(t, q, hd * dh, dh);
    diff::Var kh = diff::slice_last(t, k, hd * dh, dh);
    diff::Var vh = diff::slice_last(t, v, hd * dh, dh);
    diff::Var scores = diff::scale(
        t, diff::matmul(t, qh, diff::transpose_last2(t, kh)),
        1.0 / std::sqrt(static_cast<double>(dh)));
    if (causal) scores = diff::add_bcast(t, scores, mask);
    diff::Var probs = diff::softmax_last(t, scores);
    heads.push_back(diff::matmul(t, probs, vh));
  }
  return linear_(t, diff::concat_last(t, heads), pfx + ".wo");
}

inline diff::Var Forecaster::encoder_layer_(diff::Tape& t,
                                            const std::string& pfx,
                                            diff::Var x, bool training,
                                            Rng& rng) {
  diff::Var a = attention_(t, pfx, x, x, false);
  x = layernorm_(t, diff::add(t, x, drop_(t, a, rng, training)), pfx + ".ln1");
  diff::Var f = linear_(t, diff::gelu(t, linear_(t, x, pfx + ".f1")), pfx + ".f2");
  return layernorm_(t, diff::add(t, x, drop_(t, f, rng, training)), pfx + ".ln2");
}

inline diff::Var Forecaster::decoder_layer_(diff::Tape& t,
                                            const std::string& pfx,
                                            diff::Var x, const diff::Var& memory,
                                            bool training, Rng& rng) {
  diff::Var a = attention_(t, pfx + ".self", x, x, true);
  x = layernorm_(t, diff::add(t, x, drop_(t, a, rng, training)), pfx + ".ln1");
  diff::Var cr = attention_(t, pfx + ".cross", x, memory, false);
  x = layernorm_(t, diff::add(t, x, drop_(t, cr, rng, training)), pfx + ".ln2");
  diff::Var f = linear_(t, diff::gelu(t, linear_(t, x, pfx + ".f1")), pfx + ".f2");
  return layernorm_(t, diff::add(t, x, drop_(t, f, rng, training)), pfx + ".ln3");
}

inline diff::Var Forecaster::decoder_stack_(diff::Tape& t, diff::Var x,
                                            const diff::Var& memory,
                                            bool training, Rng& rng) {
  for (int j = 0; j < cfg.n_dec; ++j)
    x = decoder_layer_(t, "tf.dec" + std::to_string(j), x, memory, training, rng);
  return x;
}

// learnable query l plus its positional code, as a (1,S) row
inline diff::Var Forecaster::query_row_(diff::Tape& t, int l,
                                        const diff::Tensor& pe) {
  int s = cfg.token_dim;
  diff::Var q3 = diff::reshape(t, t.param(params, "tf.q"),
                               {1, cfg.horizon, s});
  diff::Var row = diff::time_slice(t, q3, l);  // (1,S)
  diff::Tensor pr({1, s});
  for (int j = 0; j < s; ++j)
    pr[static_cast<std::size_t>(j)] = pe[static_cast<std::size_t>(l) * s + j];
  return diff::add(t, row, t.constant(std::move(pr)));
}

inline diff::Var Forecaster::transformer_forward_(diff::Tape& t,
                                                  const diff::Var& tokens,
                                                  bool training, Rng& rng) {
  int b = tokens.value().dim(0);
  int s = cfg.token_dim;

  diff::Var x = diff::add_bcast(
      t, tokens, t.constant(positional_encoding(cfg.history, s)));
  x = drop_(t, x, rng, training);
  for (int j = 0; j < cfg.n_enc; ++j)
    x = encoder_layer_(t, "tf.enc" + std::to_string(j), x, training, rng);
  diff::Var memory = x;

  diff::Tensor pe_l = positional_encoding(cfg.horizon, s);

  if (cfg.decode_mode == DecodeMode::Parallel) {
    diff::Var q = diff::add(t, t.param(params, "tf.q"), t.constant(pe_l));
    diff::Var dec_in =
        diff::add_bcast(t, t.constant(diff::Tensor({b, cfg.horizon, s})), q);
    dec_in = drop_(t, dec_in, rng, training);
    diff::Var y = decoder_stack_(t, dec_in, memory, training, rng);
    return linear_(t, y, "head");  // (B,L,V)
  }

  // Autoregressive decode: rerun the decoder on each growing prefix; step
  // l+1's input embeds the raw parameters just emitted for step l.
  diff::Var zeros1 = t.constant(diff::Tensor({b, 1, s}));
  diff::Var prefix =
      diff::add_bcast(t, zeros1, query_row_(t, 0, pe_l));
  diff::Var out{};
  for (int l = 0; l < cfg.horizon; ++l) {
    diff::Var y = decoder_stack_(t, prefix, memory, training, rng);
    diff::Var last = diff::time_slice(t, y, l);  // (B,S)
    diff::Var theta = linear_(t, last, "head");  // (B,V)
    diff::Var step = diff::reshape(t, theta, {b, 1, cfg.v()});
    out = (l == 0) ? step : diff::concat_axis1(t, out, step);
    if (l + 1 < cfg.horizon) {
      diff::Var fb = linear_(t, theta, "fb");  // (B,S)
      diff::Tensor pr({s});
      for (int j = 0; j < s; ++j)
        pr[static_cast<std::size_t>(j)] =
            pe_l[static_cast<std::size_t>(l + 1) * s + j];
      diff::Var nxt = diff::add_bias(t, fb, t.constant(std::move(pr)));
      prefix = diff::concat_axis1(t, prefix, diff::reshape(t, nxt, {b, 1, s}));
    }
  }
  return out;  // (B,L,V)
}

inline std::size_t param_count(const ModelConfig& cfg) {
  Forecaster f;
  f.cfg = cfg;
  Rng rng(0);
  f.init(rng);
  return f.params.total_count();
}

}  // namespace owdf::model
