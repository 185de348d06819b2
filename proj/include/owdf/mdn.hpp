#pragma once

// Gaussian mixture distribution head: decoding raw parameter vectors,
// log-density, moments, quantiles, sampling, and the differentiable NLL used
// during training.

#include <algorithm>
#include <cmath>
#include <vector>

#include "owdf/common.hpp"
#include "owdf/diff.hpp"

namespace owdf::mdn {

constexpr double kSigmaFloor = 1e-3;
constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * ln(2*pi)
constexpr double kNoiseStd = 0.1;  // training-time target jitter, std units

struct MixtureParams {
  std::vector<double> w;      // simplex weights
  std::vector<double> mu;     // standardized-delay means
  std::vector<double> sigma;  // standardized-delay standard deviations

  int components() const { return static_cast<int>(w.size()); }
};

// w = softmax(theta[0:K]); mu = theta[K:2K]; sigma = softplus(theta[2K:3K]) + floor
inline MixtureParams to_mixture(const std::vector<double>& raw) {
  if (raw.size() % 3 != 0 || raw.empty())
    throw ShapeError("to_mixture: raw parameter size must be 3K");
  int k = static_cast<int>(raw.size()) / 3;
  MixtureParams m;
  m.w.resize(static_cast<std::size_t>(k));
  m.mu.resize(static_cast<std::size_t>(k));
  m.sigma.resize(static_cast<std::size_t>(k));
  double mx = *std::max_element(raw.begin(), raw.begin() + k);
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    m.w[static_cast<std::size_t>(i)] = std::exp(raw[static_cast<std::size_t>(i)] - mx);
    sum += m.w[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < k; ++i) m.w[static_cast<std::size_t>(i)] /= sum;
  for (int i = 0; i < k; ++i) {
    m.mu[static_cast<std::size_t>(i)] = raw[static_cast<std::size_t>(k + i)];
    double s = raw[static_cast<std::size_t>(2 * k + i)];
    double sp = s > 30.0 ? s : std::log1p(std::exp(s));
    m.sigma[static_cast<std::size_t>(i)] = sp + kSigmaFloor;
  }
  return m;
}

inline double log_prob(const MixtureParams& m, double y) {
  int k = m.components();
  double best = -1e300;
  std::vector<double> terms(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    double s = m.sigma[static_cast<std::size_t>(i)];
    double z = (y - m.mu[static_cast<std::size_t>(i)]) / s;
    double t = std::log(m.w[static_cast<std::size_t>(i)]) - std::log(s) -
               0.5 * z * z - kHalfLog2Pi;
    terms[static_cast<std::size_t>(i)] = t;
    best = std::max(best, t);
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - best);
  return best + std::log(acc);
}

inline double mixture_mean(const MixtureParams& m) {
  double acc = 0.0;
  for (int i = 0; i < m.components(); ++i)
    acc += m.w[static_cast<std::size_t>(i)] * m.mu[static_cast<std::size_t>(i)];
  return acc;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z * M_SQRT1_2); }

inline double cdf(const MixtureParams& m, double y) {
  double acc = 0.0;
  for (int i = 0; i < m.components(); ++i)
    acc += m.w[static_cast<std::size_t>(i)] *
           normal_cdf((y - m.mu[static_cast<std::size_t>(i)]) /
                      m.sigma[static_cast<std::size_t>(i)]);
  return acc;
}

inline double quantile(const MixtureParams& m, double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("quantile: p must be in (0,1)");
  double smax = *std::max_element(m.sigma.begin(), m.sigma.end());
  double mid = mixture_mean(m);
  double lo = mid - 10.0 * smax, hi = mid + 10.0 * smax;
  // expand the bracket geometrically until it straddles p
  double span = hi - lo;
  while (cdf(m, lo) > p) {
    lo -= span;
    span *= 2.0;
  }
  span = hi - lo;
  while (cdf(m, hi) < p) {
    hi += span;
    span *= 2.0;
  }
  for (int it = 0; it < 200; ++it) {
    double midp = 0.5 * (lo + hi);
    double c = cdf(m, midp);
    if (std::fabs(c - p) < 1e-10 && it > 20) return midp;
    if (c < p)
      lo = midp;
    else
      hi = midp;
    if (hi - lo < 1e-13 * std::max(1.0, std::fabs(midp))) return midp;
  }
  return 0.5 * (lo + hi);
}

inline double sample(const MixtureParams& m, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  int pick = m.components() - 1;
  for (int i = 0; i < m.components(); ++i) {
    acc += m.w[static_cast<std::size_t>(i)];
    if (u <= acc) {
      pick = i;
      break;
    }
  }
  return m.mu[static_cast<std::size_t>(pick)] +
         m.sigma[static_cast<std::size_t>(pick)] * rng.normal();
}

// training-time target jitter; identity at inference
inline double inject_noise(double y_std, Rng& rng, bool training) {
  return training ? y_std + kNoiseStd * rng.normal() : y_std;
}

// ---------------------------------------------------------------------------
// standardized <-> millisecond units
// ---------------------------------------------------------------------------

struct AffineTransform {
  double location = 0.0;
  double scale = 1.0;  // > 0

  double to_ms(double std_units) const { return std_units * scale + location; }
  double from_ms(double ms) const { return (ms - location) / scale; }
};

inline MixtureParams to_ms(const MixtureParams& m, const AffineTransform& tr) {
  if (tr.scale <= 0.0) throw ConfigError("AffineTransform scale must be > 0");
  MixtureParams out = m;
  for (int i = 0; i < m.components(); ++i) {
    out.mu[static_cast<std::size_t>(i)] = tr.to_ms(m.mu[static_cast<std::size_t>(i)]);
    out.sigma[static_cast<std::size_t>(i)] = m.sigma[static_cast<std::size_t>(i)] * tr.scale;
  }
  return out;
}

// log density transforms with the -ln(scale) Jacobian term
inline double log_prob_ms(const MixtureParams& m_std, const AffineTransform& tr,
                          double y_ms) {
  return log_prob(m_std, tr.from_ms(y_ms)) - std::log(tr.scale);
}

// ---------------------------------------------------------------------------
// differentiable mixture NLL over a (B,L,V) parameter tensor
// ---------------------------------------------------------------------------

// theta: (B,L,3K) raw parameters; y_std: standardized targets laid out (B,L).
// Returns per-(sample,step) log-likelihood tensor of shape (B,L,1).
inline diff::Var log_prob_graph(diff::Tape& t, const diff::Var& theta,
                                const std::vector<double>& y_std) {
  const diff::Tensor& tv = theta.value();
  if (tv.rank() != 3) throw ShapeError("log_prob_graph: theta must be rank 3");
  int b = tv.dim(0), l = tv.dim(1), v = tv.dim(2);
  if (v % 3 != 0) throw ShapeError("log_prob_graph: V must be 3K");
  int k = v / 3;
  if (static_cast<int>(y_std.size()) != b * l)
    throw ShapeError("log_prob_graph: target count mismatch");

  diff::Var logits = diff::slice_last(t, theta, 0, k);
  diff::Var mu = diff::slice_last(t, theta, k, k);
  diff::Var sraw = diff::slice_last(t, theta, 2 * k, k);

  diff::Var logw = diff::log_softmax_last(t, logits);
  diff::Var sigma =
      diff::add_const(t, diff::softplus(t, sraw), kSigmaFloor);

  // replicate targets across components
  diff::Tensor yrep({b, l, k});
  for (int i = 0; i < b * l; ++i)
    for (int j = 0; j < k; ++j)
      yrep[static_cast<std::size_t>(i) * k + j] = y_std[static_cast<std::size_t>(i)];
  diff::Var y = t.constant(std::move(yrep));

  diff::Var z = diff::div(t, diff::sub(t, y, mu), sigma);
  diff::Var comp = diff::sub(t, logw, diff::log_op(t, sigma));
  comp = diff::sub(t, comp, diff::scale(t, diff::mul(t, z, z), 0.5));
  comp = diff::add_const(t, comp, -kHalfLog2Pi);
  return diff::logsumexp_last(t, comp);  // (B,L,1)
}

}  // namespace owdf::mdn
