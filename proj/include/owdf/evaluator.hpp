#pragma once

// Test-split metrics: standardized NLL with a standard error, MAE in
// milliseconds, central-interval coverage and calibration curves, per-step
// and per-inter-arrival NLL decompositions, and fan-chart extraction.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "owdf/backbones.hpp"
#include "owdf/common.hpp"
#include "owdf/dataset.hpp"
#include "owdf/mdn.hpp"
#include "owdf/tokenizer.hpp"

namespace owdf::eval {

// Per-window forecast: one standardized mixture per future step. Single-step
// models repeat their one distribution across the horizon.
struct Prediction {
  std::vector<mdn::MixtureParams> steps;
};

inline std::vector<Prediction> predict_all(
    model::Forecaster& model, const std::vector<data::WindowSample>& split,
    const data::NormStats& stats, int batch_size = 64) {
  if (split.empty()) throw DataError("predict_all: empty split");
  int horizon = split[0].cfg.horizon_len;
  Rng dummy(0);
  std::vector<Prediction> out;
  out.reserve(split.size());
  for (std::size_t off = 0; off < split.size();
       off += static_cast<std::size_t>(batch_size)) {
    std::size_t end =
        std::min(split.size(), off + static_cast<std::size_t>(batch_size));
    std::vector<data::WindowSample> batch(
        split.begin() + static_cast<long>(off),
        split.begin() + static_cast<long>(end));
    tok::FeatureBatch fb = tok::make_feature_batch(batch, stats, model.tok_cfg);
    diff::Tape t;
    diff::Var theta = model.forward(t, fb, false, dummy);
    const diff::Tensor& tv = theta.value();
    int b = tv.dim(0), lout = tv.dim(1), v = tv.dim(2);
    for (int i = 0; i < b; ++i) {
      Prediction p;
      p.steps.reserve(static_cast<std::size_t>(horizon));
      for (int l = 0; l < horizon; ++l) {
        int src = lout == 1 ? 0 : l;
        const double* row =
            tv.data() + (static_cast<std::size_t>(i) * lout + src) * v;
        p.steps.push_back(mdn::to_mixture(std::vector<double>(row, row + v)));
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

struct EvalReport {
  double nll_mean = 0.0;    // standardized units, per (sample, step)
  double nll_stderr = 0.0;
  double mae_ms = 0.0;
  std::map<double, double> coverage;    // nominal level -> empirical
  std::vector<double> per_step_nll;     // length L
  std::map<std::string, double> per_group_nll;  // inter-arrival key -> NLL
  std::map<std::string, std::size_t> group_sizes;
  std::size_t n_samples = 0;
  std::size_t n_pairs = 0;
  std::string point_estimate = "mixture_mean";
};

// Grouping key: the window's characteristic sending period, taken from its
// last history record. Constant-rate traces land in one bucket.
inline std::string group_key(const data::WindowSample& w) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g",
                w.history(w.cfg.history_len - 1).inter_arrival_ms);
  return std::string(buf);
}

inline EvalReport evaluate(model::Forecaster& model,
                           const std::vector<data::WindowSample>& split,
                           const data::NormStats& stats, int batch_size = 64) {
  std::vector<Prediction> preds = predict_all(model, split, stats, batch_size);
  int horizon = split[0].cfg.horizon_len;
  const std::vector<double> levels = {0.5, 0.7, 0.9, 0.99};

  EvalReport rep;
  rep.n_samples = split.size();
  rep.per_step_nll.assign(static_cast<std::size_t>(horizon), 0.0);
  std::map<double, std::size_t> cover_hits;
  for (double a : levels) cover_hits[a] = 0;

  double nll_sum = 0.0, nll_sq_sum = 0.0, abs_err_sum = 0.0;
  std::map<std::string, double> group_sum;

  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& w = split[i];
    std::string key = group_key(w);
    for (int l = 0; l < horizon; ++l) {
      const mdn::MixtureParams& m = preds[i].steps[static_cast<std::size_t>(l)];
      double y_ms = w.future_delay_ms(l);
      double y = stats.delay_to_std(y_ms);
      double nll = -mdn::log_prob(m, y);
      nll_sum += nll;
      nll_sq_sum += nll * nll;
      rep.per_step_nll[static_cast<std::size_t>(l)] += nll;
      group_sum[key] += nll;
      rep.group_sizes[key] += 1;
      abs_err_sum += std::fabs(stats.delay_to_ms(mdn::mixture_mean(m)) - y_ms);
      for (double a : levels) {
        double lo = mdn::quantile(m, (1.0 - a) / 2.0);
        double hi = mdn::quantile(m, (1.0 + a) / 2.0);
        if (y >= lo && y <= hi) cover_hits[a] += 1;
      }
    }
  }

  rep.n_pairs = split.size() * static_cast<std::size_t>(horizon);
  double n = static_cast<double>(rep.n_pairs);
  rep.nll_mean = nll_sum / n;
  double var = nll_sq_sum / n - rep.nll_mean * rep.nll_mean;
  rep.nll_stderr = std::sqrt(std::max(0.0, var) / n);
  rep.mae_ms = abs_err_sum / n;
  for (double a : levels)
    rep.coverage[a] = static_cast<double>(cover_hits[a]) / n;
  for (auto& v : rep.per_step_nll) v /= static_cast<double>(split.size());
  for (const auto& [key, sum] : group_sum)
    rep.per_group_nll[key] = sum / static_cast<double>(rep.group_sizes[key]);
  return rep;
}

inline double empirical_coverage(const std::vector<Prediction>& preds,
                                 const std::vector<data::WindowSample>& split,
                                 const data::NormStats& stats, double level) {
  if (!(level > 0.0 && level < 1.0))
    throw ConfigError("empirical_coverage: level must be in (0,1)");
  int horizon = split[0].cfg.horizon_len;
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < split.size(); ++i)
    for (int l = 0; l < horizon; ++l) {
      const mdn::MixtureParams& m = preds[i].steps[static_cast<std::size_t>(l)];
      double y = stats.delay_to_std(split[i].future_delay_ms(l));
      double lo = mdn::quantile(m, (1.0 - level) / 2.0);
      double hi = mdn::quantile(m, (1.0 + level) / 2.0);
      hits += (y >= lo && y <= hi) ? 1u : 0u;
      ++total;
    }
  return static_cast<double>(hits) / static_cast<double>(total);
}

struct CoverageCurve {
  std::vector<double> nominal;
  std::vector<double> empirical;
};

inline CoverageCurve coverage_curve(const std::vector<Prediction>& preds,
                                    const std::vector<data::WindowSample>& split,
                                    const data::NormStats& stats) {
  CoverageCurve c;
  for (double a = 0.05; a < 0.975; a += 0.05) c.nominal.push_back(a);
  c.nominal.push_back(0.99);
  for (double a : c.nominal)
    c.empirical.push_back(empirical_coverage(preds, split, stats, a));
  return c;
}

// Fan chart for one window: per future step, central-interval edges at
// {50,70,90,99}% plus the mixture mean, all in milliseconds, alongside the
// observed history and the true future delays.
struct FanChart {
  std::vector<double> history_ms;
  std::vector<double> truth_ms;
  std::vector<double> mean_ms;                       // length L
  std::map<double, std::vector<double>> lo_ms, hi_ms;  // level -> length L
};

inline FanChart fan_chart(model::Forecaster& model,
                          const data::WindowSample& w,
                          const data::NormStats& stats) {
  std::vector<Prediction> preds = predict_all(model, {w}, stats, 1);
  const std::vector<double> levels = {0.5, 0.7, 0.9, 0.99};
  FanChart fc;
  for (int i = 0; i < w.cfg.history_len; ++i)
    fc.history_ms.push_back(w.history(i).delay_ms);
  for (int l = 0; l < w.cfg.horizon_len; ++l) {
    const mdn::MixtureParams& m = preds[0].steps[static_cast<std::size_t>(l)];
    fc.truth_ms.push_back(w.future_delay_ms(l));
    fc.mean_ms.push_back(stats.delay_to_ms(mdn::mixture_mean(m)));
    for (double a : levels) {
      fc.lo_ms[a].push_back(
          stats.delay_to_ms(mdn::quantile(m, (1.0 - a) / 2.0)));
      fc.hi_ms[a].push_back(
          stats.delay_to_ms(mdn::quantile(m, (1.0 + a) / 2.0)));
    }
  }
  return fc;
}

// ---------------------------------------------------------------------------
// report serialization: JSON plus a flat CSV (one row per metric)
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const EvalReport& rep) {
  nlohmann::json j;
  j["nll_mean"] = rep.nll_mean;
  j["nll_stderr"] = rep.nll_stderr;
  j["mae_ms"] = rep.mae_ms;
  j["n_samples"] = rep.n_samples;
  j["n_pairs"] = rep.n_pairs;
  j["point_estimate"] = rep.point_estimate;
  for (const auto& [a, c] : rep.coverage) {
    char key[16];
    std::snprintf(key, sizeof(key), "%.2f", a);
    j["coverage"][key] = c;
  }
  j["per_step_nll"] = rep.per_step_nll;
  for (const auto& [k, v] : rep.per_group_nll) {
    j["per_group_nll"][k] = v;
    j["group_sizes"][k] = rep.group_sizes.at(k);
  }
  return j;
}

inline void write_report_csv(const EvalReport& rep, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write report CSV: " + path);
  f.precision(12);
  f << "metric,value\n";
  f << "nll_mean," << rep.nll_mean << "\n";
  f << "nll_stderr," << rep.nll_stderr << "\n";
  f << "mae_ms," << rep.mae_ms << "\n";
  f << "n_samples," << rep.n_samples << "\n";
  f << "n_pairs," << rep.n_pairs << "\n";
  for (const auto& [a, c] : rep.coverage)
    f << "coverage_" << a << "," << c << "\n";
  for (std::size_t l = 0; l < rep.per_step_nll.size(); ++l)
    f << "nll_step_" << l << "," << rep.per_step_nll[l] << "\n";
  for (const auto& [k, v] : rep.per_group_nll)
    f << "nll_group_" << k << "," << v << "\n";
}

}  // namespace owdf::eval
