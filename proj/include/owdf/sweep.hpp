#pragma once

// Grid experiments: {model kind} x {decode mode} x {H:L} x {train size} x
// {token size}. One checkpoint and report per cell, plus an aggregate CSV for
// plotting. Cells run sequentially with seeds derived from the base seed.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "owdf/backbones.hpp"
#include "owdf/common.hpp"
#include "owdf/dataset.hpp"
#include "owdf/evaluator.hpp"
#include "owdf/trace_sim.hpp"
#include "owdf/trainer.hpp"

namespace owdf::sweep {

struct SweepSpec {
  sim::SimConfig sim;
  std::string trace_path;  // when set, ingest instead of simulating
  std::vector<model::ModelKind> models;
  std::vector<model::DecodeMode> decode_modes = {model::DecodeMode::Parallel};
  std::vector<std::pair<int, int>> horizons = {{50, 50}};  // (H, L)
  std::vector<int> train_sizes = {0};                      // 0 = use all
  std::vector<int> token_dims = {16};
  train::TrainConfig train_cfg;
  double test_fraction = 0.2;
  int mixture_components = 8;

  void validate() const {
    if (models.empty() || decode_modes.empty() || horizons.empty() ||
        train_sizes.empty() || token_dims.empty())
      throw ConfigError("sweep: every grid axis needs at least one value");
    train_cfg.validate();
  }
};

struct CellResult {
  std::string model;
  std::string decode;
  int history = 0, horizon = 0;
  int train_size = 0;
  int token_dim = 0;
  std::size_t param_count = 0;
  int epochs = 0;
  double best_val_nll = 0.0;
  double test_nll = 0.0;
  double test_nll_stderr = 0.0;
  double mae_ms = 0.0;
  double per_sample_time_s = 0.0;
};

inline SweepSpec sweep_spec_from_json(const nlohmann::json& j) {
  SweepSpec sp;
  if (j.contains("sim")) sp.sim = sim::sim_config_from_json(j.at("sim"));
  if (j.contains("trace_path")) sp.trace_path = j.at("trace_path");
  for (const auto& m : j.at("models"))
    sp.models.push_back(model::kind_from_name(m));
  if (j.contains("decode_modes")) {
    sp.decode_modes.clear();
    for (const auto& d : j.at("decode_modes"))
      sp.decode_modes.push_back(d == "autoregressive"
                                    ? model::DecodeMode::Autoregressive
                                    : model::DecodeMode::Parallel);
  }
  if (j.contains("horizons")) {
    sp.horizons.clear();
    for (const auto& hl : j.at("horizons"))
      sp.horizons.emplace_back(hl.at(0), hl.at(1));
  }
  if (j.contains("train_sizes"))
    sp.train_sizes = j.at("train_sizes").get<std::vector<int>>();
  if (j.contains("token_dims"))
    sp.token_dims = j.at("token_dims").get<std::vector<int>>();
  if (j.contains("test_fraction")) sp.test_fraction = j.at("test_fraction");
  if (j.contains("mixture_components"))
    sp.mixture_components = j.at("mixture_components");
  auto& tc = sp.train_cfg;
  if (j.contains("train")) {
    const auto& t = j.at("train");
    if (t.contains("learning_rate")) tc.learning_rate = t.at("learning_rate");
    if (t.contains("batch_size")) tc.batch_size = t.at("batch_size");
    if (t.contains("max_epochs")) tc.max_epochs = t.at("max_epochs");
    if (t.contains("patience")) tc.patience = t.at("patience");
    if (t.contains("seed")) tc.seed = t.at("seed");
  }
  sp.validate();
  return sp;
}

namespace detail {

// Keep only the first `size` train windows (in shuffled order) so smaller
// cells see a strict subset distribution, then restore index order.
inline void truncate_train(data::Dataset& ds, int size, Rng& rng) {
  if (size <= 0 || size >= static_cast<int>(ds.split.train.size())) return;
  std::vector<int> idx = ds.split.train;
  shuffle_indices(idx, rng);
  idx.resize(static_cast<std::size_t>(size));
  std::sort(idx.begin(), idx.end());
  ds.split.train = std::move(idx);
}

}  // namespace detail

inline std::vector<CellResult> run_sweep(const SweepSpec& spec,
                                         const std::string& out_dir) {
  spec.validate();
  std::vector<sim::PacketRecord> base_records;
  if (!spec.trace_path.empty())
    base_records = sim::ingest_records(spec.trace_path);

  std::vector<CellResult> results;
  std::ofstream agg(out_dir + "/results.csv");
  if (!agg) throw DataError("cannot write sweep results in " + out_dir);
  agg.precision(12);
  agg << "model,decode,history,horizon,train_size,token_dim,param_count,"
         "epochs,best_val_nll,test_nll,test_nll_stderr,mae_ms,"
         "per_sample_time_s\n";

  Rng cell_seeds(spec.train_cfg.seed);
  int cell_idx = 0;
  for (auto kind : spec.models)
    for (auto decode : spec.decode_modes)
      for (auto [h, l] : spec.horizons)
        for (int tsize : spec.train_sizes)
          for (int tdim : spec.token_dims) {
            Rng rng = cell_seeds.spawn(static_cast<std::uint64_t>(cell_idx));
            std::uint64_t cell_seed = rng.raw();

            std::vector<sim::PacketRecord> records;
            if (!spec.trace_path.empty()) {
              records = base_records;
            } else {
              sim::SimConfig sc = spec.sim;
              if (tsize > 0) {
                // enough records for the requested train-window count plus
                // val and test shares
                double pool = static_cast<double>(tsize) / 0.8;
                int need = static_cast<int>(pool / (1.0 - spec.test_fraction)) +
                           h + l + 16;
                if (sc.n_packets < need) sc.n_packets = need;
              }
              records = sim::simulate_trace(sc);
            }

            data::Dataset ds = data::prepare_dataset(
                std::move(records), {h, l}, spec.test_fraction, cell_seed);
            detail::truncate_train(ds, tsize, rng);

            model::Forecaster fc;
            fc.cfg.kind = kind;
            fc.cfg.decode_mode = decode;
            fc.cfg.history = h;
            fc.cfg.horizon = l;
            fc.cfg.token_dim = tdim;
            fc.cfg.mixture_components = spec.mixture_components;
            Rng init_rng(cell_seed ^ 0xA5A5A5A5ull);
            fc.init(init_rng);

            train::TrainConfig tc = spec.train_cfg;
            tc.seed = cell_seed;
            train::TrainHistory hist = train::train(fc, ds, tc);

            auto test_split = data::select(ds.samples, ds.split.test);
            eval::EvalReport rep =
                eval::evaluate(fc, test_split, ds.stats, tc.batch_size);

            std::string tag = "cell" + std::to_string(cell_idx) + "_" +
                              model::kind_name(kind) + "_" +
                              (decode == model::DecodeMode::Parallel ? "par"
                                                                     : "ar") +
                              "_h" + std::to_string(h) + "l" +
                              std::to_string(l) + "_n" + std::to_string(tsize) +
                              "_s" + std::to_string(tdim);
            train::save_checkpoint(fc, ds.window, ds.stats, hist, cell_seed,
                                   out_dir + "/" + tag + ".ckpt");
            std::ofstream rj(out_dir + "/" + tag + ".report.json");
            rj << eval::report_to_json(rep).dump(2) << "\n";
            eval::write_report_csv(rep, out_dir + "/" + tag + ".report.csv");

            CellResult r;
            r.model = model::kind_name(kind);
            r.decode = decode == model::DecodeMode::Parallel ? "parallel"
                                                             : "autoregressive";
            r.history = h;
            r.horizon = l;
            r.train_size = static_cast<int>(ds.split.train.size());
            r.token_dim = tdim;
            r.param_count = fc.params.total_count();
            r.epochs = static_cast<int>(hist.train_nll.size());
            r.best_val_nll = hist.best_val_nll;
            r.test_nll = rep.nll_mean;
            r.test_nll_stderr = rep.nll_stderr;
            r.mae_ms = rep.mae_ms;
            r.per_sample_time_s = hist.per_sample_time_s;
            results.push_back(r);

            agg << r.model << "," << r.decode << "," << r.history << ","
                << r.horizon << "," << r.train_size << "," << r.token_dim
                << "," << r.param_count << "," << r.epochs << ","
                << r.best_val_nll << "," << r.test_nll << ","
                << r.test_nll_stderr << "," << r.mae_ms << ","
                << r.per_sample_time_s << "\n";
            ++cell_idx;
          }
  return results;
}

}  // namespace owdf::sweep
