// owdf: simulate / prepare / train / evaluate / sweep / plot pipeline for
// probabilistic packet-delay forecasting experiments.
//
// Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 training
// divergence. Every successful command prints one final JSON status line.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "owdf/backbones.hpp"
#include "owdf/common.hpp"
#include "owdf/dataset.hpp"
#include "owdf/evaluator.hpp"
#include "owdf/sweep.hpp"
#include "owdf/trace_sim.hpp"
#include "owdf/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::optional<std::uint64_t> env_seed_override() {
  const char* s = std::getenv("OWDF_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    return std::stoull(s);
  } catch (...) {
    throw owdf::ConfigError("OWDF_SEED is not an unsigned integer");
  }
}

void status_line(const std::string& command, json extra = {}) {
  json j = {{"command", command}, {"status", "ok"}};
  for (auto& [k, v] : extra.items()) j[k] = v;
  std::cout << j.dump() << std::endl;
}

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw owdf::DataError("cannot open: " + path);
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw owdf::DataError("invalid JSON in " + path);
  return j;
}

// Resolve `--out dir-or-file` style arguments to a concrete file path.
std::string resolve_out(const std::string& out, const std::string& leaf) {
  if (out.empty()) throw owdf::ConfigError("empty output path");
  if (out.back() == '/' || fs::is_directory(out)) {
    fs::create_directories(out);
    return (fs::path(out) / leaf).string();
  }
  if (fs::path(out).has_parent_path())
    fs::create_directories(fs::path(out).parent_path());
  return out;
}

std::string resolve_ckpt(const std::string& path) {
  if (fs::is_directory(path)) return (fs::path(path) / "model.ckpt").string();
  return path;
}

owdf::model::ModelKind parse_model(const std::string& name) {
  std::string n = name;
  for (auto& c : n)
    if (c == '-') c = '_';
  return owdf::model::kind_from_name(n);
}

// ---------------------------------------------------------------------------
// tiny SVG line/band plotting with a companion CSV
// ---------------------------------------------------------------------------

struct Series {
  std::string name;
  std::vector<double> x, y;
};

const char* kPalette[] = {"#1f6fb4", "#d1495b", "#3a9e62", "#8a5ab8",
                          "#c77f2e", "#4a4a4a"};

struct Frame {
  double x0, x1, y0, y1;            // data ranges
  double px0 = 70, px1 = 610, py0 = 330, py1 = 40;  // pixel box
  double sx(double x) const {
    return px0 + (x - x0) / (x1 - x0 + 1e-300) * (px1 - px0);
  }
  double sy(double y) const {
    return py0 + (y - y0) / (y1 - y0 + 1e-300) * (py1 - py0);
  }
};

Frame fit_frame(const std::vector<Series>& series) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (x0 > x1) throw owdf::ConfigError("plot: no data points");
  if (x0 == x1) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  double pad = (y1 - y0) * 0.08 + 1e-9;
  y0 -= pad;
  y1 += pad;
  return {x0, x1, y0, y1};
}

void write_line_svg(const std::string& path, const std::string& title,
                    const std::string& xlabel, const std::string& ylabel,
                    const std::vector<Series>& series, bool diagonal = false) {
  Frame fr = fit_frame(series);
  std::ofstream f(path);
  if (!f) throw owdf::DataError("cannot write: " + path);
  f.precision(8);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='640' height='400' "
       "viewBox='0 0 640 400'>\n";
  f << "<!-- data table\nseries,x,y\n";
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i)
      f << s.name << "," << s.x[i] << "," << s.y[i] << "\n";
  f << "-->\n";
  f << "<rect width='640' height='400' fill='white'/>\n";
  f << "<text x='320' y='22' text-anchor='middle' font-size='15'>" << title
    << "</text>\n";
  // axes
  f << "<line x1='" << fr.px0 << "' y1='" << fr.py0 << "' x2='" << fr.px1
    << "' y2='" << fr.py0 << "' stroke='black'/>\n";
  f << "<line x1='" << fr.px0 << "' y1='" << fr.py0 << "' x2='" << fr.px0
    << "' y2='" << fr.py1 << "' stroke='black'/>\n";
  f << "<text x='" << (fr.px0 + fr.px1) / 2
    << "' y='365' text-anchor='middle' font-size='12'>" << xlabel
    << "</text>\n";
  f << "<text x='18' y='" << (fr.py0 + fr.py1) / 2
    << "' text-anchor='middle' font-size='12' transform='rotate(-90 18 "
    << (fr.py0 + fr.py1) / 2 << ")'>" << ylabel << "</text>\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", fr.x0);
  f << "<text x='" << fr.px0 << "' y='348' font-size='11'>" << buf
    << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.4g", fr.x1);
  f << "<text x='" << fr.px1 << "' y='348' text-anchor='end' font-size='11'>"
    << buf << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.4g", fr.y0);
  f << "<text x='" << fr.px0 - 6 << "' y='" << fr.py0
    << "' text-anchor='end' font-size='11'>" << buf << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.4g", fr.y1);
  f << "<text x='" << fr.px0 - 6 << "' y='" << fr.py1 + 4
    << "' text-anchor='end' font-size='11'>" << buf << "</text>\n";
  if (diagonal) {
    double lo = std::max(fr.x0, fr.y0), hi = std::min(fr.x1, fr.y1);
    f << "<line x1='" << fr.sx(lo) << "' y1='" << fr.sy(lo) << "' x2='"
      << fr.sx(hi) << "' y2='" << fr.sy(hi)
      << "' stroke='gray' stroke-dasharray='6,4'/>\n";
  }
  int ci = 0;
  for (const auto& s : series) {
    const char* color = kPalette[ci % 6];
    f << "<polyline fill='none' stroke='" << color << "' stroke-width='1.8' "
         "points='";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      f << fr.sx(s.x[i]) << "," << fr.sy(s.y[i]) << " ";
    f << "'/>\n";
    f << "<text x='" << fr.px1 - 4 << "' y='" << (fr.py1 + 16 + 16 * ci)
      << "' text-anchor='end' font-size='12' fill='" << color << "'>"
      << s.name << "</text>\n";
    ++ci;
  }
  f << "</svg>\n";
}

void write_plot_csv(const std::string& path, const std::vector<Series>& series) {
  std::ofstream f(path);
  if (!f) throw owdf::DataError("cannot write: " + path);
  f.precision(12);
  f << "series,x,y\n";
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i)
      f << s.name << "," << s.x[i] << "," << s.y[i] << "\n";
}

std::vector<std::map<std::string, std::string>> read_csv(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) throw owdf::DataError("cannot open: " + path);
  std::string line;
  if (!std::getline(f, line)) throw owdf::DataError("empty CSV: " + path);
  std::vector<std::string> cols;
  std::stringstream hs(line);
  std::string cell;
  while (std::getline(hs, cell, ',')) cols.push_back(cell);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::map<std::string, std::string> row;
    for (const auto& c : cols) {
      if (!std::getline(ls, cell, ',')) cell.clear();
      row[c] = cell;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

void cmd_simulate(const std::string& config_path, const std::string& out) {
  owdf::sim::SimConfig cfg =
      owdf::sim::sim_config_from_json(read_json_file(config_path));
  if (auto s = env_seed_override()) cfg.seed = *s;
  auto records = owdf::sim::simulate_trace(cfg);
  std::string path = resolve_out(out, "trace.jsonl");
  owdf::sim::write_records(records, path);
  status_line("simulate", {{"trace", path},
                           {"n_records", records.size()},
                           {"seed", cfg.seed}});
}

void cmd_prepare(const std::string& trace, int history, int horizon,
                 double test_fraction, std::uint64_t seed,
                 const std::string& out) {
  if (auto s = env_seed_override()) seed = *s;
  auto records = owdf::sim::ingest_records(trace);
  owdf::data::Dataset ds = owdf::data::prepare_dataset(
      std::move(records), {history, horizon}, test_fraction, seed);
  fs::create_directories(out);
  owdf::data::save_dataset(ds, out);
  status_line("prepare", {{"dataset", out},
                          {"n_samples", ds.split.n_samples},
                          {"train", ds.split.train.size()},
                          {"val", ds.split.val.size()},
                          {"test", ds.split.test.size()}});
}

void cmd_train(const std::string& dataset_dir, const std::string& model_name,
               const std::string& decode, int token_dim, int mixture_k,
               owdf::train::TrainConfig tc, const std::string& out) {
  if (auto s = env_seed_override()) tc.seed = *s;
  owdf::data::Dataset ds = owdf::data::load_dataset(dataset_dir);

  owdf::model::Forecaster fc;
  fc.cfg.kind = parse_model(model_name);
  fc.cfg.decode_mode = decode == "autoregressive"
                           ? owdf::model::DecodeMode::Autoregressive
                           : owdf::model::DecodeMode::Parallel;
  fc.cfg.token_dim = token_dim;
  fc.cfg.mixture_components = mixture_k;
  fc.cfg.history = ds.window.history_len;
  fc.cfg.horizon = ds.window.horizon_len;
  owdf::Rng init_rng(tc.seed ^ 0xA5A5A5A5ull);
  fc.init(init_rng);

  owdf::train::TrainHistory hist = owdf::train::train(fc, ds, tc);
  std::string path = resolve_out(out, "model.ckpt");
  owdf::train::save_checkpoint(fc, ds.window, ds.stats, hist, tc.seed, path);
  status_line("train", {{"checkpoint", path},
                        {"model", owdf::model::kind_name(fc.cfg.kind)},
                        {"param_count", fc.params.total_count()},
                        {"epochs", hist.train_nll.size()},
                        {"best_epoch", hist.best_epoch},
                        {"best_val_nll", hist.best_val_nll},
                        {"per_sample_time_s", hist.per_sample_time_s},
                        {"seed", tc.seed}});
}

void cmd_evaluate(const std::string& ckpt_path, const std::string& dataset_dir,
                  const std::string& out) {
  owdf::train::Checkpoint ck =
      owdf::train::load_checkpoint(resolve_ckpt(ckpt_path));
  owdf::data::Dataset ds = owdf::data::load_dataset(dataset_dir);
  if (ds.window.history_len != ck.window.history_len ||
      ds.window.horizon_len != ck.window.horizon_len)
    throw owdf::DataError("dataset window does not match checkpoint window");

  auto test_split = owdf::data::select(ds.samples, ds.split.test);
  if (test_split.empty()) throw owdf::DataError("evaluate: empty test split");
  owdf::eval::EvalReport rep =
      owdf::eval::evaluate(ck.model, test_split, ck.stats);
  auto preds = owdf::eval::predict_all(ck.model, test_split, ck.stats);
  owdf::eval::CoverageCurve curve =
      owdf::eval::coverage_curve(preds, test_split, ck.stats);
  owdf::eval::FanChart fan =
      owdf::eval::fan_chart(ck.model, test_split.front(), ck.stats);

  json j = owdf::eval::report_to_json(rep);
  j["model"] = owdf::train::model_config_to_json(ck.model.cfg);
  j["calibration"] = {{"nominal", curve.nominal},
                      {"empirical", curve.empirical}};
  json bands;
  for (const auto& [a, lo] : fan.lo_ms) {
    char key[16];
    std::snprintf(key, sizeof(key), "%.2f", a);
    bands[key] = {{"lo", lo}, {"hi", fan.hi_ms.at(a)}};
  }
  j["fanchart"] = {{"history_ms", fan.history_ms},
                   {"truth_ms", fan.truth_ms},
                   {"mean_ms", fan.mean_ms},
                   {"bands", bands}};

  std::string path = resolve_out(out, "report.json");
  std::ofstream f(path);
  if (!f) throw owdf::DataError("cannot write report: " + path);
  f << j.dump(2) << "\n";
  std::string csv = path;
  if (csv.size() > 5 && csv.substr(csv.size() - 5) == ".json")
    csv = csv.substr(0, csv.size() - 5);
  csv += ".csv";
  owdf::eval::write_report_csv(rep, csv);
  status_line("evaluate", {{"report", path},
                           {"report_csv", csv},
                           {"nll_mean", rep.nll_mean},
                           {"mae_ms", rep.mae_ms},
                           {"n_samples", rep.n_samples}});
}

void cmd_sweep(const std::string& spec_path, const std::string& out) {
  owdf::sweep::SweepSpec spec =
      owdf::sweep::sweep_spec_from_json(read_json_file(spec_path));
  if (auto s = env_seed_override()) spec.train_cfg.seed = *s;
  fs::create_directories(out);
  auto results = owdf::sweep::run_sweep(spec, out);
  status_line("sweep",
              {{"results", out + "/results.csv"}, {"cells", results.size()}});
}

void cmd_plot(const std::string& report, const std::string& kind,
              const std::string& out) {
  std::vector<Series> series;
  bool diagonal = false;
  std::string title = kind, xlabel, ylabel;

  auto sweep_series = [&](const std::string& xcol, const std::string& ycol) {
    auto rows = read_csv(report);
    if (rows.empty()) throw owdf::ConfigError("plot: report has no rows");
    std::map<std::string, Series> by_model;
    for (auto& row : rows) {
      std::string name = row["model"] + "/" + row["decode"];
      auto& s = by_model[name];
      s.name = name;
      s.x.push_back(std::stod(row.at(xcol)));
      s.y.push_back(std::stod(row.at(ycol)));
    }
    for (auto& [k, s] : by_model) series.push_back(std::move(s));
  };

  if (kind == "calibration" || kind == "fanchart") {
    json j = read_json_file(report);
    if (kind == "calibration") {
      if (!j.contains("calibration"))
        throw owdf::ConfigError("plot: report lacks calibration data");
      Series s;
      s.name = "empirical";
      s.x = j["calibration"]["nominal"].get<std::vector<double>>();
      s.y = j["calibration"]["empirical"].get<std::vector<double>>();
      if (s.x.empty()) throw owdf::ConfigError("plot: empty calibration data");
      series.push_back(std::move(s));
      diagonal = true;
      xlabel = "nominal coverage";
      ylabel = "empirical coverage";
    } else {
      if (!j.contains("fanchart"))
        throw owdf::ConfigError("plot: report lacks fanchart data");
      const json& fc = j["fanchart"];
      auto hist = fc.at("history_ms").get<std::vector<double>>();
      auto truth = fc.at("truth_ms").get<std::vector<double>>();
      auto mean = fc.at("mean_ms").get<std::vector<double>>();
      Series obs;
      obs.name = "observed";
      int h = static_cast<int>(hist.size());
      for (int i = 0; i < h; ++i) {
        obs.x.push_back(static_cast<double>(i - h));
        obs.y.push_back(hist[static_cast<std::size_t>(i)]);
      }
      for (std::size_t l = 0; l < truth.size(); ++l) {
        obs.x.push_back(static_cast<double>(l));
        obs.y.push_back(truth[l]);
      }
      series.push_back(std::move(obs));
      Series ms;
      ms.name = "mean";
      for (std::size_t l = 0; l < mean.size(); ++l) {
        ms.x.push_back(static_cast<double>(l));
        ms.y.push_back(mean[l]);
      }
      series.push_back(std::move(ms));
      for (auto& [level, band] : fc.at("bands").items()) {
        Series lo, hi;
        lo.name = level + " lo";
        hi.name = level + " hi";
        auto lov = band.at("lo").get<std::vector<double>>();
        auto hiv = band.at("hi").get<std::vector<double>>();
        for (std::size_t l = 0; l < lov.size(); ++l) {
          lo.x.push_back(static_cast<double>(l));
          lo.y.push_back(lov[l]);
          hi.x.push_back(static_cast<double>(l));
          hi.y.push_back(hiv[l]);
        }
        series.push_back(std::move(lo));
        series.push_back(std::move(hi));
      }
      xlabel = "step (history < 0)";
      ylabel = "delay [ms]";
    }
  } else if (kind == "nll-vs-horizon") {
    sweep_series("horizon", "test_nll");
    xlabel = "horizon L";
    ylabel = "test NLL";
  } else if (kind == "nll-vs-datasize") {
    sweep_series("train_size", "test_nll");
    xlabel = "train windows";
    ylabel = "test NLL";
  } else if (kind == "train-time") {
    sweep_series("horizon", "per_sample_time_s");
    xlabel = "horizon L";
    ylabel = "per-sample train time [s]";
  } else if (kind == "token-size") {
    sweep_series("param_count", "test_nll");
    xlabel = "parameter count";
    ylabel = "test NLL";
  } else {
    throw owdf::ConfigError("unknown plot kind: " + kind);
  }

  std::string path = resolve_out(out, "fig.svg");
  write_line_svg(path, title, xlabel, ylabel, series, diagonal);
  std::string csv = path;
  if (csv.size() > 4 && csv.substr(csv.size() - 4) == ".svg")
    csv = csv.substr(0, csv.size() - 4);
  csv += ".csv";
  write_plot_csv(csv, series);
  status_line("plot", {{"figure", path}, {"csv", csv}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"probabilistic packet one-way delay forecasting"};
  app.require_subcommand(1);

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "generate a synthetic trace");
  std::string sim_config, sim_out;
  sim_cmd->add_option("--config", sim_config, "simulator JSON config")
      ->required();
  sim_cmd->add_option("--out", sim_out, "output trace path")->required();

  // prepare
  auto* prep_cmd = app.add_subcommand("prepare", "window a trace into a dataset");
  std::string prep_trace, prep_out;
  int prep_h = 50, prep_l = 50;
  double prep_test = 0.2;
  std::uint64_t prep_seed = 1;
  prep_cmd->add_option("--trace", prep_trace, "JSONL trace")->required();
  prep_cmd->add_option("--history", prep_h, "history length H");
  prep_cmd->add_option("--horizon", prep_l, "horizon length L");
  prep_cmd->add_option("--test-fraction", prep_test, "trailing test share");
  prep_cmd->add_option("--seed", prep_seed, "split shuffle seed");
  prep_cmd->add_option("--out", prep_out, "dataset directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "fit a model on a dataset");
  std::string tr_ds, tr_model = "transformer", tr_decode = "parallel", tr_out;
  int tr_tdim = 16, tr_k = 8;
  owdf::train::TrainConfig tr_cfg;
  train_cmd->add_option("--dataset", tr_ds, "dataset directory")->required();
  train_cmd
      ->add_option("--model", tr_model,
                   "mlp | lstm-ss | lstm | transformer")
      ->check(CLI::IsMember({"mlp", "lstm-ss", "lstm_ss", "lstm",
                             "transformer"}));
  train_cmd->add_option("--decode", tr_decode, "parallel | autoregressive")
      ->check(CLI::IsMember({"parallel", "autoregressive"}));
  train_cmd->add_option("--token-dim", tr_tdim, "token dimension S");
  train_cmd->add_option("--mixture", tr_k, "mixture components K");
  train_cmd->add_option("--lr", tr_cfg.learning_rate, "learning rate");
  train_cmd->add_option("--batch", tr_cfg.batch_size, "batch size");
  train_cmd->add_option("--epochs", tr_cfg.max_epochs, "max epochs");
  train_cmd->add_option("--patience", tr_cfg.patience, "early-stop patience");
  train_cmd->add_option("--seed", tr_cfg.seed, "training seed");
  train_cmd->add_option("--out", tr_out, "checkpoint path")->required();

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint");
  std::string ev_ckpt, ev_ds, ev_out;
  eval_cmd->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--dataset", ev_ds, "dataset directory")->required();
  eval_cmd->add_option("--out", ev_out, "report JSON path")->required();

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "run a grid of experiments");
  std::string sw_spec, sw_out;
  sweep_cmd->add_option("--spec", sw_spec, "sweep spec JSON")->required();
  sweep_cmd->add_option("--out", sw_out, "results directory")->required();

  // plot
  auto* plot_cmd = app.add_subcommand("plot", "render a figure from a report");
  std::string pl_report, pl_kind, pl_out;
  plot_cmd->add_option("--report", pl_report, "report JSON or sweep CSV")
      ->required();
  plot_cmd
      ->add_option("--kind", pl_kind,
                   "fanchart | calibration | nll-vs-horizon | "
                   "nll-vs-datasize | train-time | token-size")
      ->required();
  plot_cmd->add_option("--out", pl_out, "SVG output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (sim_cmd->parsed()) cmd_simulate(sim_config, sim_out);
    else if (prep_cmd->parsed())
      cmd_prepare(prep_trace, prep_h, prep_l, prep_test, prep_seed, prep_out);
    else if (train_cmd->parsed())
      cmd_train(tr_ds, tr_model, tr_decode, tr_tdim, tr_k, tr_cfg, tr_out);
    else if (eval_cmd->parsed()) cmd_evaluate(ev_ckpt, ev_ds, ev_out);
    else if (sweep_cmd->parsed()) cmd_sweep(sw_spec, sw_out);
    else if (plot_cmd->parsed()) cmd_plot(pl_report, pl_kind, pl_out);
  } catch (const owdf::TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const owdf::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const owdf::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const owdf::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
