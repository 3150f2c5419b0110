#pragma once

// Subcommand implementations behind the gppcast executable. Each command
// reads its settings from one merged KeyValueConfig, writes its outputs
// into a run directory and finishes with manifest.json.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "gppcast/config.hpp"
#include "gppcast/dataset.hpp"
#include "gppcast/errors.hpp"
#include "gppcast/evaluation.hpp"
#include "gppcast/io.hpp"
#include "gppcast/random.hpp"
#include "gppcast/solar.hpp"
#include "gppcast/training.hpp"

#ifndef GPPCAST_VERSION
#define GPPCAST_VERSION "0.0.0"
#endif

namespace gppcast::cli {

namespace fs = std::filesystem;

inline constexpr const char* kVersion = GPPCAST_VERSION;

struct Invocation {
  std::string command;
  std::vector<std::string> arguments;  // argv after the program name
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  KeyValueConfig config;  // config files, then --set overrides, then subcommand flags
  std::vector<fs::path> config_files;
};

class RunManifest {
 public:
  RunManifest(const Invocation& inv, fs::path run_dir)
      : inv_(inv), run_dir_(std::move(run_dir)), started_(io::utc_timestamp()) {}

  void add_input(const fs::path& p) { inputs_.emplace_back(p.string(), io::hash_file(p)); }
  void add_output(const fs::path& p) { outputs_.emplace_back(p.string(), io::hash_file(p)); }
  void set_status(std::string s) { status_ = std::move(s); }
  void note(const std::string& key, nlohmann::ordered_json value) { notes_[key] = std::move(value); }

  void write() const {
    nlohmann::ordered_json j;
    j["tool"] = "gppcast";
    j["version"] = kVersion;
    j["command"] = inv_.command;
    j["arguments"] = inv_.arguments;
    j["seed"] = inv_.seed;
    j["jobs"] = inv_.jobs;
    std::vector<std::string> files;
    for (const auto& f : inv_.config_files) files.push_back(f.string());
    j["config_files"] = files;
    j["config"] = inv_.config.values();
    auto list = [](const std::vector<std::pair<std::string, std::string>>& v) {
      nlohmann::ordered_json a = nlohmann::ordered_json::array();
      for (const auto& [path, hash] : v) a.push_back({{"path", path}, {"fnv1a64", hash}});
      return a;
    };
    j["inputs"] = list(inputs_);
    j["outputs"] = list(outputs_);
    if (!notes_.empty()) j["results"] = notes_;
    j["status"] = status_;
    j["started"] = started_;
    j["finished"] = io::utc_timestamp();
    io::write_file_atomic(run_dir_ / "manifest.json", j.dump(2) + "\n");
  }

 private:
  const Invocation& inv_;
  fs::path run_dir_;
  std::string started_;
  std::string status_ = "ok";
  std::vector<std::pair<std::string, std::string>> inputs_, outputs_;
  nlohmann::ordered_json notes_ = nlohmann::ordered_json::object();
};

// --- shared settings ---------------------------------------------------------------------

inline dataset::BuildOptions build_options(const KeyValueConfig& c) {
  dataset::BuildOptions o;
  o.lowess.frac = c.get_double("lowess_frac", o.lowess.frac);
  o.lowess.iterations = static_cast<int>(c.get_int("lowess_iterations", o.lowess.iterations));
  o.extremes.tail = c.get_double("extreme_tail", o.extremes.tail);
  o.extremes.min_run = c.get_size("extreme_min_run", o.extremes.min_run);
  if (!(o.lowess.frac > 0.0 && o.lowess.frac <= 1.0)) throw ConfigError("lowess_frac must lie in (0, 1]");
  if (o.lowess.iterations < 0) throw ConfigError("lowess_iterations must be >= 0");
  if (!(o.extremes.tail > 0.0 && o.extremes.tail < 0.5)) throw ConfigError("extreme_tail must lie in (0, 0.5)");
  if (o.extremes.min_run < 1) throw ConfigError("extreme_min_run must be >= 1");
  return o;
}

struct LoadedData {
  std::vector<dataset::SiteSeries> sites;
  std::vector<fs::path> files;
};

inline LoadedData load_data(const fs::path& dir, const KeyValueConfig& c) {
  LoadedData d;
  d.sites = dataset::load_sites(dir, build_options(c));
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") d.files.push_back(entry.path());
  }
  std::sort(d.files.begin(), d.files.end());
  return d;
}

inline dataset::Splits make_splits(const std::vector<dataset::SiteSeries>& sites, std::size_t k,
                                   const dataset::SplitSpec& spec, const KeyValueConfig& c) {
  return dataset::split(dataset::make_windows(sites, k), spec, c.get_bool("drop_uncovered", false));
}

inline evaluation::EvalOptions eval_options(const Invocation& inv) {
  evaluation::EvalOptions o;
  o.normalizer = evaluation::parse_normalizer(inv.config.get_string("nrmse_normalizer", "mean"));
  o.target = evaluation::parse_target_kind(inv.config.get_string("eval_target", "raw"));
  o.jobs = std::max<std::size_t>(1, inv.jobs);
  return o;
}

inline std::string space_text(const KeyValueConfig& c) {
  std::string s;
  for (const auto& [k, v] : c.values()) s += (s.empty() ? "" : ";") + k + "=" + v;
  return s;
}

// --- synth ---------------------------------------------------------------------------

inline void run_synth(const Invocation& inv, const fs::path& out) {
  const dataset::SynthConfig sc = dataset::SynthConfig::from(inv.config);
  const auto opt = build_options(inv.config);
  io::ensure_directory(out);
  RunManifest manifest(inv, out);
  const auto sites = dataset::synth_generate(sc, derive_seed(inv.seed, "data"), opt);
  for (const auto& s : sites) {
    const fs::path p = out / (s.site_id + ".csv");
    dataset::write_site_csv(s, p);
    manifest.add_output(p);
  }
  manifest.write();
}

// --- train ---------------------------------------------------------------------------

struct TrainSetup {
  models::ModelConfig model;
  training::TrainConfig train;
  dataset::SplitSpec split;
};

inline TrainSetup train_setup(const KeyValueConfig& c, std::uint64_t seed) {
  TrainSetup s;
  s.model = training::model_config_from(c);
  s.train = training::train_config_from(c, seed);
  s.split = dataset::SplitSpec::from(c);
  s.model.validate_window(s.train.context_length);
  return s;
}

inline void run_train(const Invocation& inv, const fs::path& data_dir, const fs::path& out) {
  const TrainSetup setup = train_setup(inv.config, derive_seed(inv.seed, "train"));
  const LoadedData data = load_data(data_dir, inv.config);
  const auto splits = make_splits(data.sites, setup.train.context_length, setup.split, inv.config);
  const auto norm = dataset::fit_normalizer(data.sites, setup.split.train_years);
  io::ensure_directory(out);
  RunManifest manifest(inv, out);
  for (const auto& f : data.files) manifest.add_input(f);

  const fs::path log_path = out / "training_log.csv";
  io::LineLog log(log_path, "epoch,train_loss,val_loss");
  const auto result = training::train(setup.model, setup.train, data.sites, splits, norm, [&](const training::EpochLog& e) {
    log.append(std::to_string(e.epoch) + "," + dataset::format_number(e.train_loss) + "," +
               dataset::format_number(e.validation_loss));
  });
  const fs::path ckpt = out / "checkpoint.json";
  training::save_checkpoint(result.best, ckpt);
  manifest.add_output(ckpt);
  manifest.add_output(log_path);
  manifest.note("best_epoch", result.best.epoch);
  manifest.note("validation_loss", result.best.validation_loss);
  if (result.diverged) {
    manifest.set_status("diverged");
    manifest.note("divergence", result.divergence_message);
    manifest.write();
    throw NumericError("training diverged (" + result.divergence_message + "); kept the last finite checkpoint");
  }
  manifest.write();
}

// --- tune ----------------------------------------------------------------------------

inline void run_tune(const Invocation& inv, const fs::path& data_dir, const fs::path& out) {
  training::HyperbandConfig hb;
  hb.max_resource = inv.config.get_size("max_resource", hb.max_resource);
  hb.eta = inv.config.get_size("eta", hb.eta);
  hb.space = training::SearchSpace::from(inv.config);
  hb.validate();
  KeyValueConfig base = inv.config;
  const TrainSetup check = train_setup(base, 0);
  const LoadedData data = load_data(data_dir, inv.config);
  const auto splits = make_splits(data.sites, check.train.context_length, check.split, inv.config);
  const auto norm = dataset::fit_normalizer(data.sites, check.split.train_years);
  io::ensure_directory(out);
  RunManifest manifest(inv, out);
  for (const auto& f : data.files) manifest.add_input(f);

  auto setup_for = [&](const KeyValueConfig& overrides, std::size_t epochs, std::size_t trial) {
    KeyValueConfig c = base;
    c.merge(overrides);
    c.set("max_epochs", std::to_string(epochs));
    return train_setup(c, derive_seed(inv.seed, "tune", trial));
  };
  auto train_fn = [&](const KeyValueConfig& overrides, std::size_t epochs, std::size_t trial) {
    const TrainSetup s = setup_for(overrides, epochs, trial);
    if (s.train.context_length != check.train.context_length) throw ConfigError("context_length cannot be tuned");
    const auto r = training::train(s.model, s.train, data.sites, splits, norm);
    return r.diverged && r.log.empty() ? std::numeric_limits<double>::infinity() : r.best.validation_loss;
  };

  const fs::path log_path = out / "search_log.csv";
  io::LineLog log(log_path, "trial,bracket,round,epochs,val_loss,config");
  const auto result = training::hyperband(hb, train_fn, derive_seed(inv.seed, "tune"), inv.jobs,
                                          [&](const training::TrialRecord& t) {
                                            log.append(std::to_string(t.trial) + "," + std::to_string(t.bracket) + "," +
                                                       std::to_string(t.round) + "," + std::to_string(t.epochs) + "," +
                                                       dataset::format_number(t.loss) + "," + space_text(t.config));
                                          });
  if (!std::isfinite(result.best_loss)) throw NumericError("every HyperBand trial diverged");

  // Retrain the winner; training is deterministic, so this reproduces the
  // evaluated run.
  std::size_t best_epochs = 0;
  for (const auto& t : result.trials) {
    if (t.trial == result.best_trial && t.loss == result.best_loss) {
      best_epochs = t.epochs;
      break;
    }
  }
  const TrainSetup best = setup_for(result.best_config, best_epochs, result.best_trial);
  const auto r = training::train(best.model, best.train, data.sites, splits, norm);
  KeyValueConfig best_config;
  for (const auto& [k, v] : base.values()) {
    if (k.rfind("space.", 0) != 0) best_config.set(k, v);
  }
  best_config.merge(result.best_config);
  best_config.set("max_epochs", std::to_string(best_epochs));
  const fs::path cfg_path = out / "best_config.txt";
  io::write_file_atomic(cfg_path, best_config.to_text());
  const fs::path ckpt = out / "checkpoint.json";
  training::save_checkpoint(r.best, ckpt);
  manifest.add_output(log_path);
  manifest.add_output(cfg_path);
  manifest.add_output(ckpt);
  manifest.note("best_trial", result.best_trial);
  manifest.note("best_validation_loss", result.best_loss);
  manifest.note("trials", result.trials.size());
  manifest.write();
}

// --- eval / memory / importance --------------------------------------------------------

struct EvalInputs {
  training::Checkpoint checkpoint;
  LoadedData data;
  evaluation::EvalSet set;
  evaluation::Model model;
};

inline EvalInputs eval_inputs(const Invocation& inv, const fs::path& checkpoint, const fs::path& data_dir) {
  EvalInputs in;
  in.checkpoint = training::load_checkpoint(checkpoint);
  if (in.checkpoint.params.config.input_dim != dataset::kTokenWidth) {
    throw DataError("checkpoint expects " + std::to_string(in.checkpoint.params.config.input_dim) +
                    " features per day, the dataset has 28");
  }
  in.data = load_data(data_dir, inv.config);
  const std::size_t k = in.checkpoint.context_length();
  const dataset::SplitSpec spec = dataset::SplitSpec::from(inv.config);
  const auto splits = make_splits(in.data.sites, k, spec, inv.config);
  const std::string which = inv.config.get_string("eval_split", "test");
  const std::vector<dataset::WindowSample>* samples = nullptr;
  if (which == "test") samples = &splits.test;
  if (which == "validation") samples = &splits.validation;
  if (which == "train") samples = &splits.train;
  if (!samples) throw ConfigError("eval_split must be train, validation or test, got '" + which + "'");
  if (samples->empty()) throw DataError("the " + which + " split has no samples");
  const auto opt = eval_options(inv);
  in.set = evaluation::make_eval_set(in.data.sites, *samples, k, in.checkpoint.normalizer, opt.target);
  in.model = {in.checkpoint.params, in.checkpoint.scaling, k};
  return in;
}

inline void record_inputs(RunManifest& m, const fs::path& checkpoint, const EvalInputs& in) {
  m.add_input(checkpoint);
  for (const auto& f : in.data.files) m.add_input(f);
}

inline void run_eval(const Invocation& inv, const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out) {
  const EvalInputs in = eval_inputs(inv, checkpoint, data_dir);
  const auto opt = eval_options(inv);
  const auto report = evaluation::evaluate_report(in.model, in.set, opt);
  io::ensure_directory(out);
  RunManifest manifest(inv, out);
  record_inputs(manifest, checkpoint, in);
  const fs::path csv = out / "report.csv", json = out / "report.json";
  io::write_file_atomic(csv, evaluation::report_csv(report));
  io::write_file_atomic(json, evaluation::report_json(report).dump(2) + "\n");
  manifest.add_output(csv);
  manifest.add_output(json);
  manifest.write();
}

inline void run_memory(const Invocation& inv, const fs::path& checkpoint, const fs::path& data_dir,
                       const fs::path& out) {
  const EvalInputs in = eval_inputs(inv, checkpoint, data_dir);
  const auto opt = eval_options(inv);
  evaluation::MemoryOptions mo;
  const auto listed = inv.config.get_ints("taus", {});
  if (listed.empty()) {
    mo.taus = evaluation::tau_grid(in.model.context_length, inv.config.get_size("tau_stride", 10));
  } else {
    for (long long t : listed) {
      if (t < 0) throw ConfigError("taus must be non-negative");
      mo.taus.push_back(static_cast<std::size_t>(t));
    }
  }
  mo.repeats = inv.config.get_size("repeats", mo.repeats);
  mo.mode = evaluation::parse_permutation_mode(inv.config.get_string("permutation", "block"));
  mo.seed = derive_seed(inv.seed, "permutation.memory");
  const auto curves = evaluation::memory_retention_curves(in.model, in.set, mo, opt);
  io::ensure_directory(out);
  RunManifest manifest(inv, out);
  record_inputs(manifest, checkpoint, in);
  const fs::path csv = out / "memory.csv", json = out / "memory.json";
  io::write_file_atomic(csv, evaluation::memory_csv(curves));
  io::write_file_atomic(json, evaluation::memory_json(curves, mo, opt.normalizer).dump(2) + "\n");
  manifest.add_output(csv);
  manifest.add_output(json);
  manifest.write();
}

inline void run_importance(const Invocation& inv, const fs::path& checkpoint, const fs::path& data_dir,
                           const fs::path& out) {
  const EvalInputs in = eval_inputs(inv, checkpoint, data_dir);
  const auto opt = eval_options(inv);
  evaluation::ImportanceOptions io_opt;
  io_opt.repeats = inv.config.get_size("repeats", io_opt.repeats);
  io_opt.include_all = inv.config.get_bool("permute_all", false);
  const auto names = inv.config.get_strings("modalities", {});
  if (!names.empty()) {
    io_opt.slices.clear();
    for (const auto& n : names) io_opt.slices.push_back(dataset::modality(n));
  }
  io_opt.seed = derive_seed(inv.seed, "permutation.importance");
  const auto reports = evaluation::modality_importance(in.model, in.set, io_opt, opt);
  io::ensure_directory(out);
  RunManifest manifest(inv, out);
  record_inputs(manifest, checkpoint, in);
  const fs::path csv = out / "importance.csv", json = out / "importance.json";
  io::write_file_atomic(csv, evaluation::importance_csv(reports));
  io::write_file_atomic(json, evaluation::importance_json(reports, io_opt, opt.normalizer).dump(2) + "\n");
  manifest.add_output(csv);
  manifest.add_output(json);
  manifest.write();
}

// --- solar ---------------------------------------------------------------------------

inline void run_solar(const Invocation& inv, const fs::path& out) {
  if (!inv.config.has("latitude")) throw ConfigError("latitude is required");
  const solar::GeoLocation loc{inv.config.get_double("latitude", 0.0), inv.config.get_double("longitude", 0.0),
                               inv.config.get_double("elevation", 0.0)};
  loc.validate();
  const Date start = parse_date(inv.config.get_string("start", "2020-01-01"));
  const std::size_t days = inv.config.get_size("days", 365);
  if (days == 0) throw ConfigError("days must be >= 1");
  const auto values = solar::rso_series(loc, start, days);
  std::string text = "date,rso\n";
  for (std::size_t i = 0; i < days; ++i) {
    text += format_date(add_days(start, static_cast<long>(i))) + "," + dataset::format_number(values[i]) + "\n";
  }
  io::ensure_directory(out);
  RunManifest manifest(inv, out);
  const fs::path csv = out / "rso.csv";
  io::write_file_atomic(csv, text);
  manifest.add_output(csv);
  manifest.write();
}

}  // namespace gppcast::cli
