#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gppcast/cli.hpp"

namespace {

using gppcast::KeyValueConfig;

// A subcommand option whose value lands in the merged config under `key`.
struct KeyFlag {
  std::string key;
  std::string value;
  CLI::Option* option = nullptr;
};

struct BoolFlag {
  std::string key;
  bool value = false;
  CLI::Option* option = nullptr;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GPP forecasting from multimodal remote sensing windows", "gppcast"};
  app.set_version_flag("--version", std::string(gppcast::cli::kVersion));
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::vector<std::string> config_files, overrides;
  auto* seed_opt = app.add_option("--seed", seed, "master seed; every random stream derives from it");
  app.add_option("--jobs", jobs, "worker threads for tuning and evaluation")->check(CLI::PositiveNumber);
  app.add_option("--config", config_files, "key = value config file (repeatable, later files win)");
  app.add_option("--set", overrides, "override a config key, as key=value (repeatable)");

  std::vector<std::unique_ptr<KeyFlag>> key_flags;
  std::vector<std::unique_ptr<BoolFlag>> bool_flags;
  auto key_flag = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    auto f = std::make_unique<KeyFlag>();
    f->key = key;
    f->option = sub->add_option(name, f->value, help);
    key_flags.push_back(std::move(f));
  };
  auto bool_flag = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    auto f = std::make_unique<BoolFlag>();
    f->key = key;
    f->option = sub->add_flag(name, f->value, help);
    bool_flags.push_back(std::move(f));
  };

  std::string out, data, checkpoint;
  auto add_out = [&](CLI::App* sub) { sub->add_option("--out", out, "run directory")->required(); };
  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", data, "directory of per-site CSV files")->required();
  };
  auto add_checkpoint = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", checkpoint, "checkpoint.json from train or tune")->required();
  };

  auto* synth = app.add_subcommand("synth", "write a synthetic multi-site dataset");
  add_out(synth);
  key_flag(synth, "--sites", "n_sites", "number of sites");
  key_flag(synth, "--years", "years", "years per site");
  key_flag(synth, "--start-year", "start_year", "first calendar year");

  auto* train = app.add_subcommand("train", "train one model and keep the best-validation checkpoint");
  add_data(train);
  add_out(train);
  key_flag(train, "--model", "model", "lstm or gpt2");
  key_flag(train, "--epochs", "max_epochs", "maximum epochs");
  key_flag(train, "--lr", "learning_rate", "Adam learning rate");
  key_flag(train, "--batch-size", "batch_size", "mini-batch size");

  auto* tune = app.add_subcommand("tune", "HyperBand search over the space.* config keys");
  add_data(tune);
  add_out(tune);
  key_flag(tune, "--model", "model", "lstm or gpt2");
  key_flag(tune, "--max-resource", "max_resource", "largest per-trial epoch budget R");
  key_flag(tune, "--eta", "eta", "halving rate");

  auto* eval = app.add_subcommand("eval", "NRMSE per site and condition");
  auto* memory = app.add_subcommand("memory", "memory-retention curves from block permutation");
  auto* importance = app.add_subcommand("importance", "permutation feature importance per modality");
  for (auto* sub : {eval, memory, importance}) {
    add_checkpoint(sub);
    add_data(sub);
    add_out(sub);
    key_flag(sub, "--split", "eval_split", "train, validation or test");
    key_flag(sub, "--normalizer", "nrmse_normalizer", "mean, range or sd");
    key_flag(sub, "--target", "eval_target", "raw or smoothed");
  }
  key_flag(memory, "--tau-stride", "tau_stride", "spacing of the tau grid");
  key_flag(memory, "--taus", "taus", "explicit comma-separated tau list");
  key_flag(memory, "--repeats", "repeats", "permutations per tau");
  key_flag(memory, "--mode", "permutation", "block or row");
  key_flag(importance, "--repeats", "repeats", "permutations per modality");
  key_flag(importance, "--modalities", "modalities", "comma-separated subset of S2,S1,LST,Rso");
  bool_flag(importance, "--all", "permute_all", "also permute every modality at once");

  auto* solar = app.add_subcommand("solar", "daily clear-sky shortwave radiation series");
  add_out(solar);
  key_flag(solar, "--lat", "latitude", "degrees north");
  key_flag(solar, "--lon", "longitude", "degrees east");
  key_flag(solar, "--elev", "elevation", "metres above sea level");
  key_flag(solar, "--start", "start", "first date, YYYY-MM-DD");
  key_flag(solar, "--days", "days", "number of days");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  gppcast::cli::Invocation inv;
  inv.command = app.get_subcommands().front()->get_name();
  for (int i = 1; i < argc; ++i) inv.arguments.emplace_back(argv[i]);
  inv.jobs = jobs;

  try {
    for (const auto& f : config_files) {
      inv.config.merge(KeyValueConfig::load(f));
      inv.config_files.emplace_back(f);
    }
    inv.config.apply_overrides(overrides);
    for (const auto& f : key_flags) {
      if (f->option->count() > 0) inv.config.set(f->key, f->value);
    }
    for (const auto& f : bool_flags) {
      if (f->option->count() > 0) inv.config.set(f->key, f->value ? "true" : "false");
    }
    inv.seed = seed_opt->count() > 0 ? seed : static_cast<std::uint64_t>(inv.config.get_int("seed", 0));
    inv.config.set("seed", std::to_string(inv.seed));

    const auto& cmd = inv.command;
    if (cmd == "synth") gppcast::cli::run_synth(inv, out);
    if (cmd == "train") gppcast::cli::run_train(inv, data, out);
    if (cmd == "tune") gppcast::cli::run_tune(inv, data, out);
    if (cmd == "eval") gppcast::cli::run_eval(inv, checkpoint, data, out);
    if (cmd == "memory") gppcast::cli::run_memory(inv, checkpoint, data, out);
    if (cmd == "importance") gppcast::cli::run_importance(inv, checkpoint, data, out);
    if (cmd == "solar") gppcast::cli::run_solar(inv, out);
  } catch (const gppcast::Error& e) {
    std::cerr << "gppcast " << inv.command << ": " << e.what() << "\n";
    return gppcast::exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "gppcast " << inv.command << ": internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
