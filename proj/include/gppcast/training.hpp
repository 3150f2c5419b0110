#pragma once

// Training: smoothed-target MAE objective, Adam, the epoch loop with
// best-validation checkpointing, checkpoint files and HyperBand search.

#include <algorithm>
#include <atomic>
#include <exception>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "gppcast/config.hpp"
#include "gppcast/dataset.hpp"
#include "gppcast/errors.hpp"
#include "gppcast/io.hpp"
#include "gppcast/models.hpp"
#include "gppcast/random.hpp"

namespace gppcast::training {

using grad::Array;
using models::ModelConfig;
using models::ModelParams;
using models::ParamMap;

// --- loss ----------------------------------------------------------------------------

inline double smoothed_mae_loss(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size()) throw ShapeError("loss: prediction and target lengths differ");
  if (predictions.empty()) throw DataError("loss of an empty batch");
  double s = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) s += std::abs(predictions[i] - targets[i]);
  return s / static_cast<double>(predictions.size());
}

// d loss / d prediction_i = sign(prediction_i - target_i) / n, 0 at ties.
inline std::vector<double> smoothed_mae_gradient(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size()) throw ShapeError("loss: prediction and target lengths differ");
  if (predictions.empty()) throw DataError("loss of an empty batch");
  const double n = static_cast<double>(predictions.size());
  std::vector<double> g(predictions.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double d = predictions[i] - targets[i];
    g[i] = d > 0 ? 1.0 / n : (d < 0 ? -1.0 / n : 0.0);
  }
  return g;
}

// --- optimizer -----------------------------------------------------------------------

class Adam {
 public:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEpsilon = 1e-8;

  // One bias-corrected Adam update of every tensor in `params`.
  void step(ParamMap& params, const ParamMap& grads, double learning_rate) {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    for (const auto& [name, g] : grads) {
      for (double v : g.data()) {
        if (!std::isfinite(v)) throw NumericError("non-finite gradient in '" + name + "'");
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) throw ShapeError("no gradient for '" + name + "'");
      const Array<double>& g = git->second;
      if (g.shape() != p.shape()) throw ShapeError("gradient shape mismatch for '" + name + "'");
      auto [mit, fresh] = m_.try_emplace(name, p.shape());
      Array<double>& m = mit->second;
      Array<double>& v = v_.try_emplace(name, p.shape()).first->second;
      (void)fresh;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1 - kBeta1) * g[i];
        v[i] = kBeta2 * v[i] + (1 - kBeta2) * g[i] * g[i];
        p[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEpsilon);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  std::size_t t_ = 0;
  std::map<std::string, Array<double>> m_, v_;
};

// Rescales all gradients together so their global L2 norm is at most max_norm.
inline void clip_gradients(ParamMap& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0;
  for (const auto& [name, g] : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double f = max_norm / norm;
  for (auto& [name, g] : grads) {
    for (double& v : g.data()) v *= f;
  }
}

// --- configuration --------------------------------------------------------------------

enum class ValidationTarget { kRaw, kSmoothed };

struct TrainConfig {
  std::size_t max_epochs = 300;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double max_grad_norm = 0.0;  // 0 disables clipping
  std::size_t context_length = dataset::kContextLength;
  ValidationTarget validation_target = ValidationTarget::kRaw;

  void validate() const {
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (!(max_grad_norm >= 0.0)) throw ConfigError("max_grad_norm must be >= 0");
    if (context_length < 1) throw ConfigError("context_length must be >= 1");
  }
};

inline std::string_view to_string(ValidationTarget t) { return t == ValidationTarget::kRaw ? "raw" : "smoothed"; }

inline ValidationTarget parse_validation_target(const std::string& s) {
  if (s == "raw") return ValidationTarget::kRaw;
  if (s == "smoothed") return ValidationTarget::kSmoothed;
  throw ConfigError("validation_target must be raw or smoothed, got '" + s + "'");
}

// Reads model_* and training keys; `kind` may be overridden by the caller.
inline ModelConfig model_config_from(const KeyValueConfig& c) {
  ModelConfig m;
  m.kind = models::parse_model_kind(c.get_string("model", "lstm"));
  m.input_dim = dataset::kTokenWidth;
  m.dropout = c.get_double("dropout", 0.3);
  m.lstm.hidden_size = c.get_size("hidden_size", m.lstm.hidden_size);
  m.lstm.num_layers = c.get_size("num_layers", m.lstm.num_layers);
  m.transformer.model_dim = c.get_size("model_dim", m.transformer.model_dim);
  m.transformer.ff_dim = c.get_size("ff_dim", m.transformer.ff_dim);
  m.transformer.num_heads = c.get_size("num_heads", m.transformer.num_heads);
  m.transformer.num_layers = c.get_size("num_layers", m.transformer.num_layers);
  m.transformer.max_positions = c.get_size("max_positions", c.get_size("context_length", dataset::kContextLength));
  m.validate();
  return m;
}

inline TrainConfig train_config_from(const KeyValueConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.max_epochs = c.get_size("max_epochs", t.max_epochs);
  t.batch_size = c.get_size("batch_size", t.batch_size);
  t.learning_rate = c.get_double("learning_rate", t.learning_rate);
  t.max_grad_norm = c.get_double("max_grad_norm", t.max_grad_norm);
  t.context_length = c.get_size("context_length", t.context_length);
  t.validation_target = parse_validation_target(c.get_string("validation_target", "raw"));
  t.seed = seed;
  t.validate();
  return t;
}

// --- checkpoints ----------------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct Checkpoint {
  ModelParams params;
  models::OutputScaling scaling;
  dataset::Normalizer normalizer;
  TrainConfig train;
  std::size_t epoch = 0;
  double validation_loss = 0.0;

  std::size_t context_length() const { return train.context_length; }
};

inline nlohmann::ordered_json model_config_json(const ModelConfig& m) {
  nlohmann::ordered_json j;
  j["kind"] = std::string(models::to_string(m.kind));
  j["input_dim"] = m.input_dim;
  j["dropout"] = m.dropout;
  if (m.kind == models::ModelKind::kLstm) {
    j["hidden_size"] = m.lstm.hidden_size;
    j["num_layers"] = m.lstm.num_layers;
  } else {
    j["model_dim"] = m.transformer.model_dim;
    j["ff_dim"] = m.transformer.ff_dim;
    j["num_heads"] = m.transformer.num_heads;
    j["num_layers"] = m.transformer.num_layers;
    j["max_positions"] = m.transformer.max_positions;
  }
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.kind = models::parse_model_kind(j.at("kind").get<std::string>());
  m.input_dim = j.at("input_dim").get<std::size_t>();
  m.dropout = j.at("dropout").get<double>();
  if (m.kind == models::ModelKind::kLstm) {
    m.lstm.hidden_size = j.at("hidden_size").get<std::size_t>();
    m.lstm.num_layers = j.at("num_layers").get<std::size_t>();
  } else {
    m.transformer.model_dim = j.at("model_dim").get<std::size_t>();
    m.transformer.ff_dim = j.at("ff_dim").get<std::size_t>();
    m.transformer.num_heads = j.at("num_heads").get<std::size_t>();
    m.transformer.num_layers = j.at("num_layers").get<std::size_t>();
    m.transformer.max_positions = j.at("max_positions").get<std::size_t>();
  }
  m.validate();
  return m;
}

inline std::string checkpoint_to_json(const Checkpoint& c) {
  nlohmann::ordered_json j;
  j["format"] = "gppcast-checkpoint";
  j["version"] = 1;
  j["model"] = model_config_json(c.params.config);
  j["context_length"] = c.train.context_length;
  j["epoch"] = c.epoch;
  j["validation_loss"] = c.validation_loss;
  j["validation_target"] = std::string(to_string(c.train.validation_target));
  j["training"] = {{"max_epochs", c.train.max_epochs},
                   {"batch_size", c.train.batch_size},
                   {"learning_rate", c.train.learning_rate},
                   {"max_grad_norm", c.train.max_grad_norm},
                   {"seed", c.train.seed}};
  j["output_scaling"] = {{"shift", c.scaling.shift}, {"scale", c.scaling.scale}};
  j["normalizer"] = {{"mean", c.normalizer.mean}, {"scale", c.normalizer.scale}};
  nlohmann::ordered_json params = nlohmann::ordered_json::object();
  for (const auto& [name, a] : c.params.tensors) {
    params[name] = {{"shape", a.shape()}, {"data", std::vector<double>(a.data().begin(), a.data().end())}};
  }
  j["parameters"] = std::move(params);
  return j.dump(1) + "\n";
}

inline Checkpoint checkpoint_from_json(const std::string& text, const std::string& origin = "<checkpoint>") {
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != "gppcast-checkpoint") throw DataError(origin + ": not a checkpoint");
    if (j.at("version").get<int>() != 1) throw DataError(origin + ": unsupported checkpoint version");
    Checkpoint c;
    c.params.config = model_config_from_json(j.at("model"));
    c.train.context_length = j.at("context_length").get<std::size_t>();
    c.epoch = j.at("epoch").get<std::size_t>();
    c.validation_loss = j.at("validation_loss").get<double>();
    c.train.validation_target = parse_validation_target(j.at("validation_target").get<std::string>());
    const auto& t = j.at("training");
    c.train.max_epochs = t.at("max_epochs").get<std::size_t>();
    c.train.batch_size = t.at("batch_size").get<std::size_t>();
    c.train.learning_rate = t.at("learning_rate").get<double>();
    c.train.max_grad_norm = t.at("max_grad_norm").get<double>();
    c.train.seed = t.at("seed").get<std::uint64_t>();
    c.scaling.shift = j.at("output_scaling").at("shift").get<double>();
    c.scaling.scale = j.at("output_scaling").at("scale").get<double>();
    c.normalizer.mean = j.at("normalizer").at("mean").get<std::vector<double>>();
    c.normalizer.scale = j.at("normalizer").at("scale").get<std::vector<double>>();
    if (c.normalizer.mean.size() != dataset::kTokenWidth || c.normalizer.scale.size() != dataset::kTokenWidth) {
      throw DataError(origin + ": normalizer width is not 28");
    }
    for (const auto& [name, p] : j.at("parameters").items()) {
      const auto shape = p.at("shape").get<std::vector<std::size_t>>();
      c.params.tensors.emplace(name, Array<double>(shape, p.at("data").get<std::vector<double>>()));
    }
    models::validate_params(c.params);
    if (!std::isfinite(c.validation_loss)) throw DataError(origin + ": validation loss is not finite");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed checkpoint (" + e.what() + ")");
  } catch (const ShapeError& e) {
    throw DataError(origin + ": " + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  io::write_file_atomic(path, checkpoint_to_json(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(io::read_file(path), path.string());
}

inline models::Predictor make_predictor(const Checkpoint& c, std::size_t batch_size = 64) {
  return models::Predictor(c.params, c.scaling, c.context_length(), batch_size);
}

// --- training loop --------------------------------------------------------------------

// Standardized contexts for a list of samples.
inline std::vector<Array<double>> contexts(const std::vector<dataset::SiteSeries>& sites,
                                           std::span<const dataset::WindowSample> samples, std::size_t k,
                                           const dataset::Normalizer& norm) {
  std::vector<Array<double>> out;
  out.reserve(samples.size());
  for (const auto& w : samples) out.push_back(dataset::context(sites, w, k, &norm));
  return out;
}

inline double mean_absolute_error(std::span<const double> predictions, std::span<const double> targets) {
  return smoothed_mae_loss(predictions, targets);
}

inline std::vector<double> targets_of(std::span<const dataset::WindowSample> samples, ValidationTarget t) {
  std::vector<double> out;
  out.reserve(samples.size());
  for (const auto& w : samples) out.push_back(t == ValidationTarget::kRaw ? w.target : w.target_smoothed);
  return out;
}

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> log;
  bool diverged = false;
  std::string divergence_message;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline models::OutputScaling target_scaling(std::span<const dataset::WindowSample> train) {
  std::vector<double> t;
  for (const auto& w : train) t.push_back(w.target_smoothed);
  const double m = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
  double ss = 0;
  for (double v : t) ss += (v - m) * (v - m);
  const double sd = t.size() > 1 ? std::sqrt(ss / static_cast<double>(t.size() - 1)) : 0.0;
  return {m, sd > 1e-12 ? sd : 1.0};
}

inline double validation_loss(const Checkpoint& c, const std::vector<Array<double>>& windows,
                              const std::vector<double>& targets) {
  models::Predictor p = make_predictor(c);
  return mean_absolute_error(p.predict(windows), targets);
}

// Trains on smoothed targets; after each epoch scores the validation set and
// keeps the parameters with the lowest validation loss (first epoch wins ties).
// Deterministic given the seed: initialization, batch order and dropout each
// draw from their own named stream.
inline TrainResult train(const ModelConfig& model_config, const TrainConfig& cfg,
                         const std::vector<dataset::SiteSeries>& sites, const dataset::Splits& data,
                         const dataset::Normalizer& norm, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  model_config.validate_window(cfg.context_length);
  if (data.train.empty()) throw DataError("training set is empty");
  if (data.validation.empty()) throw DataError("validation set is empty");
  const std::size_t k = cfg.context_length;

  const std::vector<Array<double>> train_x = contexts(sites, data.train, k, norm);
  const std::vector<double> train_y = targets_of(data.train, ValidationTarget::kSmoothed);
  const std::vector<Array<double>> val_x = contexts(sites, data.validation, k, norm);
  const std::vector<double> val_y = targets_of(data.validation, cfg.validation_target);

  Checkpoint current;
  current.params = models::init_params(model_config, derive_seed(cfg.seed, "init"));
  current.scaling = target_scaling(data.train);
  current.normalizer = norm;
  current.train = cfg;

  TrainResult result;
  result.best = current;
  result.best.validation_loss = validation_loss(current, val_x, val_y);

  std::map<std::size_t, std::unique_ptr<models::Network<double>>> nets;
  auto network = [&](std::size_t batch) -> models::Network<double>& {
    auto it = nets.find(batch);
    if (it == nets.end()) {
      auto net = std::make_unique<models::Network<double>>(model_config, batch, k, true);
      net->set_output_scaling(current.scaling.shift, current.scaling.scale);
      it = nets.emplace(batch, std::move(net)).first;
    }
    return *it->second;
  };

  Adam adam;
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  bool have_best = false;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng order_rng(derive_seed(cfg.seed, "batches", epoch));
    const std::vector<std::size_t> order = order_rng.permutation(train_x.size());
    double loss_sum = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t n = std::min(cfg.batch_size, order.size() - start);
        std::vector<const Array<double>*> xs(n);
        std::vector<double> ys(n);
        for (std::size_t b = 0; b < n; ++b) {
          xs[b] = &train_x[order[start + b]];
          ys[b] = train_y[order[start + b]];
        }
        models::Network<double>& net = network(n);
        net.load(current.params.tensors);
        net.set_windows(xs);
        net.set_targets(ys);
        net.draw_dropout(dropout_rng);
        const double loss = net.forward_loss();
        if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
        net.backward();
        ParamMap grads;
        for (const auto& [name, value] : current.params.tensors) grads.emplace(name, net.gradient(name));
        clip_gradients(grads, cfg.max_grad_norm);
        adam.step(current.params.tensors, grads, cfg.learning_rate);
        loss_sum += loss * static_cast<double>(n);
      }
    } catch (const NumericError& e) {
      result.diverged = true;
      result.divergence_message = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    EpochLog entry{epoch, loss_sum / static_cast<double>(train_x.size()), 0.0};
    entry.validation_loss = validation_loss(current, val_x, val_y);
    if (!std::isfinite(entry.validation_loss)) {
      result.diverged = true;
      result.divergence_message = "epoch " + std::to_string(epoch) + ": non-finite validation loss";
      break;
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (!have_best || entry.validation_loss < result.best.validation_loss) {
      result.best = current;
      result.best.epoch = epoch;
      result.best.validation_loss = entry.validation_loss;
      have_best = true;
    }
  }
  return result;
}

// --- HyperBand ------------------------------------------------------------------------

struct SearchSpace {
  std::map<std::string, std::vector<std::string>> choices;  // key -> candidate values

  void validate() const {
    if (choices.empty()) throw ConfigError("search space is empty");
    for (const auto& [k, v] : choices) {
      if (v.empty()) throw ConfigError("search space key '" + k + "' has no values");
    }
  }

  std::size_t size() const {
    std::size_t n = 1;
    for (const auto& [k, v] : choices) n *= v.size();
    return n;
  }

  // Keys prefixed with "space." list comma-separated candidates.
  static SearchSpace from(const KeyValueConfig& c) {
    SearchSpace s;
    for (const auto& [key, value] : c.values()) {
      if (key.rfind("space.", 0) == 0) s.choices[key.substr(6)] = c.get_strings(key, {});
    }
    return s;
  }

  KeyValueConfig sample(Rng& rng) const {
    KeyValueConfig c;
    for (const auto& [k, v] : choices) c.set(k, v[rng.below(v.size())]);
    return c;
  }
};

struct HyperbandConfig {
  std::size_t max_resource = 27;  // R, in epochs
  std::size_t eta = 3;
  SearchSpace space;

  void validate() const {
    if (eta < 2) throw ConfigError("eta must be >= 2");
    if (max_resource < eta) throw ConfigError("max_resource must be >= eta");
    space.validate();
  }
};

struct RoundPlan {
  std::size_t bracket = 0;  // s
  std::size_t round = 0;    // i
  std::size_t n = 0;        // configurations evaluated
  std::size_t r = 0;        // epochs each
};

inline std::size_t int_pow(std::size_t b, std::size_t e) {
  std::size_t out = 1;
  while (e--) out *= b;
  return out;
}

// s_max = floor(log_eta R), computed exactly in integers.
inline std::size_t hyperband_s_max(std::size_t R, std::size_t eta) {
  std::size_t s = 0;
  while (int_pow(eta, s + 1) <= R) ++s;
  return s;
}

// The successive-halving schedule of every bracket s = s_max ... 0:
// n = ceil((s_max+1)/(s+1) * eta^s), r = R * eta^-s, and in round i
// n_i = floor(n * eta^-i) configurations run for r_i = r * eta^i epochs.
// Non-integer r_i (R not a power of eta) are floored, with at least 1 epoch.
inline std::vector<RoundPlan> hyperband_schedule(std::size_t R, std::size_t eta) {
  if (eta < 2 || R < eta) throw ConfigError("HyperBand needs eta >= 2 and R >= eta");
  const std::size_t s_max = hyperband_s_max(R, eta);
  std::vector<RoundPlan> plan;
  for (std::size_t s = s_max + 1; s-- > 0;) {
    const std::size_t num = (s_max + 1) * int_pow(eta, s);
    const std::size_t n = (num + s) / (s + 1);  // ceil(num / (s + 1))
    for (std::size_t i = 0; i <= s; ++i) {
      const std::size_t n_i = n / int_pow(eta, i);
      const double r_i = static_cast<double>(R) * static_cast<double>(int_pow(eta, i)) /
                         static_cast<double>(int_pow(eta, s));
      plan.push_back({s, i, n_i, std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(r_i + 1e-9)))});
    }
  }
  return plan;
}

struct TrialRecord {
  std::size_t trial = 0;  // index of the sampled configuration
  std::size_t bracket = 0, round = 0, epochs = 0;
  double loss = 0.0;
  KeyValueConfig config;
};

struct HyperbandResult {
  std::size_t best_trial = 0;
  KeyValueConfig best_config;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<TrialRecord> trials;
};

// train_fn(config, epochs, trial) returns a validation loss; non-finite
// losses rank last. `jobs` evaluations of a round may run concurrently;
// results do not depend on it.
using TrialFn = std::function<double(const KeyValueConfig&, std::size_t epochs, std::size_t trial)>;
using TrialCallback = std::function<void(const TrialRecord&)>;

inline HyperbandResult hyperband(const HyperbandConfig& cfg, const TrialFn& train_fn, std::uint64_t seed,
                                 std::size_t jobs = 1, const TrialCallback& on_trial = {}) {
  cfg.validate();
  const auto plan = hyperband_schedule(cfg.max_resource, cfg.eta);
  Rng rng(derive_seed(seed, "hyperband"));
  HyperbandResult result;
  std::size_t next_trial = 0;

  std::vector<std::size_t> alive;         // trial ids in the current bracket
  std::map<std::size_t, KeyValueConfig> configs;
  for (const RoundPlan& round : plan) {
    if (round.round == 0) {
      alive.clear();
      for (std::size_t j = 0; j < round.n; ++j) {
        configs.emplace(next_trial, cfg.space.sample(rng));
        alive.push_back(next_trial++);
      }
    }
    std::vector<double> losses(alive.size(), 0.0);
    std::vector<std::exception_ptr> errors(alive.size());
    auto run = [&](std::size_t idx) {
      try {
        losses[idx] = train_fn(configs.at(alive[idx]), round.r, alive[idx]);
      } catch (...) {
        errors[idx] = std::current_exception();
      }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, alive.size()));
    if (workers == 1) {
      for (std::size_t idx = 0; idx < alive.size(); ++idx) run(idx);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
          for (std::size_t idx = next++; idx < alive.size(); idx = next++) run(idx);
        });
      }
      for (auto& t : pool) t.join();
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (std::size_t idx = 0; idx < alive.size(); ++idx) {
      const double loss = std::isfinite(losses[idx]) ? losses[idx] : std::numeric_limits<double>::infinity();
      TrialRecord rec{alive[idx], round.bracket, round.round, round.r, loss, configs.at(alive[idx])};
      result.trials.push_back(rec);
      if (on_trial) on_trial(rec);
      if (loss < result.best_loss || (result.trials.size() == 1)) {
        result.best_loss = loss;
        result.best_trial = alive[idx];
        result.best_config = configs.at(alive[idx]);
      }
    }
    // Keep the best floor(n_i / eta); ties go to the earlier trial.
    std::vector<std::size_t> rank(alive.size());
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
      const double la = std::isfinite(losses[a]) ? losses[a] : std::numeric_limits<double>::infinity();
      const double lb = std::isfinite(losses[b]) ? losses[b] : std::numeric_limits<double>::infinity();
      return la < lb;
    });
    const std::size_t keep = round.n / cfg.eta;
    std::vector<std::size_t> survivors;
    for (std::size_t j = 0; j < std::min(keep, rank.size()); ++j) survivors.push_back(alive[rank[j]]);
    alive = survivors;
  }
  return result;
}

}  // namespace gppcast::training
