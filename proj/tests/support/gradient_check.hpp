#pragma once

// Whole-network gradient check: every parameter coordinate of a model's
// prediction is compared against a central difference.
//
// Coordinates are first checked with the two-point stencil in double. A
// coordinate whose gradient is so small that double rounding in f dominates
// the difference quotient is re-checked with the fourth-order central stencil
// evaluated in long double; the analytic value under test is always the
// double one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>

#include "gppcast/models.hpp"
#include "gppcast/random.hpp"

namespace gppcast::testing {

struct GradientCheckResult {
  double worst = 0.0;
  std::size_t coordinates = 0;
  std::size_t escalated = 0;
  std::string worst_name;
};

// Random window and parameters; gains and biases are moved off their
// initial 1/0 so every term of every op is exercised.
inline models::ModelParams random_model(const models::ModelConfig& config, std::uint64_t seed) {
  models::ModelParams params = models::init_params(config, seed);
  Rng rng(derive_seed(seed, "offsets"));
  for (auto& [name, a] : params.tensors) {
    if (name.ends_with(".gain") || name.ends_with(".bias")) {
      for (double& v : a.data()) v += rng.uniform(-0.5, 0.5);
    }
  }
  return params;
}

inline models::Array<double> random_window(std::size_t length, std::size_t width, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "window"));
  auto w = models::Array<double>::matrix(length, width);
  for (double& v : w.data()) v = rng.normal();
  return w;
}

inline GradientCheckResult check_model_gradients(const models::ModelConfig& config,
                                                 std::size_t length, std::uint64_t seed,
                                                 double tolerance = 1e-5) {
  using models::Network;
  const models::ModelParams params = random_model(config, seed);
  const auto window = random_window(length, config.input_dim, seed);
  const models::Array<double>* wp = &window;
  const std::span<const models::Array<double>* const> windows(&wp, 1);

  Network<double> net(config, 1, length, false);
  net.load(params.tensors);
  net.set_windows(windows);
  auto& g = net.graph();
  const auto out = net.output();
  g.forward(out);
  g.backward(out);

  std::unique_ptr<Network<long double>> wide;
  GradientCheckResult result;
  for (const auto& [name, id] : net.parameter_nodes()) {
    const models::Array<double> analytic = g.grad(id);
    models::Array<double> x = g.value(id);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double h = 1e-6;
      const double original = x[i];
      x[i] = original + h;
      g.set(id, x);
      g.forward(out);
      const double up = g.value(out).item();
      x[i] = original - h;
      g.set(id, x);
      g.forward(out);
      const double down = g.value(out).item();
      x[i] = original;
      g.set(id, x);
      const double a = analytic[i];
      const double denom = std::max(std::abs(a), 1e-12);
      double err = std::abs(a - (up - down) / (2 * h)) / denom;
      if (err >= tolerance) {
        if (!wide) {
          wide = std::make_unique<Network<long double>>(config, 1, length, false);
          wide->load(params.tensors);
          wide->set_windows(windows);
        }
        auto& gw = wide->graph();
        const auto wid = wide->parameter_nodes().at(name);
        auto xw = gw.value(wid);
        const long double base = xw[i];
        const long double hw = 1e-4L;
        auto at = [&](long double offset) {
          xw[i] = base + offset;
          gw.set(wid, xw);
          gw.forward(wide->output());
          return gw.value(wide->output()).item();
        };
        const long double numeric =
            (-at(2 * hw) + 8 * at(hw) - 8 * at(-hw) + at(-2 * hw)) / (12 * hw);
        xw[i] = base;
        gw.set(wid, xw);
        err = static_cast<double>(std::abs(static_cast<long double>(a) - numeric)) / denom;
        ++result.escalated;
      }
      ++result.coordinates;
      if (err > result.worst) {
        result.worst = err;
        result.worst_name = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace gppcast::testing
