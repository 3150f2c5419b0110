#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "gppcast/models.hpp"
#include "support/gradient_check.hpp"

namespace gppcast::models {
namespace {

using A = Array<double>;

A random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  A a = A::matrix(r, c);
  for (double& v : a.data()) v = rng.uniform(-scale, scale);
  return a;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double gelu(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

std::vector<double> layer_norm(const std::vector<double>& x, const A& gain, const A& bias) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= x.size();
  for (double v : x) var += (v - mu) * (v - mu);
  var /= x.size();
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j)
    out[j] = (x[j] - mu) / std::sqrt(var + 1e-5) * gain[j] + bias[j];
  return out;
}

// y = x W (+ b), with W given as a row-major in x out matrix.
std::vector<double> affine(const std::vector<double>& x, const A& w, const A* b = nullptr,
                           std::size_t col0 = 0, std::size_t ncols = 0) {
  if (ncols == 0) ncols = w.cols();
  std::vector<double> y(ncols, 0.0);
  for (std::size_t c = 0; c < ncols; ++c) {
    double acc = b ? (*b)[c] : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * w(i, col0 + c);
    y[c] = acc;
  }
  return y;
}

double predict(const ModelParams& params, const A& window, OutputScaling scaling = {}) {
  Predictor p(params, scaling, window.rows());
  return p.predict_one(window);
}

ModelConfig lstm_config(std::size_t hidden, std::size_t layers) {
  ModelConfig c;
  c.kind = ModelKind::kLstm;
  c.lstm = {hidden, layers};
  return c;
}

ModelConfig transformer_config(std::size_t dim, std::size_t ff, std::size_t heads,
                               std::size_t layers, std::size_t positions) {
  ModelConfig c;
  c.kind = ModelKind::kTransformer;
  c.transformer = {dim, ff, heads, layers, positions};
  return c;
}

// --- LSTM cell ---------------------------------------------------------------

TEST(LstmCell, MatchesScalarLoop) {
  Rng rng(21);
  const std::size_t n = 28, hidden = 6;
  for (int trial = 0; trial < 20; ++trial) {
    const A x = random_matrix(rng, 1, n, 2.0), h = random_matrix(rng, 1, hidden),
            c = random_matrix(rng, 1, hidden, 2.0), w_ih = random_matrix(rng, n, 4 * hidden),
            w_hh = random_matrix(rng, hidden, 4 * hidden), b = random_matrix(rng, 1, 4 * hidden);
    const auto [h2, c2] = lstm_cell_step(x, h, c, w_ih, w_hh, b);
    for (std::size_t j = 0; j < hidden; ++j) {
      double z[4];
      for (int gate = 0; gate < 4; ++gate) {
        const std::size_t col = gate * hidden + j;
        double acc = b[col];
        for (std::size_t i = 0; i < n; ++i) acc += x[i] * w_ih(i, col);
        for (std::size_t i = 0; i < hidden; ++i) acc += h[i] * w_hh(i, col);
        z[gate] = acc;
      }
      const double c_ref = sigmoid(z[1]) * c[j] + sigmoid(z[0]) * std::tanh(z[2]);
      const double h_ref = sigmoid(z[3]) * std::tanh(c_ref);
      EXPECT_NEAR(c2[j], c_ref, 1e-12);
      EXPECT_NEAR(h2[j], h_ref, 1e-12);
    }
  }
}

TEST(LstmCell, ZeroParametersGiveZeroState) {
  Rng rng(2);
  const std::size_t hidden = 4;
  const auto [h, c] = lstm_cell_step(random_matrix(rng, 1, 28, 5.0), A::matrix(1, hidden),
                                     A::matrix(1, hidden), A::matrix(28, 4 * hidden),
                                     A::matrix(hidden, 4 * hidden), A::matrix(1, 4 * hidden));
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(LstmCell, SaturatedGatesKeepCell) {
  Rng rng(3);
  const std::size_t hidden = 5;
  A bias = A::matrix(1, 4 * hidden);
  for (std::size_t j = 0; j < hidden; ++j) {
    bias[j] = -1000.0;          // input gate -> 0
    bias[hidden + j] = 1000.0;  // forget gate -> 1
  }
  const A c = random_matrix(rng, 1, hidden, 3.0);
  const auto [h2, c2] = lstm_cell_step(random_matrix(rng, 1, 28), random_matrix(rng, 1, hidden), c,
                                       random_matrix(rng, 28, 4 * hidden, 0.1),
                                       random_matrix(rng, hidden, 4 * hidden, 0.1), bias);
  EXPECT_EQ(c2, c);
}

TEST(LstmCell, HiddenStateIsBounded) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto [h, c] = lstm_cell_step(random_matrix(rng, 3, 28, 10.0), random_matrix(rng, 3, 7),
                                       random_matrix(rng, 3, 7, 50.0), random_matrix(rng, 28, 28, 10.0),
                                       random_matrix(rng, 7, 28, 10.0), random_matrix(rng, 1, 28, 10.0));
    for (double v : h.data()) EXPECT_LE(std::abs(v), 1.0);
    EXPECT_TRUE(c.all_finite());
  }
}

TEST(LstmCell, RejectsMismatchedShapes) {
  EXPECT_THROW(lstm_cell_step(A::matrix(1, 28), A::matrix(1, 4), A::matrix(1, 4), A::matrix(27, 16),
                              A::matrix(4, 16), A::matrix(1, 16)),
               ShapeError);
}

// --- LSTM network ------------------------------------------------------------

TEST(LstmForward, ZeroWindowZeroParams) {
  ModelParams params = init_params(lstm_config(8, 2), 1);
  for (auto& [name, a] : params.tensors) a.fill(0.0);
  EXPECT_EQ(predict(params, A::matrix(120, 28)), 0.0);
}

TEST(LstmForward, EqualsUnrolledCellsAndHead) {
  const ModelConfig config = lstm_config(6, 2);
  const ModelParams params = testing::random_model(config, 7);
  const A window = testing::random_window(30, 28, 7);
  const auto& t = params.tensors;
  std::vector<A> inputs;
  for (std::size_t s = 0; s < window.rows(); ++s) {
    A row = A::matrix(1, 28);
    for (std::size_t j = 0; j < 28; ++j) row[j] = window(s, j);
    inputs.push_back(row);
  }
  A h = A::matrix(1, 6);
  for (std::size_t l = 0; l < 2; ++l) {
    h = A::matrix(1, 6);
    A c = A::matrix(1, 6);
    for (A& x : inputs) {
      std::tie(h, c) = lstm_cell_step(x, h, c, t.at(lstm_name(l, "w_ih")), t.at(lstm_name(l, "w_hh")),
                                      t.at(lstm_name(l, "bias")));
      x = h;
    }
  }
  double expected = t.at("head.bias")[0];
  for (std::size_t j = 0; j < 6; ++j) expected += h[j] * t.at("head.weight")[j];
  EXPECT_NEAR(predict(params, window), expected, 1e-12);
}

TEST(LstmForward, OldestDaysInfluenceOutput) {
  const ModelConfig config = lstm_config(8, 1);
  ModelParams params = testing::random_model(config, 9);
  // Forget gates near 1; at ~0.5 the first days fade below double resolution.
  for (std::size_t j = 8; j < 16; ++j) params.tensors.at("lstm.0.bias")[j] = 3.0;
  A window = testing::random_window(120, 28, 9);
  const double before = predict(params, window);
  // Reverse the order of days t-119 .. t-110.
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 28; ++j) std::swap(window(i, j), window(9 - i, j));
  EXPECT_NE(predict(params, window), before);
}

// --- attention ---------------------------------------------------------------

TEST(Attention, IdenticalKeysAverageValues) {
  Rng rng(11);
  const A q = random_matrix(rng, 4, 3);
  A k = A::matrix(4, 3);
  const A key = random_matrix(rng, 1, 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) k(i, j) = key[j];
  const A v = random_matrix(rng, 4, 5);
  const A out = attention(q, k, v, false);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      const double mean = (v(0, j) + v(1, j) + v(2, j) + v(3, j)) / 4.0;
      EXPECT_NEAR(out(i, j), mean, 1e-15);
    }
}

TEST(Attention, SinglePositionReturnsValue) {
  Rng rng(12);
  const A v = random_matrix(rng, 1, 4);
  EXPECT_EQ(attention(random_matrix(rng, 1, 3), random_matrix(rng, 1, 3), v, true), v);
}

TEST(Attention, WeightsAreCausalDistributions) {
  Rng rng(13);
  const std::size_t n = 9;
  // With V = I the output rows are the attention weights themselves.
  const A w = attention(random_matrix(rng, n, 4, 3.0), random_matrix(rng, n, 4, 3.0), A::identity(n), true);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j > i) {
        EXPECT_EQ(w(i, j), 0.0);
      }
      EXPECT_GE(w(i, j), 0.0);
      total += w(i, j);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Attention, FutureValuesDoNotLeak) {
  Rng rng(14);
  const A q = random_matrix(rng, 6, 4), k = random_matrix(rng, 6, 4);
  A v = random_matrix(rng, 6, 3);
  const A before = attention(q, k, v, true);
  for (std::size_t t = 0; t + 1 < 6; ++t) {
    A changed = v;
    for (std::size_t j = 0; j < 3; ++j) changed(t + 1, j) += 10.0;
    const A after = attention(q, k, changed, true);
    for (std::size_t i = 0; i <= t; ++i)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(after(i, j), before(i, j));
  }
}

TEST(Attention, RejectsMismatchedShapes) {
  EXPECT_THROW(attention(A::matrix(3, 4), A::matrix(3, 5), A::matrix(3, 2), false), ShapeError);
}

// --- transformer -------------------------------------------------------------

TEST(TransformerForward, ResidualPathOnly) {
  const ModelConfig config = transformer_config(8, 16, 2, 1, 10);
  ModelParams params = testing::random_model(config, 15);
  for (const char* name : {"attn.qkv.weight", "attn.q.bias", "attn.v.bias", "attn.proj.weight",
                           "attn.proj.bias", "ffn.fc.weight", "ffn.fc.bias", "ffn.proj.weight",
                           "ffn.proj.bias"}) {
    params.tensors.at(block_name(0, name)).fill(0.0);
  }
  const A window = testing::random_window(10, 28, 15);
  const auto& t = params.tensors;
  std::vector<double> last(28);
  for (std::size_t j = 0; j < 28; ++j) last[j] = window(9, j);
  std::vector<double> e = affine(last, t.at("embed.weight"), &t.at("embed.bias"));
  for (std::size_t j = 0; j < 8; ++j) e[j] += t.at("pos")(9, j);
  const auto z = layer_norm(e, t.at("final_ln.gain"), t.at("final_ln.bias"));
  const double expected = affine(z, t.at("head.weight"), &t.at("head.bias"))[0];
  EXPECT_NEAR(predict(params, window), expected, 1e-12);
}

TEST(TransformerForward, MatchesHandComposedBlock) {
  const std::size_t d = 8, ff = 12, len = 15;
  const ModelConfig config = transformer_config(d, ff, 1, 1, 20);
  const ModelParams params = testing::random_model(config, 16);
  const A window = testing::random_window(len, 28, 16);
  const auto& t = params.tensors;
  auto b = [&](const char* name) -> const A& { return t.at(block_name(0, name)); };

  std::vector<std::vector<double>> e(len), q(len), k(len), v(len);
  for (std::size_t s = 0; s < len; ++s) {
    std::vector<double> x(28);
    for (std::size_t j = 0; j < 28; ++j) x[j] = window(s, j);
    e[s] = affine(x, t.at("embed.weight"), &t.at("embed.bias"));
    for (std::size_t j = 0; j < d; ++j) e[s][j] += t.at("pos")(s, j);
    const auto a = layer_norm(e[s], b("ln1.gain"), b("ln1.bias"));
    q[s] = affine(a, b("attn.qkv.weight"), &b("attn.q.bias"), 0, d);
    k[s] = affine(a, b("attn.qkv.weight"), nullptr, d, d);
    v[s] = affine(a, b("attn.qkv.weight"), &b("attn.v.bias"), 2 * d, d);
  }
  const std::size_t last = len - 1;
  std::vector<double> scores(len);
  double mx = -1e300, total = 0;
  for (std::size_t j = 0; j < len; ++j) {
    double dot = 0;
    for (std::size_t c = 0; c < d; ++c) dot += q[last][c] * k[j][c];
    scores[j] = dot / std::sqrt(static_cast<double>(d));
    mx = std::max(mx, scores[j]);
  }
  for (double& s : scores) total += (s = std::exp(s - mx));
  std::vector<double> ctx(d, 0.0);
  for (std::size_t j = 0; j < len; ++j)
    for (std::size_t c = 0; c < d; ++c) ctx[c] += scores[j] / total * v[j][c];
  std::vector<double> r = affine(ctx, b("attn.proj.weight"), &b("attn.proj.bias"));
  for (std::size_t c = 0; c < d; ++c) r[c] += e[last][c];
  std::vector<double> hidden = affine(layer_norm(r, b("ln2.gain"), b("ln2.bias")), b("ffn.fc.weight"),
                                      &b("ffn.fc.bias"));
  for (double& h : hidden) h = gelu(h);
  const std::vector<double> f = affine(hidden, b("ffn.proj.weight"), &b("ffn.proj.bias"));
  for (std::size_t c = 0; c < d; ++c) r[c] += f[c];
  const auto z = layer_norm(r, t.at("final_ln.gain"), t.at("final_ln.bias"));
  const double head = affine(z, t.at("head.weight"), &t.at("head.bias"))[0];

  EXPECT_NEAR(predict(params, window), head, 1e-12);
  EXPECT_NEAR(predict(params, window, {2.0, 3.0}), 2.0 + 3.0 * head, 1e-11);
}

std::vector<double> every_position(const ModelParams& params, const A& window) {
  Network<double> net(params.config, 1, window.rows(), false, Readout::kEveryPosition);
  net.load(params.tensors);
  const A* w = &window;
  net.set_windows(std::span<const A* const>(&w, 1));
  const auto out = net.predict();
  return {out.begin(), out.end()};
}

TEST(TransformerForward, EditsOnlyAffectLaterPositions) {
  const ModelConfig config = transformer_config(16, 32, 2, 2, 24);
  const ModelParams params = testing::random_model(config, 17);
  const A window = testing::random_window(24, 28, 17);
  const auto base = every_position(params, window);
  for (std::size_t edit : {0, 5, 23}) {
    A changed = window;
    for (std::size_t j = 0; j < 28; ++j) changed(edit, j) += 1.0;
    const auto out = every_position(params, changed);
    for (std::size_t t = 0; t < 24; ++t) {
      if (t < edit) {
        EXPECT_EQ(out[t], base[t]) << "position " << t << " edit " << edit;
      } else {
        EXPECT_NE(out[t], base[t]) << "position " << t << " edit " << edit;
      }
    }
  }
}

TEST(TransformerForward, LastPositionReadoutMatchesFullStream) {
  const ModelConfig config = transformer_config(16, 32, 2, 2, 30);
  const ModelParams params = testing::random_model(config, 18);
  const A window = testing::random_window(30, 28, 18);
  EXPECT_EQ(predict(params, window), every_position(params, window).back());
}

// --- shared behaviour ----------------------------------------------------------

TEST(Models, PredictionsDoNotDependOnBatching) {
  for (const ModelConfig& config : {lstm_config(8, 2), transformer_config(16, 32, 2, 2, 40)}) {
    const ModelParams params = testing::random_model(config, 19);
    std::vector<A> windows;
    for (std::uint64_t s = 0; s < 7; ++s) windows.push_back(testing::random_window(40, 28, 100 + s));
    Predictor one(params, {}, 40, 1), many(params, {}, 40, 3);
    EXPECT_EQ(one.predict(windows), many.predict(windows));
    EXPECT_EQ(one.predict(windows), one.predict(windows));
  }
}

TEST(Models, DropoutIsReproducibleBySeed) {
  for (ModelConfig config : {lstm_config(8, 2), transformer_config(16, 32, 2, 2, 20)}) {
    config.dropout = 0.3;
    const ModelParams params = testing::random_model(config, 20);
    const A window = testing::random_window(20, 28, 20);
    auto run = [&](std::uint64_t seed) {
      Network<double> net(config, 1, 20, true);
      net.load(params.tensors);
      const A* w = &window;
      net.set_windows(std::span<const A* const>(&w, 1));
      Rng rng(seed);
      net.draw_dropout(rng);
      return net.predict()[0];
    };
    EXPECT_EQ(run(1), run(1));
    EXPECT_NE(run(1), run(2));
    Network<double> eval(config, 1, 20, false);
    eval.load(params.tensors);
    const A* w = &window;
    eval.set_windows(std::span<const A* const>(&w, 1));
    EXPECT_EQ(eval.predict()[0], predict(params, window));
  }
}

TEST(Models, ConfigValidation) {
  ModelConfig bad_heads = transformer_config(10, 8, 3, 1, 20);
  EXPECT_THROW(bad_heads.validate(), ConfigError);
  EXPECT_THROW(transformer_config(16, 8, 2, 1, 20).validate_window(21), ConfigError);
  EXPECT_THROW(lstm_config(0, 1).validate(), ConfigError);
  ModelConfig bad_dropout = lstm_config(4, 1);
  bad_dropout.dropout = 1.0;
  EXPECT_THROW(bad_dropout.validate(), ConfigError);
  EXPECT_EQ(parse_model_kind("gpt2"), ModelKind::kTransformer);
  EXPECT_THROW(parse_model_kind("rnn"), ConfigError);
}

TEST(Models, InitIsSeededAndWellShaped) {
  const ModelConfig config = transformer_config(16, 32, 2, 2, 120);
  const ModelParams a = init_params(config, 5), b = init_params(config, 5), c = init_params(config, 6);
  EXPECT_NO_THROW(validate_params(a));
  EXPECT_EQ(a.tensors, b.tensors);
  EXPECT_NE(a.tensors.at("embed.weight"), c.tensors.at("embed.weight"));
  for (double v : a.tensors.at("embed.weight").data()) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(28.0));
  for (double v : a.tensors.at("block.1.ln2.gain").data()) EXPECT_EQ(v, 1.0);
  ModelParams broken = a;
  broken.tensors.erase("pos");
  EXPECT_THROW(validate_params(broken), ConfigError);
}

TEST(Models, GradientsMatchFiniteDifferences) {
  for (const ModelConfig& config : {lstm_config(8, 2), transformer_config(16, 32, 2, 2, 20)}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto r = testing::check_model_gradients(config, 20, 1000 + seed);
      EXPECT_LT(r.worst, 1e-5) << to_string(config.kind) << " " << r.worst_name;
    }
  }
}

}  // namespace
}  // namespace gppcast::models
