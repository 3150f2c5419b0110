#pragma once

// The two window regressors: a stacked LSTM read out from its final hidden
// state, and a pre-norm causal decoder (GPT-2 block layout) read out from the
// last position. Both map a (length x input_dim) window to one GPP value.

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gppcast/errors.hpp"
#include "gppcast/grad.hpp"
#include "gppcast/random.hpp"

namespace gppcast::models {

using grad::Array;
using grad::Graph;
using grad::NodeId;
using grad::Shape;

enum class ModelKind { kLstm, kTransformer };

inline std::string_view to_string(ModelKind kind) {
  return kind == ModelKind::kLstm ? "lstm" : "gpt2";
}

inline ModelKind parse_model_kind(std::string_view name) {
  if (name == "lstm") return ModelKind::kLstm;
  if (name == "gpt2" || name == "transformer") return ModelKind::kTransformer;
  throw ConfigError("unknown model '" + std::string(name) + "' (expected lstm or gpt2)");
}

struct LstmConfig {
  std::size_t hidden_size = 16;
  std::size_t num_layers = 1;
};

struct TransformerConfig {
  std::size_t model_dim = 16;
  std::size_t ff_dim = 32;
  std::size_t num_heads = 2;
  std::size_t num_layers = 1;
  std::size_t max_positions = 120;
};

struct ModelConfig {
  ModelKind kind = ModelKind::kLstm;
  std::size_t input_dim = 28;
  double dropout = 0.3;
  LstmConfig lstm;
  TransformerConfig transformer;

  void validate() const {
    if (input_dim == 0) throw ConfigError("input_dim must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (kind == ModelKind::kLstm) {
      if (lstm.hidden_size == 0) throw ConfigError("hidden_size must be >= 1");
      if (lstm.num_layers == 0) throw ConfigError("num_layers must be >= 1");
    } else {
      const auto& t = transformer;
      if (t.model_dim == 0 || t.ff_dim == 0 || t.num_heads == 0 || t.num_layers == 0 ||
          t.max_positions == 0) {
        throw ConfigError("transformer dimensions must be positive");
      }
      if (t.model_dim % t.num_heads != 0) {
        throw ConfigError("model_dim " + std::to_string(t.model_dim) +
                          " is not divisible by num_heads " + std::to_string(t.num_heads));
      }
    }
  }

  void validate_window(std::size_t length) const {
    validate();
    if (length == 0) throw ConfigError("window length must be positive");
    if (kind == ModelKind::kTransformer && transformer.max_positions < length) {
      throw ConfigError("max_positions " + std::to_string(transformer.max_positions) +
                        " is shorter than the window length " + std::to_string(length));
    }
  }
};

using ParamMap = std::map<std::string, Array<double>>;

struct ModelParams {
  ModelConfig config;
  ParamMap tensors;
};

inline std::string lstm_name(std::size_t layer, std::string_view what) {
  return "lstm." + std::to_string(layer) + "." + std::string(what);
}

inline std::string block_name(std::size_t layer, std::string_view what) {
  return "block." + std::to_string(layer) + "." + std::string(what);
}

// Name and shape of every trainable array, in a fixed order.
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, Shape>> out;
  if (config.kind == ModelKind::kLstm) {
    const std::size_t h = config.lstm.hidden_size;
    for (std::size_t l = 0; l < config.lstm.num_layers; ++l) {
      const std::size_t in = l == 0 ? config.input_dim : h;
      out.emplace_back(lstm_name(l, "w_ih"), Shape{in, 4 * h});
      out.emplace_back(lstm_name(l, "w_hh"), Shape{h, 4 * h});
      out.emplace_back(lstm_name(l, "bias"), Shape{1, 4 * h});
    }
    out.emplace_back("head.weight", Shape{h, 1});
  } else {
    const auto& t = config.transformer;
    const std::size_t d = t.model_dim;
    out.emplace_back("embed.weight", Shape{config.input_dim, d});
    out.emplace_back("embed.bias", Shape{1, d});
    out.emplace_back("pos", Shape{t.max_positions, d});
    for (std::size_t l = 0; l < t.num_layers; ++l) {
      out.emplace_back(block_name(l, "ln1.gain"), Shape{1, d});
      out.emplace_back(block_name(l, "ln1.bias"), Shape{1, d});
      out.emplace_back(block_name(l, "attn.qkv.weight"), Shape{d, 3 * d});
      out.emplace_back(block_name(l, "attn.q.bias"), Shape{1, d});
      out.emplace_back(block_name(l, "attn.v.bias"), Shape{1, d});
      out.emplace_back(block_name(l, "attn.proj.weight"), Shape{d, d});
      out.emplace_back(block_name(l, "attn.proj.bias"), Shape{1, d});
      out.emplace_back(block_name(l, "ln2.gain"), Shape{1, d});
      out.emplace_back(block_name(l, "ln2.bias"), Shape{1, d});
      out.emplace_back(block_name(l, "ffn.fc.weight"), Shape{d, t.ff_dim});
      out.emplace_back(block_name(l, "ffn.fc.bias"), Shape{1, t.ff_dim});
      out.emplace_back(block_name(l, "ffn.proj.weight"), Shape{t.ff_dim, d});
      out.emplace_back(block_name(l, "ffn.proj.bias"), Shape{1, d});
    }
    out.emplace_back("final_ln.gain", Shape{1, d});
    out.emplace_back("final_ln.bias", Shape{1, d});
    out.emplace_back("head.weight", Shape{d, 1});
  }
  out.emplace_back("head.bias", Shape{1, 1});
  return out;
}

// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); layer-norm gains 1
// and biases 0; positional table ~ U(-1/sqrt(d), 1/sqrt(d)).
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams params{config, {}};
  Rng rng(derive_seed(seed, "init"));
  const auto shapes = parameter_shapes(config);
  // A bias shares the fan-in of the weight it is added to.
  auto fan_in_of = [&](const std::string& name, const Shape& shape) -> std::size_t {
    if (name == "pos") return shape[1];
    if (name.starts_with("lstm.") && name.ends_with(".bias")) {
      return name.starts_with("lstm.0.") ? config.input_dim : config.lstm.hidden_size;
    }
    if (name.ends_with(".q.bias") || name.ends_with(".v.bias")) return config.transformer.model_dim;
    if (name.ends_with(".bias")) {
      const std::string weight = name.substr(0, name.size() - 4) + "weight";
      for (const auto& [n, s] : shapes) {
        if (n == weight) return s[0];
      }
    }
    return shape[0];
  };
  for (const auto& [name, shape] : shapes) {
    Array<double> a(shape);
    if (name.ends_with(".gain")) {
      a.fill(1.0);
    } else if (name.find("ln") != std::string::npos) {
      a.fill(0.0);
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in_of(name, shape)));
      for (double& v : a.data()) v = rng.uniform(-bound, bound);
    }
    params.tensors.emplace(name, std::move(a));
  }
  return params;
}

inline void validate_params(const ModelParams& params) {
  for (const auto& [name, shape] : parameter_shapes(params.config)) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end()) throw ConfigError("missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw ConfigError("parameter '" + name + "' has shape " + grad::to_string(it->second.shape()) +
                        ", expected " + grad::to_string(shape));
    }
    if (!it->second.all_finite()) throw NumericError("parameter '" + name + "' is not finite");
  }
  if (params.tensors.size() != parameter_shapes(params.config).size()) {
    throw ConfigError("parameter set has unexpected entries");
  }
}

// --- graph building blocks ---------------------------------------------------

struct CellState {
  NodeId h;
  NodeId c;
};

// One LSTM step given the input projection z_x = x W_ih + b (rows = batch):
//   z = z_x + h W_hh, gates [i | f | g | o] in blocks of `hidden` columns,
//   c' = sigmoid(f) * c + sigmoid(i) * tanh(g),  h' = sigmoid(o) * tanh(c').
template <class T>
CellState lstm_cell(Graph<T>& g, NodeId x_projection, NodeId h, NodeId c, NodeId w_hh,
                       std::size_t hidden) {
  const NodeId z = g.add(x_projection, g.matmul(h, w_hh));
  const NodeId in_gate = g.sigmoid(g.slice(z, 1, 0, hidden));
  const NodeId forget_gate = g.sigmoid(g.slice(z, 1, hidden, 2 * hidden));
  const NodeId candidate = g.tanh(g.slice(z, 1, 2 * hidden, 3 * hidden));
  const NodeId out_gate = g.sigmoid(g.slice(z, 1, 3 * hidden, 4 * hidden));
  const NodeId c_next = g.add(g.mul(forget_gate, c), g.mul(in_gate, candidate));
  const NodeId h_next = g.mul(out_gate, g.tanh(c_next));
  return {h_next, c_next};
}

// Scaled dot-product attention for one head; rows of q, k, v are positions.
template <class T>
NodeId attention(Graph<T>& g, NodeId q, NodeId k, NodeId v, bool causal) {
  using std::sqrt;
  const T scale = T(1) / sqrt(static_cast<T>(g.cols(q)));
  const NodeId weights = g.softmax(g.scale(g.matmul_nt(q, k), scale), causal);
  return g.matmul(weights, v);
}

// Evaluates one LSTM cell step on concrete values (batch = rows of x).
inline std::pair<Array<double>, Array<double>> lstm_cell_step(
    const Array<double>& x, const Array<double>& h, const Array<double>& c,
    const Array<double>& w_ih, const Array<double>& w_hh, const Array<double>& bias) {
  const std::size_t hidden = h.cols();
  if (w_ih.rows() != x.cols() || w_ih.cols() != 4 * hidden || w_hh.rows() != hidden ||
      w_hh.cols() != 4 * hidden || bias.cols() != 4 * hidden || c.cols() != hidden ||
      h.rows() != x.rows() || c.rows() != x.rows()) {
    throw ShapeError("lstm_cell_step: inconsistent dimensions");
  }
  Graph<double> g;
  const NodeId xn = g.constant(x);
  const NodeId proj = g.add_row(g.matmul(xn, g.constant(w_ih)), g.constant(bias));
  const auto next = lstm_cell(g, proj, g.constant(h), g.constant(c), g.constant(w_hh), hidden);
  g.forward();
  return {g.value(next.h), g.value(next.c)};
}

// Evaluates single-head attention on concrete values.
inline Array<double> attention(const Array<double>& q, const Array<double>& k,
                               const Array<double>& v, bool causal) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) throw ShapeError("attention: shape mismatch");
  Graph<double> g;
  const NodeId out = attention(g, g.constant(q), g.constant(k), g.constant(v), causal);
  g.forward();
  return g.value(out);
}

// --- compiled network ----------------------------------------------------------

// kLast produces one prediction per window. kEveryPosition (transformer only)
// applies the head at every position, giving batch*length outputs in
// sample-major order; it exists to inspect causal behaviour.
enum class Readout { kLast, kEveryPosition };

// A model graph compiled for a fixed batch size and window length. Holds its
// own buffers, so one instance must not be shared between threads; the
// parameters it was loaded from can be.
template <class T>
class Network {
 public:
  Network(const ModelConfig& config, std::size_t batch, std::size_t length, bool train_mode,
          Readout readout = Readout::kLast)
      : config_(config), batch_(batch), length_(length), train_mode_(train_mode),
        every_position_(readout == Readout::kEveryPosition) {
    config.validate_window(length);
    if (batch == 0) throw ConfigError("batch size must be positive");
    if (every_position_ && config.kind != ModelKind::kTransformer) {
      throw ConfigError("every-position readout needs the transformer");
    }
    for (const auto& [name, shape] : parameter_shapes(config)) {
      params_.emplace(name, g_.parameter(name, shape[0], shape[1]));
    }
    input_ = g_.input("windows", batch * length, config.input_dim);
    const NodeId head_in =
        config.kind == ModelKind::kLstm ? build_lstm() : build_transformer();
    const NodeId head = g_.add_row(g_.matmul(dropout(head_in), p("head.weight")), p("head.bias"));
    shift_ = g_.input("output.shift", 1, 1);
    scale_ = g_.input("output.scale", 1, 1);
    set_output_scaling(0.0, 1.0);
    output_ = g_.add_row(g_.mul_row(head, scale_), shift_);
    target_ = g_.input("targets", g_.rows(output_), 1);
    loss_ = g_.mean(g_.abs(g_.sub(output_, target_)));
  }

  std::size_t batch() const { return batch_; }
  std::size_t length() const { return length_; }
  bool train_mode() const { return train_mode_; }
  Graph<T>& graph() { return g_; }
  NodeId output() const { return output_; }
  NodeId loss() const { return loss_; }
  NodeId input() const { return input_; }
  const std::map<std::string, NodeId>& parameter_nodes() const { return params_; }
  // Residual stream after the last transformer block: every position
  // (sample-major) with kEveryPosition, otherwise only the readout rows.
  NodeId hidden_states() const { return hidden_states_; }

  void load(const ParamMap& tensors) {
    for (const auto& [name, id] : params_) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw ConfigError("missing parameter '" + name + "'");
      g_.set_from(id, it->second.data());
    }
  }

  template <class U>
  void set_parameter(const std::string& name, const Array<U>& value) {
    g_.set_from(params_.at(name), value.data());
  }

  // Predictions are shift + scale * head(x): the network works in
  // standardized target units while losses stay in GPP units.
  void set_output_scaling(double shift, double scale) {
    g_.set(shift_, Array<T>::scalar(static_cast<T>(shift)));
    g_.set(scale_, Array<T>::scalar(static_cast<T>(scale)));
  }

  // Each window is (length x input_dim), rows oldest to newest.
  void set_windows(std::span<const Array<double>* const> windows) {
    if (windows.size() != batch_) {
      throw ShapeError("expected " + std::to_string(batch_) + " windows, got " +
                       std::to_string(windows.size()));
    }
    Array<T>& x = g_.leaf_buffer(input_);
    const std::size_t f = config_.input_dim;
    for (std::size_t b = 0; b < batch_; ++b) {
      const Array<double>& w = *windows[b];
      if (w.rows() != length_ || w.cols() != f) {
        throw ShapeError("window shape " + grad::to_string(w.shape()) + " does not match (" +
                         std::to_string(length_) + "x" + std::to_string(f) + ")");
      }
      for (std::size_t t = 0; t < length_; ++t) {
        const std::size_t row = input_row(b, t);
        for (std::size_t j = 0; j < f; ++j) x(row, j) = static_cast<T>(w(t, j));
      }
    }
  }

  void set_targets(std::span<const double> targets) { g_.set_from(target_, targets); }

  // Inverted dropout: kept units are scaled by 1/(1-p). No-op in eval mode.
  void draw_dropout(Rng& rng) {
    const double p_drop = config_.dropout;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p_drop));
    for (NodeId mask : masks_) {
      for (T& v : g_.leaf_buffer(mask).data()) v = rng.uniform() < p_drop ? T{0} : keep_scale;
    }
  }

  std::span<const T> predict() {
    g_.forward(output_);
    return g_.value(output_).data();
  }

  T forward_loss() {
    g_.forward(loss_);
    return g_.value(loss_).item();
  }

  void backward() { g_.backward(loss_); }

  const Array<T>& gradient(const std::string& name) const { return g_.grad(params_.at(name)); }

 private:
  NodeId p(const std::string& name) const { return params_.at(name); }

  // LSTM packs windows time-major (row t*B + b) so each step is a contiguous
  // row block; the transformer packs sample-major (row b*T + t).
  std::size_t input_row(std::size_t b, std::size_t t) const {
    return config_.kind == ModelKind::kLstm ? t * batch_ + b : b * length_ + t;
  }

  NodeId dropout(NodeId x) {
    if (!train_mode_ || config_.dropout <= 0.0) return x;
    const NodeId mask = g_.input("dropout." + std::to_string(masks_.size()), g_.rows(x), g_.cols(x));
    g_.set(mask, Array<T>::matrix(g_.rows(x), g_.cols(x), T{1}));
    masks_.push_back(mask);
    return g_.mul(x, mask);
  }

  NodeId build_lstm() {
    const std::size_t h = config_.lstm.hidden_size;
    NodeId layer_input = input_;
    NodeId last_h{};
    const NodeId zeros = g_.constant(Array<T>::matrix(batch_, h));
    for (std::size_t l = 0; l < config_.lstm.num_layers; ++l) {
      const NodeId projection =
          g_.add_row(g_.matmul(layer_input, p(lstm_name(l, "w_ih"))), p(lstm_name(l, "bias")));
      CellState state{zeros, zeros};
      std::vector<NodeId> outputs;
      const bool last_layer = l + 1 == config_.lstm.num_layers;
      for (std::size_t t = 0; t < length_; ++t) {
        const NodeId step = g_.slice(projection, 0, t * batch_, (t + 1) * batch_);
        state = lstm_cell(g_, step, state.h, state.c, p(lstm_name(l, "w_hh")), h);
        if (!last_layer) outputs.push_back(state.h);
      }
      if (last_layer) {
        last_h = state.h;
      } else {
        layer_input = dropout(g_.concat(outputs, 0));
      }
    }
    return last_h;
  }

  NodeId affine_norm(NodeId x, const std::string& prefix) {
    return g_.add_row(g_.mul_row(g_.layer_norm(x), p(prefix + ".gain")), p(prefix + ".bias"));
  }

  NodeId build_transformer() {
    const auto& cfg = config_.transformer;
    const std::size_t d = cfg.model_dim;
    const std::size_t heads = cfg.num_heads;
    const std::size_t dh = d / heads;
    NodeId x = g_.add_row(g_.matmul(input_, p("embed.weight")), p("embed.bias"));
    const NodeId pos = g_.slice(p("pos"), 0, 0, length_);
    x = g_.add(x, batch_ == 1 ? pos : g_.concat(std::vector<NodeId>(batch_, pos), 0));
    x = dropout(x);
    std::vector<std::size_t> last_rows(batch_);
    for (std::size_t b = 0; b < batch_; ++b) last_rows[b] = b * length_ + length_ - 1;
    const NodeId zeros = g_.constant(Array<T>::matrix(1, d));
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      // Only the last position reaches the head, so the final block computes
      // queries, attention output and FFN for that row alone.
      const bool last_only = !every_position_ && l + 1 == cfg.num_layers;
      const NodeId a = affine_norm(x, block_name(l, "ln1"));
      // No key bias: it shifts every score in a row equally, which softmax ignores.
      const NodeId qkv_bias = g_.concat(
          {p(block_name(l, "attn.q.bias")), zeros, p(block_name(l, "attn.v.bias"))}, 1);
      const NodeId qkv = g_.add_row(g_.matmul(a, p(block_name(l, "attn.qkv.weight"))), qkv_bias);
      std::vector<NodeId> samples;
      for (std::size_t b = 0; b < batch_; ++b) {
        const NodeId rows = batch_ == 1 ? qkv : g_.slice(qkv, 0, b * length_, (b + 1) * length_);
        const NodeId query_rows = last_only ? g_.slice(rows, 0, length_ - 1, length_) : rows;
        std::vector<NodeId> head_out;
        for (std::size_t hd = 0; hd < heads; ++hd) {
          const NodeId q = g_.slice(query_rows, 1, hd * dh, (hd + 1) * dh);
          const NodeId k = g_.slice(rows, 1, d + hd * dh, d + (hd + 1) * dh);
          const NodeId v = g_.slice(rows, 1, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
          // The last query row sees every key, so its mask is empty.
          head_out.push_back(attention(g_, q, k, v, !last_only));
        }
        samples.push_back(heads == 1 ? head_out[0] : g_.concat(head_out, 1));
      }
      const NodeId context = batch_ == 1 ? samples[0] : g_.concat(samples, 0);
      const NodeId attn = g_.add_row(g_.matmul(context, p(block_name(l, "attn.proj.weight"))),
                                     p(block_name(l, "attn.proj.bias")));
      if (last_only) x = g_.select_rows(x, last_rows);
      x = g_.add(x, dropout(attn));
      const NodeId a2 = affine_norm(x, block_name(l, "ln2"));
      const NodeId hidden = g_.gelu(g_.add_row(g_.matmul(a2, p(block_name(l, "ffn.fc.weight"))),
                                               p(block_name(l, "ffn.fc.bias"))));
      const NodeId ffn = g_.add_row(g_.matmul(hidden, p(block_name(l, "ffn.proj.weight"))),
                                    p(block_name(l, "ffn.proj.bias")));
      x = g_.add(x, dropout(ffn));
    }
    hidden_states_ = x;
    return affine_norm(x, "final_ln");
  }

  ModelConfig config_;
  std::size_t batch_;
  std::size_t length_;
  bool train_mode_;
  bool every_position_;
  Graph<T> g_;
  std::map<std::string, NodeId> params_;
  std::vector<NodeId> masks_;
  NodeId input_{}, output_{}, target_{}, loss_{}, shift_{}, scale_{}, hidden_states_{};
};

struct OutputScaling {
  double shift = 0.0;
  double scale = 1.0;
};

// Batched, eval-mode inference over any number of windows. Results do not
// depend on how windows are grouped into batches: every op is row-wise or
// per-sample with a fixed summation order.
class Predictor {
 public:
  Predictor(ModelParams params, OutputScaling scaling, std::size_t length,
            std::size_t batch_size = 64)
      : params_(std::move(params)), scaling_(scaling), length_(length), batch_size_(batch_size) {
    validate_params(params_);
    params_.config.validate_window(length);
  }

  const ModelParams& params() const { return params_; }
  std::size_t length() const { return length_; }

  double predict_one(const Array<double>& window) {
    const Array<double>* w = &window;
    return predict(std::span<const Array<double>* const>(&w, 1))[0];
  }

  std::vector<double> predict(std::span<const Array<double>* const> windows) {
    std::vector<double> out;
    out.reserve(windows.size());
    for (std::size_t start = 0; start < windows.size(); start += batch_size_) {
      const std::size_t n = std::min(batch_size_, windows.size() - start);
      Network<double>& net = network(n);
      net.set_windows(windows.subspan(start, n));
      for (double v : net.predict()) out.push_back(v);
    }
    return out;
  }

  std::vector<double> predict(const std::vector<Array<double>>& windows) {
    std::vector<const Array<double>*> ptrs;
    ptrs.reserve(windows.size());
    for (const auto& w : windows) ptrs.push_back(&w);
    return predict(std::span<const Array<double>* const>(ptrs));
  }

 private:
  Network<double>& network(std::size_t batch) {
    auto it = cache_.find(batch);
    if (it == cache_.end()) {
      auto net = std::make_unique<Network<double>>(params_.config, batch, length_, false);
      net->load(params_.tensors);
      net->set_output_scaling(scaling_.shift, scaling_.scale);
      it = cache_.emplace(batch, std::move(net)).first;
    }
    return *it->second;
  }

  ModelParams params_;
  OutputScaling scaling_;
  std::size_t length_;
  std::size_t batch_size_;
  std::map<std::size_t, std::unique_ptr<Network<double>>> cache_;
};

}  // namespace gppcast::models
