#pragma once

// Dense feed-forward networks with hand-written backpropagation, the Adam
// optimizer, and the early-stopping / plateau-scheduled training loop used for
// the reconstruction autoencoder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "aeromon/dataset.hpp"
#include "aeromon/error.hpp"
#include "aeromon/numerics.hpp"

namespace aeromon {

enum class Activation : std::uint8_t { ELU, Identity, Sigmoid };

inline std::string_view to_string(Activation a) noexcept {
  switch (a) {
    case Activation::ELU: return "elu";
    case Activation::Identity: return "identity";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "elu") return Activation::ELU;
  if (s == "identity") return Activation::Identity;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw SchemaError("unknown activation '" + std::string(s) + "'");
}

/// ELU with alpha = 1.
inline double elu(double z) noexcept { return z > 0.0 ? z : std::expm1(z); }

inline double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double activate(Activation a, double z) noexcept {
  switch (a) {
    case Activation::ELU: return elu(z);
    case Activation::Sigmoid: return sigmoid(z);
    case Activation::Identity: break;
  }
  return z;
}

/// d(activation)/dz given both the pre-activation z and the activation value.
inline double activation_derivative(Activation a, double z, double value) noexcept {
  switch (a) {
    case Activation::ELU: return z > 0.0 ? 1.0 : value + 1.0;
    case Activation::Sigmoid: return value * (1.0 - value);
    case Activation::Identity: break;
  }
  return 1.0;
}

struct LayerSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::Identity;

  bool operator==(const LayerSpec&) const = default;
};

struct Layer {
  LayerSpec spec;
  Matrix weights;  // out_dim x in_dim
  std::vector<double> biases;

  bool operator==(const Layer&) const = default;
};

struct Network {
  std::vector<Layer> layers;

  std::size_t input_dim() const noexcept { return layers.empty() ? 0 : layers.front().spec.in_dim; }
  std::size_t output_dim() const noexcept { return layers.empty() ? 0 : layers.back().spec.out_dim; }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights.size() + l.biases.size();
    return n;
  }

  bool operator==(const Network&) const = default;
};

/// 7 -> 5 (ELU) -> 3 (Identity) -> 5 (ELU) -> 7 (Identity).
inline std::vector<LayerSpec> autoencoder_topology() {
  return {{kChannels, 5, Activation::ELU},
          {5, 3, Activation::Identity},
          {3, 5, Activation::ELU},
          {5, kChannels, Activation::Identity}};
}

inline void check_chain(std::span<const LayerSpec> specs) {
  if (specs.empty()) throw ShapeError("network needs at least one layer");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].in_dim == 0 || specs[i].out_dim == 0) throw ShapeError("layer dimensions must be >= 1");
    if (i > 0 && specs[i].in_dim != specs[i - 1].out_dim) {
      throw ShapeError("layer " + std::to_string(i) + " input " + std::to_string(specs[i].in_dim) +
                       " does not match previous output " + std::to_string(specs[i - 1].out_dim));
    }
  }
}

/// Glorot-uniform weights in +-sqrt(6 / (in + out)), zero biases.
inline Network init_network(std::span<const LayerSpec> specs, std::uint64_t seed) {
  check_chain(specs);
  Rng rng(seed);
  Network net;
  for (const auto& spec : specs) {
    Layer layer{spec, Matrix(spec.out_dim, spec.in_dim), std::vector<double>(spec.out_dim, 0.0)};
    const double limit = std::sqrt(6.0 / static_cast<double>(spec.in_dim + spec.out_dim));
    for (double& w : layer.weights.data()) w = rng.uniform(-limit, limit);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

/// Per-layer intermediate values of one forward pass, plus scratch space reused
/// by backpropagation. `post[0]` is the input; `post[l + 1]` is the output of layer l.
struct ForwardCache {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> post;
  std::vector<std::vector<double>> delta;

  std::span<const double> output() const noexcept { return post.back(); }
};

inline void forward_into(const Network& net, std::span<const double> x, ForwardCache& cache) {
  if (net.layers.empty()) throw ShapeError("empty network");
  if (x.size() != net.input_dim()) {
    throw ShapeError("input length " + std::to_string(x.size()) + " != " + std::to_string(net.input_dim()));
  }
  const std::size_t n_layers = net.layers.size();
  cache.pre.resize(n_layers);
  cache.post.resize(n_layers + 1);
  cache.delta.resize(n_layers);
  cache.post[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < n_layers; ++l) {
    const Layer& layer = net.layers[l];
    const std::size_t out = layer.spec.out_dim;
    const std::size_t in = layer.spec.in_dim;
    auto& z = cache.pre[l];
    auto& a = cache.post[l + 1];
    z.resize(out);
    a.resize(out);
    const auto& input = cache.post[l];
    for (std::size_t i = 0; i < out; ++i) {
      double s = layer.biases[i];
      const double* w = layer.weights.data().data() + i * in;
      for (std::size_t j = 0; j < in; ++j) s += w[j] * input[j];
      z[i] = s;
      a[i] = activate(layer.spec.activation, s);
    }
  }
}

struct ForwardResult {
  std::vector<double> output;
  ForwardCache cache;
};

inline ForwardResult forward(const Network& net, std::span<const double> x) {
  ForwardResult r;
  forward_into(net, x, r.cache);
  r.output.assign(r.cache.output().begin(), r.cache.output().end());
  return r;
}

/// (1/d) * sum (x_i - xhat_i)^2
inline double mse_loss(std::span<const double> x, std::span<const double> xhat) {
  if (x.size() != xhat.size()) throw ShapeError("mse_loss length mismatch");
  if (x.empty()) throw ShapeError("mse_loss of empty vectors");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - xhat[i];
    s += d * d;
  }
  return s / static_cast<double>(x.size());
}

struct LayerGrad {
  Matrix weights;
  std::vector<double> biases;

  bool operator==(const LayerGrad&) const = default;
};

using Gradients = std::vector<LayerGrad>;

inline Gradients zero_gradients(const Network& net) {
  Gradients g;
  g.reserve(net.layers.size());
  for (const auto& l : net.layers) {
    g.push_back({Matrix(l.spec.out_dim, l.spec.in_dim), std::vector<double>(l.spec.out_dim, 0.0)});
  }
  return g;
}

inline void check_cache(const Network& net, const ForwardCache& cache) {
  if (cache.pre.size() != net.layers.size() || cache.post.size() != net.layers.size() + 1) {
    throw ShapeError("forward cache does not match the network depth");
  }
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    if (cache.pre[l].size() != net.layers[l].spec.out_dim || cache.post[l].size() != net.layers[l].spec.in_dim) {
      throw ShapeError("forward cache does not match layer " + std::to_string(l));
    }
  }
}

/// Backpropagates a loss gradient with respect to the last layer's
/// pre-activation and adds `scale` times the parameter gradients into `acc`.
inline void backprop_preactivation(const Network& net, ForwardCache& cache, std::span<const double> delta_out,
                                   Gradients& acc, double scale = 1.0) {
  const std::size_t n_layers = net.layers.size();
  cache.delta.resize(n_layers);
  cache.delta[n_layers - 1].assign(delta_out.begin(), delta_out.end());
  for (std::size_t l = n_layers; l-- > 0;) {
    const Layer& layer = net.layers[l];
    const std::size_t out = layer.spec.out_dim;
    const std::size_t in = layer.spec.in_dim;
    const auto& dz = cache.delta[l];
    const auto& input = cache.post[l];
    LayerGrad& g = acc[l];
    for (std::size_t i = 0; i < out; ++i) {
      const double d = scale * dz[i];
      g.biases[i] += d;
      double* gw = g.weights.data().data() + i * in;
      for (std::size_t j = 0; j < in; ++j) gw[j] += d * input[j];
    }
    if (l == 0) break;
    // dL/dz of the previous layer.
    const Layer& prev = net.layers[l - 1];
    auto& dprev = cache.delta[l - 1];
    dprev.assign(in, 0.0);
    for (std::size_t i = 0; i < out; ++i) {
      const double* w = layer.weights.data().data() + i * in;
      for (std::size_t j = 0; j < in; ++j) dprev[j] += w[j] * dz[i];
    }
    for (std::size_t j = 0; j < in; ++j) {
      dprev[j] *= activation_derivative(prev.spec.activation, cache.pre[l - 1][j], cache.post[l][j]);
    }
  }
}

/// Adds `scale` times the gradient of mse_loss(target, output) into `acc`.
inline void accumulate_mse_gradient(const Network& net, ForwardCache& cache, std::span<const double> target,
                                    Gradients& acc, double scale = 1.0) {
  const Layer& last = net.layers.back();
  const std::size_t d = last.spec.out_dim;
  if (target.size() != d) throw ShapeError("target length does not match network output");
  std::vector<double> dz(d);
  const auto& out = cache.post.back();
  const auto& z = cache.pre.back();
  for (std::size_t i = 0; i < d; ++i) {
    const double dl_da = 2.0 * (out[i] - target[i]) / static_cast<double>(d);
    dz[i] = dl_da * activation_derivative(last.spec.activation, z[i], out[i]);
  }
  backprop_preactivation(net, cache, dz, acc, scale);
}

/// Exact gradient of mse_loss(x, forward(net, x)) for the reconstruction objective.
inline Gradients backward(const Network& net, const ForwardCache& cache, std::span<const double> x) {
  check_cache(net, cache);
  if (x.size() != net.input_dim() || !std::equal(x.begin(), x.end(), cache.post[0].begin())) {
    throw ShapeError("forward cache was computed for a different input");
  }
  ForwardCache scratch = cache;
  Gradients g = zero_gradients(net);
  accumulate_mse_gradient(net, scratch, x, g);
  return g;
}

/// Mean per-sample reconstruction MSE over the rows of `data`.
inline double reconstruction_mse(const Network& net, const Matrix& data) {
  if (data.rows() == 0) throw InsufficientDataError("reconstruction_mse of an empty set");
  ForwardCache cache;
  double total = 0.0;
  for (std::size_t r = 0; r < data.rows(); ++r) {
    forward_into(net, data.row(r), cache);
    total += mse_loss(data.row(r), cache.output());
  }
  return total / static_cast<double>(data.rows());
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  Gradients m;
  Gradients v;
  std::uint64_t t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_network(const Network& net, double lr) {
    if (!(lr > 0.0)) throw DomainError("learning rate must be > 0");
    AdamState s;
    s.m = zero_gradients(net);
    s.v = zero_gradients(net);
    s.lr = lr;
    return s;
  }
};

namespace detail {

inline void adam_update(std::span<double> p, std::span<double> m, std::span<double> v, std::span<const double> g,
                        const AdamState& s, double c1, double c2) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    p[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

}  // namespace detail

/// One bias-corrected Adam update of every parameter of `net`.
inline void adam_step(AdamState& state, Network& net, const Gradients& grads) {
  if (grads.size() != net.layers.size() || state.m.size() != net.layers.size() ||
      state.v.size() != net.layers.size()) {
    throw ShapeError("adam_step: gradient/state depth does not match network");
  }
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    if (grads[l].weights.size() != net.layers[l].weights.size() ||
        grads[l].biases.size() != net.layers[l].biases.size() ||
        state.m[l].weights.size() != net.layers[l].weights.size() ||
        state.v[l].biases.size() != net.layers[l].biases.size()) {
      throw ShapeError("adam_step: shape mismatch in layer " + std::to_string(l));
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    auto& layer = net.layers[l];
    detail::adam_update(layer.weights.data(), state.m[l].weights.data(), state.v[l].weights.data(),
                        grads[l].weights.data(), state, c1, c2);
    detail::adam_update(layer.biases, state.m[l].biases, state.v[l].biases, grads[l].biases, state, c1, c2);
  }
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t max_epochs = 200;
  std::size_t batch_size = 1024;
  std::size_t early_stop_patience = 25;
  std::size_t plateau_patience = 20;
  double plateau_factor = 0.2;
  double min_lr = 1e-6;
  double learning_rate = 1e-3;
  /// Val loss must drop below best - min_delta to count as an improvement.
  double min_delta = 1e-7;
  std::uint64_t seed = 7;
  bool shuffle_each_epoch = true;

  void validate() const {
    if (max_epochs == 0) throw DomainError("max_epochs must be >= 1");
    if (batch_size == 0) throw DomainError("batch_size must be >= 1");
    if (early_stop_patience == 0 || plateau_patience == 0) throw DomainError("patience values must be >= 1");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw DomainError("plateau_factor must lie in (0,1)");
    if (!(min_lr > 0.0)) throw DomainError("min_lr must be > 0");
    if (!(learning_rate > 0.0)) throw DomainError("learning_rate must be > 0");
    if (!(min_delta >= 0.0)) throw DomainError("min_delta must be >= 0");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_mse = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;  // rate used during this epoch

  bool operator==(const EpochRecord&) const = default;
};

struct TrainReport {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  /// Full-pass training MSE of the restored (best) weights.
  double best_train_loss = std::numeric_limits<double>::infinity();
  std::vector<EpochRecord> history;
  bool stopped_early = false;

  bool operator==(const TrainReport&) const = default;
};

struct TrainResult {
  Network net;
  TrainReport report;
};

/// Mini-batch Adam on the reconstruction MSE with early stopping and a
/// reduce-on-plateau learning-rate schedule.
///
/// The best weights track the strict minimum of the validation loss. Patience
/// counters only reset when that minimum drops by more than `min_delta`; the
/// plateau counter also resets after each reduction. Losses are full passes
/// over the respective set after each epoch.
inline TrainResult train(Network net, const Matrix& train_set, const Matrix& val_set, const TrainConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.rows() == 0) throw InsufficientDataError("empty training set");
  if (val_set.rows() == 0) throw InsufficientDataError("empty validation set");
  if (train_set.cols() != net.input_dim() || val_set.cols() != net.input_dim() ||
      net.output_dim() != net.input_dim()) {
    throw ShapeError("training data width does not match the autoencoder");
  }

  Rng rng(cfg.seed);
  AdamState adam = AdamState::for_network(net, cfg.learning_rate);
  Gradients grads = zero_gradients(net);
  ForwardCache cache;
  std::vector<std::size_t> order(train_set.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainReport report;
  Network best = net;
  double significant_best = std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;
  std::size_t since_reduction = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (cfg.shuffle_each_epoch) rng.shuffle(order);
    const double epoch_lr = adam.lr;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (auto& g : grads) {
        std::fill(g.weights.data().begin(), g.weights.data().end(), 0.0);
        std::fill(g.biases.begin(), g.biases.end(), 0.0);
      }
      for (std::size_t k = start; k < stop; ++k) {
        const auto x = train_set.row(order[k]);
        forward_into(net, x, cache);
        accumulate_mse_gradient(net, cache, x, grads, scale);
      }
      adam_step(adam, net, grads);
    }

    EpochRecord rec{epoch, reconstruction_mse(net, train_set), reconstruction_mse(net, val_set), epoch_lr};
    report.history.push_back(rec);
    report.epochs_run = epoch;
    if (on_epoch) on_epoch(rec);

    if (rec.val_mse < report.best_val_loss) {
      report.best_val_loss = rec.val_mse;
      report.best_train_loss = rec.train_mse;
      report.best_epoch = epoch;
      best = net;
    }
    if (rec.val_mse < significant_best - cfg.min_delta) {
      significant_best = rec.val_mse;
      since_improvement = 0;
      since_reduction = 0;
      continue;
    }
    ++since_improvement;
    ++since_reduction;
    if (since_reduction >= cfg.plateau_patience) {
      const double reduced = std::max(adam.lr * cfg.plateau_factor, cfg.min_lr);
      if (reduced < adam.lr) adam.lr = reduced;
      since_reduction = 0;
    }
    if (since_improvement >= cfg.early_stop_patience) {
      report.stopped_early = true;
      break;
    }
  }
  return {std::move(best), std::move(report)};
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::json to_json(const Network& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers) {
    layers.push_back({{"in", l.spec.in_dim},
                      {"out", l.spec.out_dim},
                      {"activation", to_string(l.spec.activation)},
                      {"weights", l.weights.data()},
                      {"biases", l.biases}});
  }
  return {{"format_version", kModelFormatVersion}, {"type", "network"}, {"layers", layers}};
}

inline Network network_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kModelFormatVersion) {
      throw SchemaError("unsupported model format_version " + j.at("format_version").dump());
    }
    if (j.at("type").get<std::string>() != "network") throw SchemaError("model file is not a network");
    Network net;
    std::vector<LayerSpec> specs;
    for (const auto& jl : j.at("layers")) {
      LayerSpec spec{jl.at("in").get<std::size_t>(), jl.at("out").get<std::size_t>(),
                     activation_from_string(jl.at("activation").get<std::string>())};
      specs.push_back(spec);
      auto w = jl.at("weights").get<std::vector<double>>();
      auto b = jl.at("biases").get<std::vector<double>>();
      if (b.size() != spec.out_dim) throw SchemaError("bias length does not match layer output");
      if (w.size() != spec.in_dim * spec.out_dim) throw SchemaError("weight count does not match layer shape");
      net.layers.push_back({spec, Matrix(spec.out_dim, spec.in_dim, std::move(w)), std::move(b)});
    }
    check_chain(specs);
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("model: ") + e.what());
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InsufficientDataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InsufficientDataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline void save_network(const std::filesystem::path& path, const Network& net) { write_json_file(path, to_json(net)); }

inline Network load_network(const std::filesystem::path& path) { return network_from_json(read_json_file(path)); }

inline nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& e : r.history) {
    hist.push_back({{"epoch", e.epoch}, {"train_mse", e.train_mse}, {"val_mse", e.val_mse}, {"lr", e.lr}});
  }
  return {{"epochs_run", r.epochs_run},         {"best_epoch", r.best_epoch},
          {"best_val_loss", r.best_val_loss},   {"best_train_loss", r.best_train_loss},
          {"stopped_early", r.stopped_early},   {"history", hist}};
}

/// `epoch,train_mse,val_mse,lr`
inline void write_train_log(const std::filesystem::path& path, const TrainReport& r) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InsufficientDataError("cannot write " + path.string());
  out << "epoch,train_mse,val_mse,lr\n";
  for (const auto& e : r.history) {
    out << e.epoch << ',' << detail::format_real(e.train_mse) << ',' << detail::format_real(e.val_mse) << ','
        << detail::format_real(e.lr) << '\n';
  }
}

}  // namespace aeromon
