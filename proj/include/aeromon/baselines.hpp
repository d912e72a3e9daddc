#pragma once

// Supervised fault classifiers (logistic regression, Gaussian naive Bayes,
// k-NN, CART decision tree, random forest, one-hidden-layer MLP) with
// stratified cross-validation and model selection.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <json.hpp>

#include "aeromon/autoencoder.hpp"
#include "aeromon/dataset.hpp"
#include "aeromon/error.hpp"
#include "aeromon/evaluation.hpp"
#include "aeromon/numerics.hpp"

namespace aeromon {

enum class ClassifierKind : std::uint8_t { LogReg, GaussianNB, Knn, DecisionTree, RandomForest, Mlp };

inline constexpr std::array<ClassifierKind, 6> kAllClassifierKinds = {
    ClassifierKind::LogReg, ClassifierKind::GaussianNB,   ClassifierKind::Knn,
    ClassifierKind::DecisionTree, ClassifierKind::RandomForest, ClassifierKind::Mlp};

inline std::string_view to_string(ClassifierKind k) noexcept {
  switch (k) {
    case ClassifierKind::LogReg: return "logreg";
    case ClassifierKind::GaussianNB: return "gnb";
    case ClassifierKind::Knn: return "knn";
    case ClassifierKind::DecisionTree: return "tree";
    case ClassifierKind::RandomForest: return "forest";
    case ClassifierKind::Mlp: return "mlp";
  }
  return "?";
}

/// Human-readable name used in comparison tables.
inline std::string_view display_name(ClassifierKind k) noexcept {
  switch (k) {
    case ClassifierKind::LogReg: return "Logistic Regression";
    case ClassifierKind::GaussianNB: return "Gaussian Naive Bayes";
    case ClassifierKind::Knn: return "k-NN";
    case ClassifierKind::DecisionTree: return "Decision Tree";
    case ClassifierKind::RandomForest: return "Random Forest";
    case ClassifierKind::Mlp: return "MLP";
  }
  return "?";
}

inline ClassifierKind classifier_kind_from_string(std::string_view s) {
  for (auto k : kAllClassifierKinds) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown classifier kind '" + std::string(s) + "' (expected logreg|gnb|knn|tree|forest|mlp)");
}

struct ClassifierConfig {
  ClassifierKind kind = ClassifierKind::RandomForest;
  std::uint64_t seed = 7;

  // logistic regression
  double l2 = 0.0;
  double logreg_lr = 1.0;
  std::size_t logreg_epochs = 500;
  // k-NN
  std::size_t k = 5;
  // decision tree / forest
  std::size_t max_depth = 32;
  std::size_t min_leaf = 1;
  // forest
  std::size_t n_trees = 100;
  std::size_t features_per_split = 3;
  bool bootstrap = true;
  // mlp
  std::size_t hidden_units = 8;
  double mlp_lr = 0.01;
  std::size_t mlp_epochs = 60;
  std::size_t mlp_batch = 256;

  void validate() const {
    if (!(l2 >= 0.0)) throw DomainError("l2 strength must be >= 0");
    if (!(logreg_lr > 0.0) || logreg_epochs == 0) throw DomainError("logreg needs lr > 0 and epochs >= 1");
    if (k == 0 || k % 2 == 0) throw DomainError("k must be odd and >= 1");
    if (max_depth == 0 || min_leaf == 0) throw DomainError("max_depth and min_leaf must be >= 1");
    if (n_trees == 0) throw DomainError("n_trees must be >= 1");
    if (features_per_split == 0) throw DomainError("features_per_split must be >= 1");
    if (hidden_units == 0 || mlp_epochs == 0 || mlp_batch == 0 || !(mlp_lr > 0.0)) {
      throw DomainError("mlp needs hidden_units, epochs, batch >= 1 and lr > 0");
    }
  }

  /// Short tag listing the hyperparameters relevant to `kind`.
  std::string describe() const {
    using detail::format_real;
    switch (kind) {
      case ClassifierKind::LogReg:
        return "logreg(l2=" + format_real(l2) + ",lr=" + format_real(logreg_lr) +
               ",epochs=" + std::to_string(logreg_epochs) + ")";
      case ClassifierKind::GaussianNB: return "gnb()";
      case ClassifierKind::Knn: return "knn(k=" + std::to_string(k) + ")";
      case ClassifierKind::DecisionTree:
        return "tree(max_depth=" + std::to_string(max_depth) + ",min_leaf=" + std::to_string(min_leaf) + ")";
      case ClassifierKind::RandomForest:
        return "forest(n_trees=" + std::to_string(n_trees) + ",features=" + std::to_string(features_per_split) +
               ",max_depth=" + std::to_string(max_depth) + ",min_leaf=" + std::to_string(min_leaf) +
               ",bootstrap=" + (bootstrap ? "1" : "0") + ")";
      case ClassifierKind::Mlp:
        return "mlp(hidden=" + std::to_string(hidden_units) + ",lr=" + format_real(mlp_lr) +
               ",epochs=" + std::to_string(mlp_epochs) + ")";
    }
    return "?";
  }
};

/// Scaled feature matrix with 0/1 targets (1 = Anomalous).
struct LabeledMatrix {
  Matrix x;
  std::vector<std::uint8_t> y;

  std::size_t size() const noexcept { return y.size(); }
};

inline LabeledMatrix to_labeled(const Dataset& data) {
  if (!data.fully_labeled()) throw MissingLabelsError("classifier training data must be labeled");
  LabeledMatrix m{to_matrix(data), {}};
  m.y.reserve(data.size());
  for (const auto& s : data.samples) m.y.push_back(*s.label == Label::Anomalous ? 1 : 0);
  return m;
}

// ---------------------------------------------------------------------------
// Logistic regression

struct LogRegModel {
  std::vector<double> w;
  double b = 0.0;
};

/// Mean cross-entropy plus (l2 / 2) * |w|^2.
inline double logreg_objective(const LogRegModel& m, const LabeledMatrix& data, double l2) {
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    double z = m.b;
    for (std::size_t j = 0; j < m.w.size(); ++j) z += m.w[j] * data.x(i, j);
    // log(1 + e^z) - y z, evaluated stably
    const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    loss += softplus - (data.y[i] ? z : 0.0);
  }
  loss /= static_cast<double>(data.size());
  double reg = 0.0;
  for (double wj : m.w) reg += wj * wj;
  return loss + 0.5 * l2 * reg;
}

/// Gradient of logreg_objective; the last entry is d/db.
inline std::vector<double> logreg_gradient(const LogRegModel& m, const LabeledMatrix& data, double l2) {
  const std::size_t d = m.w.size();
  std::vector<double> g(d + 1, 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    double z = m.b;
    for (std::size_t j = 0; j < d; ++j) z += m.w[j] * data.x(i, j);
    const double err = sigmoid(z) - static_cast<double>(data.y[i]);
    for (std::size_t j = 0; j < d; ++j) g[j] += err * data.x(i, j);
    g[d] += err;
  }
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (double& gj : g) gj *= inv_n;
  for (std::size_t j = 0; j < d; ++j) g[j] += l2 * m.w[j];
  return g;
}

inline LogRegModel fit_logreg(const LabeledMatrix& data, const ClassifierConfig& cfg) {
  LogRegModel m{std::vector<double>(data.x.cols(), 0.0), 0.0};
  for (std::size_t epoch = 0; epoch < cfg.logreg_epochs; ++epoch) {
    const auto g = logreg_gradient(m, data, cfg.l2);
    for (std::size_t j = 0; j < m.w.size(); ++j) m.w[j] -= cfg.logreg_lr * g[j];
    m.b -= cfg.logreg_lr * g.back();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Gaussian naive Bayes

struct GaussianNBModel {
  std::array<std::vector<double>, 2> mean;
  std::array<std::vector<double>, 2> var;
  std::array<double, 2> log_prior{};
};

inline constexpr double kVarianceFloor = 1e-9;

inline GaussianNBModel fit_gnb(const LabeledMatrix& data) {
  const std::size_t d = data.x.cols();
  GaussianNBModel m;
  std::array<std::size_t, 2> n{};
  for (std::size_t c = 0; c < 2; ++c) {
    m.mean[c].assign(d, 0.0);
    m.var[c].assign(d, 0.0);
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    ++n[data.y[i]];
    for (std::size_t j = 0; j < d; ++j) m.mean[data.y[i]][j] += data.x(i, j);
  }
  for (std::size_t c = 0; c < 2; ++c)
    for (double& v : m.mean[c]) v /= static_cast<double>(n[c]);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double dev = data.x(i, j) - m.mean[data.y[i]][j];
      m.var[data.y[i]][j] += dev * dev;
    }
  }
  for (std::size_t c = 0; c < 2; ++c) {
    for (double& v : m.var[c]) v = std::max(v / static_cast<double>(n[c]), kVarianceFloor);
    m.log_prior[c] = std::log(static_cast<double>(n[c]) / static_cast<double>(data.size()));
  }
  return m;
}

inline double gnb_prob(const GaussianNBModel& m, std::span<const double> x) {
  std::array<double, 2> joint{};
  for (std::size_t c = 0; c < 2; ++c) {
    double s = m.log_prior[c];
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double dev = x[j] - m.mean[c][j];
      s -= 0.5 * std::log(2.0 * std::numbers::pi * m.var[c][j]) + dev * dev / (2.0 * m.var[c][j]);
    }
    joint[c] = s;
  }
  return sigmoid(joint[1] - joint[0]);
}

// ---------------------------------------------------------------------------
// k-NN

struct KnnModel {
  LabeledMatrix train;
  std::size_t k = 5;
};

/// Fraction of anomalous labels among the k nearest training rows (Euclidean);
/// equal distances are broken by the lower training index.
inline double knn_prob(const KnnModel& m, std::span<const double> x) {
  const std::size_t n = m.train.size();
  const std::size_t k = std::min(m.k, n);
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    const auto row = m.train.x.row(i);
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double d = row[j] - x[j];
      s += d * d;
    }
    dist[i] = {s, i};
  }
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k - 1), dist.end());
  std::size_t pos = 0;
  for (std::size_t i = 0; i < k; ++i) pos += m.train.y[dist[i].second];
  return static_cast<double>(pos) / static_cast<double>(k);
}

// ---------------------------------------------------------------------------
// CART

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  double prob = 0.0;  // anomalous fraction of the training rows reaching the node
};

struct DecisionTreeModel {
  std::vector<TreeNode> nodes;

  double prob(std::span<const double> x) const {
    std::size_t i = 0;
    while (nodes[i].feature >= 0) {
      i = static_cast<std::size_t>(x[static_cast<std::size_t>(nodes[i].feature)] <= nodes[i].threshold ? nodes[i].left
                                                                                                        : nodes[i].right);
    }
    return nodes[i].prob;
  }

  std::size_t depth() const {
    std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
    std::size_t best = 0;
    while (!stack.empty()) {
      auto [i, d] = stack.back();
      stack.pop_back();
      best = std::max(best, d);
      if (nodes[i].feature >= 0) {
        stack.emplace_back(static_cast<std::size_t>(nodes[i].left), d + 1);
        stack.emplace_back(static_cast<std::size_t>(nodes[i].right), d + 1);
      }
    }
    return best;
  }
};

/// Size-weighted Gini impurity of a split, up to a constant factor of 2/n:
/// pos_l*neg_l/n_l + pos_r*neg_r/n_r.
inline double split_impurity(std::size_t pos_l, std::size_t n_l, std::size_t pos_r, std::size_t n_r) noexcept {
  const double l = static_cast<double>(pos_l) * static_cast<double>(n_l - pos_l) / static_cast<double>(n_l);
  const double r = static_cast<double>(pos_r) * static_cast<double>(n_r - pos_r) / static_cast<double>(n_r);
  return l + r;
}

/// split_impurity as the exact fraction num/den, so equal impurities compare
/// equal and the tie rule never depends on rounding.
struct SplitScore {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  static SplitScore of(std::uint64_t pos_l, std::uint64_t n_l, std::uint64_t pos_r, std::uint64_t n_r) noexcept {
    return {pos_l * (n_l - pos_l) * n_r + pos_r * (n_r - pos_r) * n_l, n_l * n_r};
  }
  friend bool operator<(const SplitScore& a, const SplitScore& b) noexcept {
    return static_cast<unsigned __int128>(a.num) * b.den < static_cast<unsigned __int128>(b.num) * a.den;
  }
};

namespace detail {

// Grows a CART tree over `rows` (duplicates allowed, as in a bootstrap sample).
// At each node the best split over the candidate features minimises
// split_impurity; ties keep the earlier candidate feature and the lower threshold.
class TreeBuilder {
 public:
  TreeBuilder(const LabeledMatrix& data, const ClassifierConfig& cfg, std::size_t features_per_split, Rng* rng)
      : data_(data), cfg_(cfg), features_per_split_(features_per_split), rng_(rng) {}

  DecisionTreeModel build(std::vector<std::size_t> rows) {
    model_.nodes.clear();
    grow(rows, 0);
    return std::move(model_);
  }

 private:
  std::size_t grow(std::vector<std::size_t>& rows, std::size_t depth) {
    const std::size_t id = model_.nodes.size();
    model_.nodes.emplace_back();
    std::size_t pos = 0;
    for (std::size_t r : rows) pos += data_.y[r];
    const std::size_t n = rows.size();
    model_.nodes[id].prob = static_cast<double>(pos) / static_cast<double>(n);
    if (pos == 0 || pos == n || depth >= cfg_.max_depth || n < 2 * cfg_.min_leaf) return id;

    const std::size_t d = data_.x.cols();
    std::vector<std::size_t> candidates(d);
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});
    if (features_per_split_ < d) {
      // Partial Fisher-Yates, then ascending order so ties resolve like the full search.
      for (std::size_t i = 0; i < features_per_split_; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng_->below(d - i));
        std::swap(candidates[i], candidates[j]);
      }
      candidates.resize(features_per_split_);
      std::sort(candidates.begin(), candidates.end());
    }

    bool found = false;
    SplitScore best_score;
    std::size_t best_feature = 0;
    double best_threshold = 0.0;
    std::vector<std::pair<double, std::uint8_t>> vals(n);
    for (std::size_t f : candidates) {
      for (std::size_t i = 0; i < n; ++i) vals[i] = {data_.x(rows[i], f), data_.y[rows[i]]};
      std::sort(vals.begin(), vals.end());
      std::size_t pos_l = 0;
      for (std::size_t i = 0; i + 1 < n; ++i) {
        pos_l += vals[i].second;
        if (vals[i].first == vals[i + 1].first) continue;
        const std::size_t n_l = i + 1;
        const std::size_t n_r = n - n_l;
        if (n_l < cfg_.min_leaf || n_r < cfg_.min_leaf) continue;
        const SplitScore score = SplitScore::of(pos_l, n_l, pos - pos_l, n_r);
        if (!found || score < best_score) {
          found = true;
          best_score = score;
          best_feature = f;
          best_threshold = vals[i].first + (vals[i + 1].first - vals[i].first) / 2.0;
        }
      }
    }
    if (!found) return id;

    std::vector<std::size_t> left, right;
    for (std::size_t r : rows) (data_.x(r, best_feature) <= best_threshold ? left : right).push_back(r);
    rows.clear();
    rows.shrink_to_fit();
    const std::size_t l = grow(left, depth + 1);
    const std::size_t r = grow(right, depth + 1);
    auto& node = model_.nodes[id];
    node.feature = static_cast<int>(best_feature);
    node.threshold = best_threshold;
    node.left = static_cast<std::int32_t>(l);
    node.right = static_cast<std::int32_t>(r);
    return id;
  }

  const LabeledMatrix& data_;
  const ClassifierConfig& cfg_;
  std::size_t features_per_split_;
  Rng* rng_;
  DecisionTreeModel model_;
};

}  // namespace detail

inline DecisionTreeModel fit_tree(const LabeledMatrix& data, const ClassifierConfig& cfg) {
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return detail::TreeBuilder(data, cfg, data.x.cols(), nullptr).build(std::move(rows));
}

// ---------------------------------------------------------------------------
// Random forest

struct RandomForestModel {
  std::vector<DecisionTreeModel> trees;

  /// Fraction of trees whose leaf votes Anomalous (leaf fraction > 0.5).
  double prob(std::span<const double> x) const {
    std::size_t votes = 0;
    for (const auto& t : trees) votes += t.prob(x) > 0.5;
    return static_cast<double>(votes) / static_cast<double>(trees.size());
  }
};

/// Tree t uses the generator derive_seed(cfg.seed, t) for both its bootstrap
/// sample and its feature subsets, so results do not depend on `threads`.
inline RandomForestModel fit_forest(const LabeledMatrix& data, const ClassifierConfig& cfg, std::size_t threads = 0) {
  RandomForestModel forest;
  forest.trees.resize(cfg.n_trees);
  const std::size_t n = data.size();
  auto fit_one = [&](std::size_t t) {
    Rng rng(derive_seed(cfg.seed, t));
    std::vector<std::size_t> rows(n);
    if (cfg.bootstrap) {
      for (auto& r : rows) r = static_cast<std::size_t>(rng.below(n));
    } else {
      std::iota(rows.begin(), rows.end(), std::size_t{0});
    }
    const std::size_t fps = std::min(cfg.features_per_split, data.x.cols());
    forest.trees[t] = detail::TreeBuilder(data, cfg, fps, &rng).build(std::move(rows));
  };
  if (threads <= 1) {
    for (std::size_t t = 0; t < cfg.n_trees; ++t) fit_one(t);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t t = w; t < cfg.n_trees; t += threads) fit_one(t);
      });
    }
    for (auto& th : pool) th.join();
  }
  return forest;
}

// ---------------------------------------------------------------------------
// MLP

inline std::vector<LayerSpec> mlp_topology(std::size_t inputs, std::size_t hidden) {
  return {{inputs, hidden, Activation::ELU}, {hidden, 1, Activation::Sigmoid}};
}

/// Mini-batch Adam on binary cross-entropy; the sigmoid output makes the
/// pre-activation gradient simply p - y.
inline Network fit_mlp(const LabeledMatrix& data, const ClassifierConfig& cfg) {
  const auto specs = mlp_topology(data.x.cols(), cfg.hidden_units);
  Network net = init_network(specs, cfg.seed);
  Rng rng(derive_seed(cfg.seed, 1));
  AdamState adam = AdamState::for_network(net, cfg.mlp_lr);
  Gradients grads = zero_gradients(net);
  ForwardCache cache;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.mlp_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.mlp_batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.mlp_batch);
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (auto& g : grads) {
        std::fill(g.weights.data().begin(), g.weights.data().end(), 0.0);
        std::fill(g.biases.begin(), g.biases.end(), 0.0);
      }
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t i = order[k];
        forward_into(net, data.x.row(i), cache);
        const double delta = cache.output()[0] - static_cast<double>(data.y[i]);
        backprop_preactivation(net, cache, std::span<const double>(&delta, 1), grads, scale);
      }
      adam_step(adam, net, grads);
    }
  }
  return net;
}

// ---------------------------------------------------------------------------
// Unified model

using ClassifierParams =
    std::variant<LogRegModel, GaussianNBModel, KnnModel, DecisionTreeModel, RandomForestModel, Network>;

struct ClassifierModel {
  ClassifierConfig config;
  ClassifierParams params;
  /// Scaler the training features were transformed with; inputs to predict()
  /// must already be scaled with it.
  MinMaxScaler scaler;
};

/// Fits `cfg.kind` on scaled, labeled data containing both classes.
inline ClassifierModel train_classifier(const ClassifierConfig& cfg, const Dataset& train, std::size_t threads = 0) {
  cfg.validate();
  if (train.empty()) throw InsufficientDataError("empty classifier training set");
  const LabeledMatrix data = to_labeled(train);
  const auto pos = static_cast<std::size_t>(std::count(data.y.begin(), data.y.end(), std::uint8_t{1}));
  if (pos == 0 || pos == data.size()) throw DegenerateLabelsError("training set contains a single class");

  ClassifierModel model{cfg, LogRegModel{}, MinMaxScaler{}};
  switch (cfg.kind) {
    case ClassifierKind::LogReg: model.params = fit_logreg(data, cfg); break;
    case ClassifierKind::GaussianNB: model.params = fit_gnb(data); break;
    case ClassifierKind::Knn: model.params = KnnModel{data, cfg.k}; break;
    case ClassifierKind::DecisionTree: model.params = fit_tree(data, cfg); break;
    case ClassifierKind::RandomForest: model.params = fit_forest(data, cfg, threads); break;
    case ClassifierKind::Mlp: model.params = fit_mlp(data, cfg); break;
  }
  return model;
}

/// Probability of Anomalous for a scaled sample.
inline double predict_prob(const ClassifierModel& model, std::span<const double> x) {
  if (x.size() != kChannels) throw ShapeError("predict expects a 7-channel sample");
  return std::visit(
      [&](const auto& p) -> double {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, LogRegModel>) {
          double z = p.b;
          for (std::size_t j = 0; j < p.w.size(); ++j) z += p.w[j] * x[j];
          return sigmoid(z);
        } else if constexpr (std::is_same_v<T, GaussianNBModel>) {
          return gnb_prob(p, x);
        } else if constexpr (std::is_same_v<T, KnnModel>) {
          return knn_prob(p, x);
        } else if constexpr (std::is_same_v<T, Network>) {
          ForwardCache cache;
          forward_into(p, x, cache);
          return cache.output()[0];
        } else {
          return p.prob(x);
        }
      },
      model.params);
}

/// Anomalous iff prob > 0.5.
inline Decision predict(const ClassifierModel& model, std::span<const double> x) {
  const double p = predict_prob(model, x);
  return {p > 0.5 ? Label::Anomalous : Label::Normal, p};
}

inline Decision predict_raw(const ClassifierModel& model, const Features& raw) {
  const Features x = model.scaler.transform(raw);
  return predict(model, x);
}

// ---------------------------------------------------------------------------
// Cross-validation and selection

/// Stratified fold index per sample. Within each class the members are shuffled
/// and dealt round-robin; each class starts where the previous one stopped so
/// overall fold sizes also stay within one of each other.
inline std::vector<std::size_t> stratified_folds(std::span<const Label> labels, std::size_t folds,
                                                 std::uint64_t seed) {
  if (folds < 2) throw DomainError("need at least 2 folds");
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  for (std::size_t c = 0; c < 2; ++c) {
    if (by_class[c].size() < folds) {
      throw StratificationError(std::string("class '") + std::string(to_string(static_cast<Label>(c))) + "' has " +
                                std::to_string(by_class[c].size()) + " members, fewer than " +
                                std::to_string(folds) + " folds");
    }
  }
  Rng rng(seed);
  std::vector<std::size_t> fold_of(labels.size());
  std::size_t offset = 0;
  for (auto& members : by_class) {
    rng.shuffle(members);
    for (std::size_t i = 0; i < members.size(); ++i) fold_of[members[i]] = (i + offset) % folds;
    offset = (offset + members.size()) % folds;
  }
  return fold_of;
}

struct CvResult {
  double mean_f1 = 0.0;
  std::vector<double> fold_f1;
};

inline CvResult cross_validate(const ClassifierConfig& cfg, const Dataset& train, std::size_t folds,
                               std::uint64_t seed, std::size_t threads = 0) {
  if (!train.fully_labeled()) throw MissingLabelsError("cross-validation needs labels");
  std::vector<Label> labels;
  labels.reserve(train.size());
  for (const auto& s : train.samples) labels.push_back(*s.label);
  const auto fold_of = stratified_folds(labels, folds, seed);

  CvResult out;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> fit_idx, held_idx;
    for (std::size_t i = 0; i < train.size(); ++i) (fold_of[i] == f ? held_idx : fit_idx).push_back(i);
    const Dataset held = train.subset(held_idx);
    const ClassifierModel model = train_classifier(cfg, train.subset(fit_idx), threads);
    std::vector<Label> pred, truth;
    for (const auto& s : held.samples) {
      pred.push_back(predict(model, s.features).label);
      truth.push_back(*s.label);
    }
    out.fold_f1.push_back(metrics(confusion(pred, truth)).f1);
  }
  out.mean_f1 = std::accumulate(out.fold_f1.begin(), out.fold_f1.end(), 0.0) / static_cast<double>(folds);
  return out;
}

struct SelectionResult {
  std::size_t best_index = 0;
  ClassifierModel model;
  /// One entry per candidate; empty when there was a single candidate and no
  /// cross-validation was needed.
  std::vector<CvResult> cv;
};

/// Highest mean CV F1 wins; ties go to the earliest candidate. The winner is
/// refit on all of `train`.
inline SelectionResult select_model(std::span<const ClassifierConfig> candidates, const Dataset& train,
                                    std::size_t folds, std::uint64_t seed, std::size_t threads = 0) {
  if (candidates.empty()) throw ConfigError("select_model needs at least one candidate");
  SelectionResult out;
  if (candidates.size() > 1) {
    double best = -1.0;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      out.cv.push_back(cross_validate(candidates[c], train, folds, seed, threads));
      if (out.cv.back().mean_f1 > best) {
        best = out.cv.back().mean_f1;
        out.best_index = c;
      }
    }
  }
  out.model = train_classifier(candidates[out.best_index], train, threads);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kClassifierFormatVersion = 1;

inline nlohmann::json to_json(const ClassifierConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"seed", c.seed},
          {"l2", c.l2},
          {"logreg_lr", c.logreg_lr},
          {"logreg_epochs", c.logreg_epochs},
          {"k", c.k},
          {"max_depth", c.max_depth},
          {"min_leaf", c.min_leaf},
          {"n_trees", c.n_trees},
          {"features_per_split", c.features_per_split},
          {"bootstrap", c.bootstrap},
          {"hidden_units", c.hidden_units},
          {"mlp_lr", c.mlp_lr},
          {"mlp_epochs", c.mlp_epochs},
          {"mlp_batch", c.mlp_batch}};
}

inline ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.kind = classifier_kind_from_string(j.at("kind").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.l2 = j.at("l2").get<double>();
  c.logreg_lr = j.at("logreg_lr").get<double>();
  c.logreg_epochs = j.at("logreg_epochs").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.max_depth = j.at("max_depth").get<std::size_t>();
  c.min_leaf = j.at("min_leaf").get<std::size_t>();
  c.n_trees = j.at("n_trees").get<std::size_t>();
  c.features_per_split = j.at("features_per_split").get<std::size_t>();
  c.bootstrap = j.at("bootstrap").get<bool>();
  c.hidden_units = j.at("hidden_units").get<std::size_t>();
  c.mlp_lr = j.at("mlp_lr").get<double>();
  c.mlp_epochs = j.at("mlp_epochs").get<std::size_t>();
  c.mlp_batch = j.at("mlp_batch").get<std::size_t>();
  return c;
}

namespace detail {

inline nlohmann::json tree_to_json(const DecisionTreeModel& t) {
  std::vector<int> feature;
  std::vector<double> threshold, prob;
  std::vector<std::int32_t> left, right;
  for (const auto& n : t.nodes) {
    feature.push_back(n.feature);
    threshold.push_back(n.threshold);
    left.push_back(n.left);
    right.push_back(n.right);
    prob.push_back(n.prob);
  }
  return {{"feature", feature}, {"threshold", threshold}, {"left", left}, {"right", right}, {"prob", prob}};
}

inline DecisionTreeModel tree_from_json(const nlohmann::json& j) {
  const auto feature = j.at("feature").get<std::vector<int>>();
  const auto threshold = j.at("threshold").get<std::vector<double>>();
  const auto left = j.at("left").get<std::vector<std::int32_t>>();
  const auto right = j.at("right").get<std::vector<std::int32_t>>();
  const auto prob = j.at("prob").get<std::vector<double>>();
  const std::size_t n = feature.size();
  if (n == 0 || threshold.size() != n || left.size() != n || right.size() != n || prob.size() != n) {
    throw SchemaError("tree arrays must be non-empty and equally long");
  }
  DecisionTreeModel t;
  for (std::size_t i = 0; i < n; ++i) {
    if (feature[i] >= 0 && (feature[i] >= static_cast<int>(kChannels) || left[i] <= static_cast<std::int32_t>(i) ||
                            right[i] <= static_cast<std::int32_t>(i) || left[i] >= static_cast<std::int32_t>(n) ||
                            right[i] >= static_cast<std::int32_t>(n))) {
      throw SchemaError("malformed tree node " + std::to_string(i));
    }
    t.nodes.push_back({feature[i], threshold[i], left[i], right[i], prob[i]});
  }
  return t;
}

}  // namespace detail

inline nlohmann::json to_json(const ClassifierModel& m) {
  nlohmann::json params = std::visit(
      [](const auto& p) -> nlohmann::json {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, LogRegModel>) {
          return {{"w", p.w}, {"b", p.b}};
        } else if constexpr (std::is_same_v<T, GaussianNBModel>) {
          return {{"mean", p.mean}, {"var", p.var}, {"log_prior", p.log_prior}};
        } else if constexpr (std::is_same_v<T, KnnModel>) {
          return {{"k", p.k}, {"x", p.train.x.data()}, {"y", p.train.y}};
        } else if constexpr (std::is_same_v<T, DecisionTreeModel>) {
          return detail::tree_to_json(p);
        } else if constexpr (std::is_same_v<T, RandomForestModel>) {
          nlohmann::json trees = nlohmann::json::array();
          for (const auto& t : p.trees) trees.push_back(detail::tree_to_json(t));
          return {{"trees", trees}};
        } else {
          return to_json(p);
        }
      },
      m.params);
  return {{"format_version", kClassifierFormatVersion},
          {"type", "classifier"},
          {"kind", to_string(m.config.kind)},
          {"config", to_json(m.config)},
          {"scaler", to_json(m.scaler)},
          {"params", params}};
}

inline ClassifierModel classifier_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kClassifierFormatVersion) {
      throw SchemaError("unsupported classifier format_version");
    }
    if (j.at("type").get<std::string>() != "classifier") throw SchemaError("file is not a classifier model");
    ClassifierModel m;
    m.config = classifier_config_from_json(j.at("config"));
    if (to_string(m.config.kind) != j.at("kind").get<std::string>()) throw SchemaError("kind tag disagrees with config");
    m.scaler = scaler_from_json(j.at("scaler"));
    const auto& p = j.at("params");
    switch (m.config.kind) {
      case ClassifierKind::LogReg:
        m.params = LogRegModel{p.at("w").get<std::vector<double>>(), p.at("b").get<double>()};
        break;
      case ClassifierKind::GaussianNB: {
        GaussianNBModel g;
        g.mean = p.at("mean").get<std::array<std::vector<double>, 2>>();
        g.var = p.at("var").get<std::array<std::vector<double>, 2>>();
        g.log_prior = p.at("log_prior").get<std::array<double, 2>>();
        m.params = g;
        break;
      }
      case ClassifierKind::Knn: {
        auto x = p.at("x").get<std::vector<double>>();
        auto y = p.at("y").get<std::vector<std::uint8_t>>();
        if (x.size() != y.size() * kChannels || y.empty()) throw SchemaError("k-NN training data shape mismatch");
        const std::size_t n = y.size();
        m.params = KnnModel{LabeledMatrix{Matrix(n, kChannels, std::move(x)), std::move(y)}, p.at("k").get<std::size_t>()};
        break;
      }
      case ClassifierKind::DecisionTree: m.params = detail::tree_from_json(p); break;
      case ClassifierKind::RandomForest: {
        RandomForestModel f;
        for (const auto& t : p.at("trees")) f.trees.push_back(detail::tree_from_json(t));
        if (f.trees.empty()) throw SchemaError("forest without trees");
        m.params = std::move(f);
        break;
      }
      case ClassifierKind::Mlp: m.params = network_from_json(p); break;
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("classifier: ") + e.what());
  }
}

inline void save_classifier(const std::filesystem::path& path, const ClassifierModel& m) {
  write_json_file(path, to_json(m));
}

inline ClassifierModel load_classifier(const std::filesystem::path& path) {
  return classifier_from_json(read_json_file(path));
}

}  // namespace aeromon
