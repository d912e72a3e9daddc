#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "support.hpp"

using namespace aeromon;
using Catch::Approx;

namespace {

ClassifierConfig config_for(ClassifierKind kind) {
  ClassifierConfig c;
  c.kind = kind;
  c.n_trees = 15;
  c.mlp_epochs = 40;
  c.mlp_batch = 32;
  return c;
}

// Scaled synthetic data: normals-only scaler, as the pipeline does it.
struct Scaled {
  Dataset train, test;
};

const Scaled& scaled_synth() {
  static const Scaled s = [] {
    const auto parts = split(generate_synthetic(test::small_synth(3000, 21)), 0.2, 0.1, 21);
    const auto scaler = fit_scaler(parts.ae_train);
    return Scaled{apply_scaler(scaler, parts.supervised_train), apply_scaler(scaler, parts.test)};
  }();
  return s;
}

std::vector<std::vector<double>> rows_of(const Dataset& d, std::size_t dims) {
  std::vector<std::vector<double>> out;
  for (const auto& s : d.samples) out.emplace_back(s.features.begin(), s.features.begin() + static_cast<long>(dims));
  return out;
}

std::vector<int> ys_of(const Dataset& d) {
  std::vector<int> out;
  for (const auto& s : d.samples) out.push_back(*s.label == Label::Anomalous);
  return out;
}

Features pad(const std::vector<double>& v) {
  Features f{};
  std::copy(v.begin(), v.end(), f.begin());
  return f;
}

// Small integer grid so duplicate coordinates and tied splits are common.
Dataset grid_points(Rng& rng, std::size_t n, std::size_t dims, double flip) {
  std::vector<std::vector<double>> rows;
  std::vector<int> ys;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> r(dims);
    double s = 0.0;
    for (double& v : r) {
      v = static_cast<double>(rng.below(8)) / 8.0;
      s += v;
    }
    int y = s > 0.45 * static_cast<double>(dims);
    if (rng.uniform() < flip) y = 1 - y;
    rows.push_back(r);
    ys.push_back(y);
  }
  if (std::count(ys.begin(), ys.end(), 1) == 0) ys[0] = 1;
  if (std::count(ys.begin(), ys.end(), 0) == 0) ys[0] = 0;
  return test::labeled_points(rows, ys);
}

}  // namespace

TEST_CASE("Gaussian naive Bayes on two separated 1-d clusters") {
  const Dataset d = test::labeled_points({{-1}, {0}, {1}, {9}, {10}, {11}}, {0, 0, 0, 1, 1, 1});
  auto cfg = config_for(ClassifierKind::GaussianNB);
  const auto m = train_classifier(cfg, d);
  CHECK(predict(m, pad({9.0})).label == Label::Anomalous);
  CHECK(predict(m, pad({9.0})).score > 0.99);
  CHECK(predict(m, pad({0.5})).label == Label::Normal);
  const auto& gnb = std::get<GaussianNBModel>(m.params);
  CHECK(gnb_prob(gnb, pad({5.0})) == Approx(0.5).margin(1e-9));
}

TEST_CASE("decision tree separates a 1-d threshold with one split") {
  const Dataset d = test::labeled_points({{0.1}, {0.2}, {0.3}, {0.7}, {0.8}, {0.9}}, {0, 0, 0, 1, 1, 1});
  const auto m = train_classifier(config_for(ClassifierKind::DecisionTree), d);
  const auto& tree = std::get<DecisionTreeModel>(m.params);
  CHECK(tree.nodes.size() == 3);
  CHECK(tree.nodes[0].feature == 0);
  CHECK(tree.nodes[0].threshold == Approx(0.5));
  for (const auto& s : d.samples) CHECK(predict(m, s.features).label == *s.label);
}

TEST_CASE("k-NN with k = 1 returns the nearest label") {
  const Dataset d = test::labeled_points({{0.0}, {1.0}}, {0, 1});
  auto cfg = config_for(ClassifierKind::Knn);
  cfg.k = 1;
  const auto m = train_classifier(cfg, d);
  const auto dec = predict(m, pad({0.1}));
  CHECK(dec.label == Label::Normal);
  CHECK(dec.score == 0.0);
  // Equidistant query: the lower training index wins.
  CHECK(predict(m, pad({0.5})).label == Label::Normal);
}

TEST_CASE("all-zero logistic regression sits exactly on the boundary") {
  ClassifierModel m{config_for(ClassifierKind::LogReg), LogRegModel{std::vector<double>(kChannels, 0.0), 0.0}, {}};
  const auto dec = predict(m, pad({0.3, 0.9}));
  CHECK(dec.score == 0.5);
  CHECK(dec.label == Label::Normal);
}

TEST_CASE("k-NN matches the brute-force oracle") {
  Rng rng(44);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 5 + rng.below(196), dims = 1 + rng.below(3);
    const Dataset d = grid_points(rng, n, dims, 0.2);
    const auto xs = rows_of(d, kChannels);
    const auto ys = ys_of(d);
    for (std::size_t k : {1u, 3u, 5u, 7u}) {
      auto cfg = config_for(ClassifierKind::Knn);
      cfg.k = k;
      const auto m = train_classifier(cfg, d);
      for (int q = 0; q < 10; ++q) {
        std::vector<double> query(kChannels, 0.0);
        for (std::size_t j = 0; j < dims; ++j) query[j] = static_cast<double>(rng.below(9)) / 8.0;
        CHECK(predict_prob(m, query) == oracle::brute_knn_prob(xs, ys, query, k));
      }
    }
  }
}

TEST_CASE("decision tree matches the exhaustive reference") {
  Rng rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t dims = 1 + static_cast<std::size_t>(trial % 2);
    const Dataset d = grid_points(rng, 20 + rng.below(80), dims, 0.15);
    auto cfg = config_for(ClassifierKind::DecisionTree);
    cfg.max_depth = 1 + rng.below(6);
    cfg.min_leaf = 1 + rng.below(3);
    const auto m = train_classifier(cfg, d);
    const auto xs = rows_of(d, kChannels);
    const auto ys = ys_of(d);
    const oracle::ReferenceTree ref(xs, ys, cfg.max_depth, cfg.min_leaf);
    for (int q = 0; q < 50; ++q) {
      std::vector<double> query(kChannels, 0.0);
      for (std::size_t j = 0; j < dims; ++j) query[j] = rng.uniform(-0.1, 1.1);
      CHECK(predict_prob(m, query) == ref.prob(query));
    }
    for (const auto& x : xs) CHECK(predict_prob(m, x) == ref.prob(x));
  }
}

TEST_CASE("property: a one-tree forest without bootstrap over all features is the plain tree") {
  Rng rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    const Dataset d = grid_points(rng, 120, 3, 0.1);
    auto tree_cfg = config_for(ClassifierKind::DecisionTree);
    tree_cfg.max_depth = 6;
    auto forest_cfg = tree_cfg;
    forest_cfg.kind = ClassifierKind::RandomForest;
    forest_cfg.n_trees = 1;
    forest_cfg.features_per_split = kChannels;
    forest_cfg.bootstrap = false;
    const auto tree = train_classifier(tree_cfg, d);
    const auto forest = train_classifier(forest_cfg, d);
    for (int q = 0; q < 100; ++q) {
      std::vector<double> x(kChannels, 0.0);
      for (std::size_t j = 0; j < 3; ++j) x[j] = rng.uniform();
      // The forest reports a vote fraction, which for one tree is its hard vote.
      CHECK(predict(forest, x).label == predict(tree, x).label);
      CHECK(predict_prob(forest, x) == (predict_prob(tree, x) > 0.5 ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("logistic regression gradient matches finite differences") {
  Rng rng(6);
  const LabeledMatrix data = to_labeled(grid_points(rng, 60, kChannels, 0.2));
  for (double l2 : {0.0, 0.3}) {
    LogRegModel m{std::vector<double>(kChannels), rng.normal()};
    for (double& w : m.w) w = rng.normal();
    const auto g = logreg_gradient(m, data, l2);
    REQUIRE(g.size() == kChannels + 1);
    const double h = 1e-6;
    for (std::size_t j = 0; j <= kChannels; ++j) {
      LogRegModel up = m, down = m;
      (j < kChannels ? up.w[j] : up.b) += h;
      (j < kChannels ? down.w[j] : down.b) -= h;
      const double fd = (logreg_objective(up, data, l2) - logreg_objective(down, data, l2)) / (2.0 * h);
      CHECK(oracle::rel_err(g[j], fd) < 1e-6);
    }
  }
}

TEST_CASE("stratified folds worked example") {
  std::vector<Label> labels(10, Label::Normal);
  labels.resize(20, Label::Anomalous);
  const auto fold_of = stratified_folds(labels, 5, 1);
  for (std::size_t f = 0; f < 5; ++f) {
    std::size_t n = 0, a = 0;
    for (std::size_t i = 0; i < 20; ++i) {
      if (fold_of[i] != f) continue;
      (labels[i] == Label::Normal ? n : a) += 1;
    }
    CHECK(n == 2);
    CHECK(a == 2);
  }
  CHECK_THROWS_AS(stratified_folds(std::vector<Label>(3, Label::Normal), 2, 1), StratificationError);
  CHECK_THROWS_AS(stratified_folds(labels, 1, 1), DomainError);
}

TEST_CASE("property: stratified folds partition the data with balanced classes") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t folds = 2 + rng.below(9);
    const std::size_t n_norm = folds + rng.below(200), n_anom = folds + rng.below(100);
    std::vector<Label> labels(n_norm, Label::Normal);
    labels.resize(n_norm + n_anom, Label::Anomalous);
    rng.shuffle(labels);
    const auto fold_of = stratified_folds(labels, folds, rng.next_u64());
    REQUIRE(fold_of.size() == labels.size());
    std::vector<std::size_t> per_norm(folds), per_anom(folds), total(folds);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      REQUIRE(fold_of[i] < folds);
      (labels[i] == Label::Normal ? per_norm : per_anom)[fold_of[i]] += 1;
      ++total[fold_of[i]];
    }
    for (const auto* v : {&per_norm, &per_anom, &total}) {
      const auto [lo, hi] = std::minmax_element(v->begin(), v->end());
      CHECK(*hi - *lo <= 1);
    }
  }
}

TEST_CASE("cross-validation on separable data") {
  std::vector<std::vector<double>> rows;
  std::vector<int> ys;
  for (int i = 0; i < 40; ++i) {
    rows.push_back({i < 20 ? 0.1 + 0.01 * i : 0.8 + 0.01 * i});
    ys.push_back(i >= 20);
  }
  const Dataset d = test::labeled_points(rows, ys);
  for (auto kind : {ClassifierKind::DecisionTree, ClassifierKind::Knn, ClassifierKind::GaussianNB}) {
    const auto cv = cross_validate(config_for(kind), d, 5, 3);
    CHECK(cv.fold_f1.size() == 5);
    CHECK(cv.mean_f1 == 1.0);
  }
  const auto& s = scaled_synth();
  const auto a = cross_validate(config_for(ClassifierKind::RandomForest), s.train, 3, 9);
  const auto b = cross_validate(config_for(ClassifierKind::RandomForest), s.train, 3, 9);
  CHECK(a.fold_f1 == b.fold_f1);
}

TEST_CASE("select_model") {
  const auto& s = scaled_synth();
  SECTION("a single candidate is fit directly") {
    const std::vector<ClassifierConfig> one{config_for(ClassifierKind::DecisionTree)};
    const auto r = select_model(one, s.train, 5, 1);
    CHECK(r.best_index == 0);
    CHECK(r.cv.empty());
  }
  SECTION("smoothing wins on label noise") {
    Rng rng(31);
    const Dataset noisy = grid_points(rng, 400, 2, 0.25);
    auto k1 = config_for(ClassifierKind::Knn), k15 = k1;
    k1.k = 1;
    k15.k = 15;
    const std::vector<ClassifierConfig> cands{k1, k15};
    const auto r = select_model(cands, noisy, 5, 2);
    REQUIRE(r.cv.size() == 2);
    CHECK(r.cv[1].mean_f1 > r.cv[0].mean_f1);
    CHECK(r.best_index == 1);
  }
  SECTION("ties go to the earliest candidate") {
    const auto c = config_for(ClassifierKind::DecisionTree);
    const std::vector<ClassifierConfig> cands{c, c};
    const auto r = select_model(cands, s.train, 3, 4);
    CHECK(r.cv[0].mean_f1 == r.cv[1].mean_f1);
    CHECK(r.best_index == 0);
  }
  CHECK_THROWS_AS(select_model(std::span<const ClassifierConfig>{}, s.train, 3, 1), ConfigError);
}

TEST_CASE("property: every model emits a probability consistent with its label") {
  const auto& s = scaled_synth();
  for (auto kind : kAllClassifierKinds) {
    const auto m = train_classifier(config_for(kind), s.train);
    for (const auto& sample : s.test.samples) {
      const auto dec = predict(m, sample.features);
      CHECK((dec.score >= 0.0 && dec.score <= 1.0));
      CHECK((dec.label == Label::Anomalous) == (dec.score > 0.5));
    }
  }
}

TEST_CASE("property: fitting is deterministic for a fixed seed") {
  const auto& s = scaled_synth();
  for (auto kind : kAllClassifierKinds) {
    const auto a = train_classifier(config_for(kind), s.train);
    const auto b = train_classifier(config_for(kind), s.train);
    CHECK(to_json(a).dump() == to_json(b).dump());
  }
}

TEST_CASE("forest output does not depend on the thread count") {
  const auto& s = scaled_synth();
  const auto cfg = config_for(ClassifierKind::RandomForest);
  const auto a = train_classifier(cfg, s.train, 1);
  const auto b = train_classifier(cfg, s.train, 3);
  CHECK(to_json(a).dump() == to_json(b).dump());
}

TEST_CASE("tree and forest fit the synthetic faults well") {
  const auto& s = scaled_synth();
  auto f1_of = [&](ClassifierKind kind) {
    const auto m = train_classifier(config_for(kind), s.train);
    return evaluate_model("clf", [&](const Features& f) { return predict(m, f); }, s.test).metrics.f1;
  };
  const double tree = f1_of(ClassifierKind::DecisionTree), forest = f1_of(ClassifierKind::RandomForest);
  INFO("tree " << tree << " forest " << forest);
  CHECK(tree > 0.85);
  CHECK(forest > 0.95);
  CHECK(forest >= tree);
}

TEST_CASE("classifier input validation") {
  const Dataset one_class = test::labeled_points({{0.1}, {0.2}, {0.3}}, {0, 0, 0});
  CHECK_THROWS_AS(train_classifier(config_for(ClassifierKind::DecisionTree), one_class), DegenerateLabelsError);
  auto even = config_for(ClassifierKind::Knn);
  even.k = 4;
  CHECK_THROWS_AS(even.validate(), DomainError);
  Dataset unlabeled = test::labeled_points({{0.1}, {0.9}}, {0, 1});
  unlabeled.samples[0].label.reset();
  CHECK_THROWS_AS(train_classifier(config_for(ClassifierKind::GaussianNB), unlabeled), MissingLabelsError);
  CHECK_THROWS_AS(classifier_kind_from_string("svm"), ConfigError);
  const auto m = train_classifier(config_for(ClassifierKind::GaussianNB), test::labeled_points({{0.1}, {0.9}}, {0, 1}));
  CHECK_THROWS_AS(predict_prob(m, std::vector<double>(3, 0.0)), ShapeError);
}

TEST_CASE("classifier serialization round trip") {
  const auto& s = scaled_synth();
  test::TempDir dir("clf");
  for (auto kind : kAllClassifierKinds) {
    const auto m = train_classifier(config_for(kind), s.train);
    const auto path = dir / (std::string(to_string(kind)) + ".json");
    save_classifier(path, m);
    const auto back = load_classifier(path);
    CHECK(back.config.describe() == m.config.describe());
    for (std::size_t i = 0; i < 100; ++i) {
      const auto& f = s.test.samples[i].features;
      CHECK(predict_prob(back, f) == predict_prob(m, f));
    }
  }
  auto j = read_json_file(dir / "knn.json");
  j["format_version"] = 99;
  CHECK_THROWS_AS(classifier_from_json(j), SchemaError);
}
