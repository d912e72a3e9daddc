#pragma once

// File-based pipeline stages and the end-to-end run: generate/load -> split ->
// autoencoder training -> threshold calibration -> baseline selection ->
// scoring -> evaluation -> comparison table.
//
// Every stage reads and writes plain files so each one can also be run on its
// own from the command line. Test labels live in their own file and are only
// read by the evaluation stage.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "aeromon/anomaly.hpp"
#include "aeromon/autoencoder.hpp"
#include "aeromon/baselines.hpp"
#include "aeromon/dataset.hpp"
#include "aeromon/error.hpp"
#include "aeromon/evaluation.hpp"

#ifndef AEROMON_VERSION
#define AEROMON_VERSION "0.0.0"
#endif

namespace aeromon {

namespace fs = std::filesystem;

inline constexpr std::string_view kToolkitVersion = AEROMON_VERSION;

using Logger = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Small file formats

/// `index,label` with labels as 0/1.
inline void write_labels_csv(const fs::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InsufficientDataError("cannot write " + path.string());
  out << "index,label\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data.samples[i].label) throw MissingLabelsError("sample " + std::to_string(i) + " has no label");
    out << i << ',' << (*data.samples[i].label == Label::Anomalous ? 1 : 0) << '\n';
  }
}

struct IndexedColumn {
  std::vector<std::size_t> index;
  std::vector<std::vector<std::string>> fields;
};

namespace detail {

inline IndexedColumn read_indexed_csv(const fs::path& path, const std::vector<std::string>& expected_header) {
  std::ifstream in(path);
  if (!in) throw InsufficientDataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InsufficientDataError(path.string() + " is empty");
  const auto header = split_fields(line);
  if (header.size() != expected_header.size()) throw SchemaError(path.string() + ": unexpected header");
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (lower(header[i]) != expected_header[i]) {
      throw SchemaError(path.string() + ": expected column '" + expected_header[i] + "', found '" +
                        std::string(header[i]) + "'");
    }
  }
  IndexedColumn out;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto f = split_fields(line);
    if (f.size() != header.size()) throw ParseError("wrong field count", row);
    std::size_t idx = 0;
    const auto [ptr, ec] = std::from_chars(f[0].data(), f[0].data() + f[0].size(), idx);
    if (ec != std::errc{} || ptr != f[0].data() + f[0].size()) throw ParseError("bad index '" + std::string(f[0]) + "'", row);
    if (idx != row - 1) throw ParseError("indices must be 0..n-1 in order", row);
    out.index.push_back(idx);
    out.fields.emplace_back(f.begin() + 1, f.end());
  }
  if (out.index.empty()) throw InsufficientDataError(path.string() + " has no rows");
  return out;
}

}  // namespace detail

inline std::vector<Label> read_labels_csv(const fs::path& path) {
  const auto t = detail::read_indexed_csv(path, {"index", "label"});
  std::vector<Label> labels;
  for (std::size_t r = 0; r < t.fields.size(); ++r) {
    const auto l = detail::parse_label(t.fields[r][0]);
    if (!l) throw ParseError("unrecognised label '" + t.fields[r][0] + "'", r + 1);
    labels.push_back(*l);
  }
  return labels;
}

/// `index,score,decision` with decision 0 (normal) / 1 (anomalous).
inline void write_scores_csv(const fs::path& path, std::span<const Decision> decisions) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InsufficientDataError("cannot write " + path.string());
  out << "index,score,decision\n";
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    out << i << ',' << detail::format_real(decisions[i].score) << ','
        << (decisions[i].label == Label::Anomalous ? 1 : 0) << '\n';
  }
}

inline std::vector<Decision> read_scores_csv(const fs::path& path) {
  const auto t = detail::read_indexed_csv(path, {"index", "score", "decision"});
  std::vector<Decision> out;
  for (std::size_t r = 0; r < t.fields.size(); ++r) {
    const auto score = detail::parse_real(t.fields[r][0]);
    const auto label = detail::parse_label(t.fields[r][1]);
    if (!score || !label) throw ParseError("bad score row", r + 1);
    out.push_back({*label, *score});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stages

inline void stage_generate(const SynthConfig& cfg, const fs::path& out_csv) {
  write_csv(out_csv, generate_synthetic(cfg), true);
}

struct SplitFiles {
  fs::path test_features, test_labels, supervised_train, ae_train, ae_val;

  static SplitFiles in(const fs::path& dir) {
    return {dir / "test_features.csv", dir / "test_labels.csv", dir / "supervised_train.csv", dir / "ae_train.csv",
            dir / "ae_val.csv"};
  }
  std::vector<fs::path> all() const { return {test_features, test_labels, supervised_train, ae_train, ae_val}; }
};

inline SplitFiles stage_split(const fs::path& data_csv, double test_fraction, double ae_val_fraction,
                              std::uint64_t seed, const fs::path& out_dir) {
  const Dataset data = load_csv(data_csv, true);
  const SplitResult parts = split(data, test_fraction, ae_val_fraction, seed);
  fs::create_directories(out_dir);
  const auto files = SplitFiles::in(out_dir);
  write_csv(files.test_features, parts.test, false);
  write_labels_csv(files.test_labels, parts.test);
  write_csv(files.supervised_train, parts.supervised_train, true);
  write_csv(files.ae_train, parts.ae_train, true);
  write_csv(files.ae_val, parts.ae_val, true);
  return files;
}

struct AeFiles {
  fs::path scaler, model, log, report;

  static AeFiles in(const fs::path& dir) {
    return {dir / "scaler.json", dir / "model.json", dir / "train_log.csv", dir / "train_report.json"};
  }
  std::vector<fs::path> all() const { return {scaler, model, log, report}; }
};

inline Dataset load_normals(const fs::path& csv) {
  Dataset d = load_csv(csv, true);
  if (d.count(Label::Anomalous) != 0) throw DegenerateLabelsError(csv.string() + " contains anomalous samples");
  return d;
}

/// Fits the normals-only scaler on the AE training rows, trains the 7-5-3-5-7
/// autoencoder and writes scaler, model, epoch log and report.
inline TrainReport stage_train_ae(const fs::path& ae_train_csv, const fs::path& ae_val_csv, const TrainConfig& cfg,
                                  const fs::path& out_dir, const Logger& log = {}) {
  const Dataset train_raw = load_normals(ae_train_csv);
  const Dataset val_raw = load_normals(ae_val_csv);
  const MinMaxScaler scaler = fit_scaler(train_raw);
  const Matrix train_m = to_matrix(apply_scaler(scaler, train_raw));
  const Matrix val_m = to_matrix(apply_scaler(scaler, val_raw));
  const auto topology = autoencoder_topology();
  Network net = init_network(topology, cfg.seed);
  auto result = train(std::move(net), train_m, val_m, cfg, [&](const EpochRecord& e) {
    if (log && (e.epoch == 1 || e.epoch % 10 == 0)) {
      log("  epoch " + std::to_string(e.epoch) + " train " + detail::format_real(e.train_mse) + " val " +
          detail::format_real(e.val_mse) + " lr " + detail::format_real(e.lr));
    }
  });
  fs::create_directories(out_dir);
  const auto files = AeFiles::in(out_dir);
  write_json_file(files.scaler, to_json(scaler));
  save_network(files.model, result.net);
  write_train_log(files.log, result.report);
  write_json_file(files.report, to_json(result.report));
  return result.report;
}

/// The scorer refers to the model file by a path relative to the scorer's own directory.
inline AnomalyScorer stage_calibrate(const fs::path& model_json, const fs::path& scaler_json,
                                     const fs::path& ae_train_csv, const ThresholdPolicy& policy,
                                     const fs::path& out_json) {
  const Network net = load_network(model_json);
  const MinMaxScaler scaler = scaler_from_json(read_json_file(scaler_json));
  const Dataset train_raw = load_normals(ae_train_csv);
  AnomalyScorer scorer = calibrate(net, scaler, train_raw, policy);
  const fs::path out_dir = out_json.parent_path().empty() ? fs::path(".") : out_json.parent_path();
  fs::create_directories(out_dir);
  const fs::path rel = fs::relative(fs::absolute(model_json), fs::absolute(out_dir));
  save_scorer(out_json, scorer, rel.generic_string());
  return scorer;
}

inline std::vector<Decision> stage_score_ae(const fs::path& scorer_json, const fs::path& features_csv,
                                            const fs::path& out_csv) {
  const AnomalyScorer scorer = load_scorer(scorer_json);
  const Dataset features = load_csv(features_csv, false);
  std::vector<Decision> decisions;
  decisions.reserve(features.size());
  for (const auto& s : features.samples) decisions.push_back(classify(scorer, s.features));
  write_scores_csv(out_csv, decisions);
  return decisions;
}

struct ClassifierStageOptions {
  std::vector<ClassifierConfig> candidates;
  bool cv = true;
  std::size_t folds = 5;
  std::uint64_t seed = 7;
  std::size_t threads = 0;
};

/// Fits the full-training-set scaler, selects among the candidates by
/// stratified CV (when `cv` and more than one candidate) and writes the refit
/// model plus a selection summary next to it.
inline ClassifierModel stage_train_clf(const fs::path& train_csv, const ClassifierStageOptions& opt,
                                       const fs::path& out_json) {
  if (opt.candidates.empty()) throw ConfigError("no classifier candidates");
  if (!opt.cv && opt.candidates.size() > 1) {
    throw ConfigError("several candidates given without cross-validation; enable --cv or pass single values");
  }
  const Dataset train_raw = load_csv(train_csv, true);
  const MinMaxScaler scaler = fit_scaler(train_raw);
  const Dataset train_scaled = apply_scaler(scaler, train_raw);
  SelectionResult sel = select_model(opt.candidates, train_scaled, opt.folds, opt.seed, opt.threads);
  sel.model.scaler = scaler;
  if (!out_json.parent_path().empty()) fs::create_directories(out_json.parent_path());
  save_classifier(out_json, sel.model);

  nlohmann::json summary = {{"selected", opt.candidates[sel.best_index].describe()},
                            {"selected_index", sel.best_index},
                            {"folds", opt.folds},
                            {"candidates", nlohmann::json::array()}};
  for (std::size_t c = 0; c < opt.candidates.size(); ++c) {
    nlohmann::json e = {{"config", opt.candidates[c].describe()}};
    if (!sel.cv.empty()) {
      e["mean_f1"] = sel.cv[c].mean_f1;
      e["fold_f1"] = sel.cv[c].fold_f1;
    }
    summary["candidates"].push_back(e);
  }
  fs::path sel_path = out_json;
  sel_path.replace_extension(".selection.json");
  write_json_file(sel_path, summary);
  return sel.model;
}

inline std::vector<Decision> stage_score_clf(const fs::path& model_json, const fs::path& features_csv,
                                             const fs::path& out_csv) {
  const ClassifierModel model = load_classifier(model_json);
  const Dataset features = load_csv(features_csv, false);
  std::vector<Decision> decisions;
  decisions.reserve(features.size());
  for (const auto& s : features.samples) decisions.push_back(predict_raw(model, s.features));
  write_scores_csv(out_csv, decisions);
  return decisions;
}

inline EvalReport stage_evaluate(const fs::path& scores_csv, const fs::path& labels_csv, const std::string& name,
                                 const fs::path& out_json) {
  const auto decisions = read_scores_csv(scores_csv);
  const auto truth = read_labels_csv(labels_csv);
  if (decisions.size() != truth.size()) {
    throw ShapeError("scores (" + std::to_string(decisions.size()) + ") and labels (" +
                     std::to_string(truth.size()) + ") differ in length");
  }
  std::vector<Label> pred;
  std::vector<double> scores;
  for (const auto& d : decisions) {
    pred.push_back(d.label);
    scores.push_back(d.score);
  }
  EvalReport r = evaluate_predictions(name, pred, scores, truth);
  if (!out_json.parent_path().empty()) fs::create_directories(out_json.parent_path());
  write_json_file(out_json, to_json(r));
  return r;
}

inline void stage_compare(std::span<const fs::path> report_jsons, const fs::path& out_csv) {
  std::vector<EvalReport> reports;
  for (const auto& p : report_jsons) reports.push_back(report_from_json(read_json_file(p)));
  write_comparison_csv(out_csv, reports);
}

inline void stage_histogram(const fs::path& data_csv, std::size_t bins, const fs::path& out_csv) {
  write_histograms_csv(out_csv, feature_histograms(load_csv(data_csv, true), bins));
}

// ---------------------------------------------------------------------------
// Configuration

/// Flat, typed key/value configuration. Keys are dotted names; unknown keys and
/// type mismatches are rejected. Exactly one of `data.csv` / `data.synthetic`
/// selects the data source.
class PipelineConfig {
 public:
  enum class Type { Int, Real, Bool, String, IntList, RealList, StringList };

  struct Key {
    Type type;
    nlohmann::json default_value;  // null: no default (optional or required)
  };

  static const std::map<std::string, Key>& schema() {
    using J = nlohmann::json;
    static const std::map<std::string, Key> s = {
        {"seed", {Type::Int, J(nullptr)}},
        {"data.csv", {Type::String, J(nullptr)}},
        {"data.synthetic", {Type::Bool, J(nullptr)}},
        {"synth.n_samples", {Type::Int, 20000}},
        {"synth.anomaly_fraction", {Type::Real, 0.40}},
        {"synth.seed", {Type::Int, J(nullptr)}},
        {"synth.oat_min", {Type::Real, -10.0}},
        {"synth.oat_max", {Type::Real, 35.0}},
        {"synth.demand_min", {Type::Real, 0.2}},
        {"synth.demand_max", {Type::Real, 1.0}},
        {"synth.noise_scale", {Type::Real, 1.0}},
        {"synth.torque_drop", {Type::Real, 14.0}},
        {"synth.mgt_drift", {Type::Real, 100.0}},
        {"synth.distortion", {Type::Real, 12.0}},
        {"synth.severity_spread", {Type::Real, 0.4}},
        {"synth.fault_weights", {Type::RealList, J::array({1.0, 1.0, 1.0})}},
        {"split.test_fraction", {Type::Real, 0.10}},
        {"split.ae_val_fraction", {Type::Real, 0.10}},
        {"split.seed", {Type::Int, J(nullptr)}},
        {"ae.max_epochs", {Type::Int, 200}},
        {"ae.batch_size", {Type::Int, 1024}},
        {"ae.early_stop_patience", {Type::Int, 25}},
        {"ae.plateau_patience", {Type::Int, 20}},
        {"ae.plateau_factor", {Type::Real, 0.2}},
        {"ae.min_lr", {Type::Real, 1e-6}},
        {"ae.learning_rate", {Type::Real, 1e-3}},
        {"ae.min_delta", {Type::Real, 1e-7}},
        {"ae.shuffle", {Type::Bool, true}},
        {"ae.seed", {Type::Int, J(nullptr)}},
        {"threshold.policy", {Type::String, "mahalanobis"}},
        {"threshold.percentile", {Type::Real, 85.0}},
        {"baselines.models", {Type::StringList, J::array({"logreg", "gnb", "knn", "tree", "forest", "mlp"})}},
        {"baselines.cv", {Type::Bool, true}},
        {"baselines.folds", {Type::Int, 5}},
        {"baselines.seed", {Type::Int, J(nullptr)}},
        {"baselines.logreg.l2", {Type::RealList, J::array({0.0, 0.01, 0.1, 1.0})}},
        {"baselines.logreg.lr", {Type::Real, 1.0}},
        {"baselines.logreg.epochs", {Type::Int, 500}},
        {"baselines.knn.k", {Type::IntList, J::array({5})}},
        {"baselines.tree.max_depth", {Type::IntList, J::array({32})}},
        {"baselines.tree.min_leaf", {Type::Int, 1}},
        {"baselines.forest.n_trees", {Type::Int, 100}},
        {"baselines.forest.features_per_split", {Type::Int, 3}},
        {"baselines.forest.max_depth", {Type::Int, 32}},
        {"baselines.forest.bootstrap", {Type::Bool, true}},
        {"baselines.mlp.hidden_units", {Type::IntList, J::array({8})}},
        {"baselines.mlp.lr", {Type::Real, 0.01}},
        {"baselines.mlp.epochs", {Type::Int, 60}},
        {"baselines.mlp.batch", {Type::Int, 256}},
        {"histogram.bins", {Type::Int, 50}},
        {"output.dir", {Type::String, "aeromon_out"}},
    };
    return s;
  }

  /// Validates `doc` against the schema and fills in defaults.
  static PipelineConfig from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    const auto& s = schema();
    for (const auto& [key, value] : doc.items()) {
      const auto it = s.find(key);
      if (it == s.end()) throw ConfigError("unknown config key '" + key + "'");
      check_type(key, it->second.type, value);
    }
    PipelineConfig cfg;
    for (const auto& [key, spec] : s) {
      if (doc.contains(key)) cfg.values_[key] = doc.at(key);
      else if (!spec.default_value.is_null()) cfg.values_[key] = spec.default_value;
    }
    if (!cfg.values_.contains("seed")) throw ConfigError("config key 'seed' is required");
    const bool has_csv = cfg.values_.contains("data.csv");
    const bool has_synth = cfg.values_.contains("data.synthetic") && cfg.values_.at("data.synthetic").get<bool>();
    if (has_csv == has_synth) {
      throw ConfigError("exactly one data source must be configured: 'data.csv' or 'data.synthetic': true");
    }
    if (has_csv) {
      for (const auto& [key, value] : doc.items()) {
        if (key.rfind("synth.", 0) == 0) throw ConfigError("'" + key + "' given but the data source is a CSV file");
      }
    }
    cfg.validate();
    return cfg;
  }

  static PipelineConfig load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    return from_json(doc);
  }

  /// Replaces the master seed (stage seeds given explicitly are kept).
  void override_seed(std::uint64_t seed) { values_["seed"] = seed; }
  void override_output(const fs::path& dir) { values_["output.dir"] = dir.string(); }

  /// Fully resolved document, defaults included.
  nlohmann::json resolved() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

  /// FNV-1a 64 of the resolved document; the output directory is excluded so
  /// the same experiment hashes the same wherever it is written.
  std::string hash() const {
    nlohmann::json j = resolved();
    j.erase("output.dir");
    const std::string text = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  bool synthetic() const { return !values_.contains("data.csv"); }
  fs::path csv_path() const { return get<std::string>("data.csv"); }
  fs::path output_dir() const { return get<std::string>("output.dir"); }
  std::uint64_t seed() const { return get<std::uint64_t>("seed"); }

  SynthConfig synth() const {
    SynthConfig c;
    c.n_samples = get<std::size_t>("synth.n_samples");
    c.anomaly_fraction = get<double>("synth.anomaly_fraction");
    c.seed = stage_seed("synth.seed", 1);
    c.oat_min = get<double>("synth.oat_min");
    c.oat_max = get<double>("synth.oat_max");
    c.demand_min = get<double>("synth.demand_min");
    c.demand_max = get<double>("synth.demand_max");
    c.noise_scale = get<double>("synth.noise_scale");
    c.torque_drop = get<double>("synth.torque_drop");
    c.mgt_drift = get<double>("synth.mgt_drift");
    c.distortion = get<double>("synth.distortion");
    c.severity_spread = get<double>("synth.severity_spread");
    const auto w = get<std::vector<double>>("synth.fault_weights");
    if (w.size() != 3) throw ConfigError("'synth.fault_weights' needs exactly 3 values");
    std::copy(w.begin(), w.end(), c.fault_weights.begin());
    return c;
  }

  double test_fraction() const { return get<double>("split.test_fraction"); }
  double ae_val_fraction() const { return get<double>("split.ae_val_fraction"); }
  std::uint64_t split_seed() const { return stage_seed("split.seed", 2); }

  TrainConfig train() const {
    TrainConfig t;
    t.max_epochs = get<std::size_t>("ae.max_epochs");
    t.batch_size = get<std::size_t>("ae.batch_size");
    t.early_stop_patience = get<std::size_t>("ae.early_stop_patience");
    t.plateau_patience = get<std::size_t>("ae.plateau_patience");
    t.plateau_factor = get<double>("ae.plateau_factor");
    t.min_lr = get<double>("ae.min_lr");
    t.learning_rate = get<double>("ae.learning_rate");
    t.min_delta = get<double>("ae.min_delta");
    t.shuffle_each_epoch = get<bool>("ae.shuffle");
    t.seed = stage_seed("ae.seed", 3);
    return t;
  }

  ThresholdPolicy policy() const {
    return {threshold_kind_from_string(get<std::string>("threshold.policy")), get<double>("threshold.percentile")};
  }

  std::vector<ClassifierKind> baseline_kinds() const {
    std::vector<ClassifierKind> kinds;
    for (const auto& s : get<std::vector<std::string>>("baselines.models")) {
      const auto k = classifier_kind_from_string(s);
      if (std::find(kinds.begin(), kinds.end(), k) != kinds.end()) throw ConfigError("duplicate baseline '" + s + "'");
      kinds.push_back(k);
    }
    return kinds;
  }

  /// Candidate grid for one classifier kind (the list-valued keys form the grid).
  std::vector<ClassifierConfig> candidates(ClassifierKind kind) const {
    ClassifierConfig base;
    base.kind = kind;
    base.seed = derive_seed(baseline_seed(), static_cast<std::uint64_t>(kind) + 10);
    base.logreg_lr = get<double>("baselines.logreg.lr");
    base.logreg_epochs = get<std::size_t>("baselines.logreg.epochs");
    base.min_leaf = get<std::size_t>("baselines.tree.min_leaf");
    base.mlp_lr = get<double>("baselines.mlp.lr");
    base.mlp_epochs = get<std::size_t>("baselines.mlp.epochs");
    base.mlp_batch = get<std::size_t>("baselines.mlp.batch");
    std::vector<ClassifierConfig> out;
    switch (kind) {
      case ClassifierKind::LogReg:
        for (double l2 : get<std::vector<double>>("baselines.logreg.l2")) {
          out.push_back(base);
          out.back().l2 = l2;
        }
        break;
      case ClassifierKind::GaussianNB: out.push_back(base); break;
      case ClassifierKind::Knn:
        for (auto k : get<std::vector<std::size_t>>("baselines.knn.k")) {
          out.push_back(base);
          out.back().k = k;
        }
        break;
      case ClassifierKind::DecisionTree:
        for (auto d : get<std::vector<std::size_t>>("baselines.tree.max_depth")) {
          out.push_back(base);
          out.back().max_depth = d;
        }
        break;
      case ClassifierKind::RandomForest:
        base.n_trees = get<std::size_t>("baselines.forest.n_trees");
        base.features_per_split = get<std::size_t>("baselines.forest.features_per_split");
        base.max_depth = get<std::size_t>("baselines.forest.max_depth");
        base.bootstrap = get<bool>("baselines.forest.bootstrap");
        out.push_back(base);
        break;
      case ClassifierKind::Mlp:
        for (auto h : get<std::vector<std::size_t>>("baselines.mlp.hidden_units")) {
          out.push_back(base);
          out.back().hidden_units = h;
        }
        break;
    }
    if (out.empty()) throw ConfigError("empty hyperparameter grid for '" + std::string(to_string(kind)) + "'");
    for (const auto& c : out) c.validate();
    return out;
  }

  bool baselines_cv() const { return get<bool>("baselines.cv"); }
  std::size_t folds() const { return get<std::size_t>("baselines.folds"); }
  std::uint64_t baseline_seed() const { return stage_seed("baselines.seed", 4); }
  std::size_t histogram_bins() const { return get<std::size_t>("histogram.bins"); }

 private:
  template <typename T>
  T get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config key '" + key + "' is not set");
    try {
      return it->second.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + key + "' has the wrong type");
    }
  }

  std::uint64_t stage_seed(const std::string& key, std::uint64_t stream) const {
    if (values_.contains(key)) return get<std::uint64_t>(key);
    return derive_seed(seed(), stream);
  }

  static void check_type(const std::string& key, Type t, const nlohmann::json& v) {
    auto fail = [&] { throw ConfigError("config key '" + key + "' has the wrong type"); };
    auto is_count = [](const nlohmann::json& x) { return x.is_number_unsigned() || (x.is_number_integer() && x.get<long long>() >= 0); };
    switch (t) {
      case Type::Int: if (!is_count(v)) fail(); break;
      case Type::Real: if (!v.is_number()) fail(); break;
      case Type::Bool: if (!v.is_boolean()) fail(); break;
      case Type::String: if (!v.is_string()) fail(); break;
      case Type::IntList:
        if (!v.is_array() || v.empty()) fail();
        for (const auto& x : v) if (!is_count(x)) fail();
        break;
      case Type::RealList:
        if (!v.is_array() || v.empty()) fail();
        for (const auto& x : v) if (!x.is_number()) fail();
        break;
      case Type::StringList:
        if (!v.is_array()) fail();
        for (const auto& x : v) if (!x.is_string()) fail();
        break;
    }
  }

  void validate() const {
    if (synthetic()) synth().validate();
    const double tf = test_fraction(), vf = ae_val_fraction();
    if (!(tf > 0.0 && tf < 1.0) || !(vf > 0.0 && vf < 1.0)) throw ConfigError("split fractions must lie in (0,1)");
    try {
      train().validate();
      policy().validate();
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
    if (folds() < 2) throw ConfigError("'baselines.folds' must be >= 2");
    if (histogram_bins() < 2) throw ConfigError("'histogram.bins' must be >= 2");
    for (auto k : baseline_kinds()) {
      try {
        const auto c = candidates(k);
        if (c.size() > 1 && !baselines_cv()) {
          throw ConfigError("grid for '" + std::string(to_string(k)) + "' has several values but 'baselines.cv' is false");
        }
      } catch (const DomainError& e) {
        throw ConfigError(e.what());
      }
    }
  }

  std::map<std::string, nlohmann::json> values_;
};

// ---------------------------------------------------------------------------
// Run

struct StageTiming {
  std::string name;
  double seconds = 0.0;
};

struct RunManifest {
  std::string config_hash;
  std::string toolkit_version{kToolkitVersion};
  nlohmann::json config;
  std::vector<std::string> files;  // relative to the output directory
  std::vector<StageTiming> stages;
  bool complete = false;
  std::string failed_stage;
  std::string error;

  /// Everything except timings, which are the only nondeterministic content.
  nlohmann::json to_json(bool with_timing = true) const {
    nlohmann::json j = {{"toolkit_version", toolkit_version},
                        {"config_hash", config_hash},
                        {"config", config},
                        {"status", complete ? "complete" : "failed"},
                        {"files", files}};
    if (!complete) {
      j["failed_stage"] = failed_stage;
      j["error"] = error;
    }
    if (with_timing) {
      nlohmann::json st = nlohmann::json::array();
      for (const auto& s : stages) st.push_back({{"stage", s.name}, {"seconds", s.seconds}});
      j["timing"] = st;
    }
    return j;
  }
};

/// Error raised by run_pipeline; carries the failing stage and keeps the
/// category of the underlying error.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const Error& cause)
      : Error(cause.category(), "stage '" + stage + "' failed: " + cause.what()), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Exclusive lock file in the output directory, removed on destruction.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".aeromon.lock") {
    std::FILE* f = std::fopen(path_.string().c_str(), "wx");
    if (!f) throw ConfigError("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

struct RunOptions {
  std::size_t threads = 0;
  Logger log;
};

/// Runs every stage into cfg.output_dir() and writes manifest.json there.
/// Identical configs give byte-identical outputs apart from the manifest's timing block.
inline RunManifest run_pipeline(const PipelineConfig& cfg, const RunOptions& opt = {}) {
  const fs::path out = cfg.output_dir();
  fs::create_directories(out);
  OutputLock lock(out);

  RunManifest manifest;
  manifest.config_hash = cfg.hash();
  manifest.config = cfg.resolved();
  manifest.config.erase("output.dir");

  auto note = [&](const std::string& msg) {
    if (opt.log) opt.log(msg);
  };
  auto add_file = [&](const fs::path& p) { manifest.files.push_back(fs::relative(p, out).generic_string()); };
  auto write_manifest = [&] { write_json_file(out / "manifest.json", manifest.to_json()); };
  auto stage = [&](const std::string& name, auto&& body) {
    note("[" + name + "]");
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body();
    } catch (const Error& e) {
      manifest.failed_stage = name;
      manifest.error = e.what();
      write_manifest();
      throw StageError(name, e);
    } catch (const std::exception& e) {
      manifest.failed_stage = name;
      manifest.error = e.what();
      write_manifest();
      throw StageError(name, Error(ErrorCategory::Data, e.what()));
    }
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    manifest.stages.push_back({name, dt.count()});
  };

  fs::path data_csv;
  stage(cfg.synthetic() ? "generate" : "load", [&] {
    if (cfg.synthetic()) {
      data_csv = out / "data.csv";
      stage_generate(cfg.synth(), data_csv);
      add_file(data_csv);
    } else {
      data_csv = cfg.csv_path();
      load_csv(data_csv, true);  // validate early
    }
  });

  SplitFiles split_files;
  stage("split", [&] {
    split_files = stage_split(data_csv, cfg.test_fraction(), cfg.ae_val_fraction(), cfg.split_seed(), out / "split");
    for (const auto& f : split_files.all()) add_file(f);
  });

  const AeFiles ae = AeFiles::in(out / "ae");
  stage("train-ae", [&] {
    const auto report = stage_train_ae(split_files.ae_train, split_files.ae_val, cfg.train(), out / "ae", opt.log);
    note("  epochs " + std::to_string(report.epochs_run) + ", best val MSE " + detail::format_real(report.best_val_loss));
    for (const auto& f : ae.all()) add_file(f);
  });

  const fs::path scorer_json = out / "ae" / "scorer.json";
  stage("calibrate", [&] {
    const auto scorer = stage_calibrate(ae.model, ae.scaler, split_files.ae_train, cfg.policy(), scorer_json);
    note("  threshold " + detail::format_real(scorer.threshold));
    add_file(scorer_json);
  });

  const auto kinds = cfg.baseline_kinds();
  std::vector<fs::path> clf_models;
  stage("train-clf", [&] {
    for (auto kind : kinds) {
      const fs::path model_path = out / "clf" / (std::string(to_string(kind)) + ".json");
      ClassifierStageOptions o{cfg.candidates(kind), cfg.baselines_cv(), cfg.folds(), cfg.baseline_seed(), opt.threads};
      note("  " + std::string(to_string(kind)) + " (" + std::to_string(o.candidates.size()) + " candidate(s))");
      stage_train_clf(split_files.supervised_train, o, model_path);
      clf_models.push_back(model_path);
      add_file(model_path);
      fs::path sel = model_path;
      add_file(sel.replace_extension(".selection.json"));
    }
  });

  std::vector<fs::path> score_files;
  stage("score", [&] {
    const fs::path ae_scores = out / "scores" / "ae.csv";
    fs::create_directories(ae_scores.parent_path());
    stage_score_ae(scorer_json, split_files.test_features, ae_scores);
    score_files.push_back(ae_scores);
    add_file(ae_scores);
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      const fs::path p = out / "scores" / (std::string(to_string(kinds[i])) + ".csv");
      stage_score_clf(clf_models[i], split_files.test_features, p);
      score_files.push_back(p);
      add_file(p);
    }
  });

  std::vector<fs::path> reports;
  stage("evaluate", [&] {
    const std::string ae_name = std::string("Autoencoder (") + std::string(to_string(cfg.policy().kind)) + ")";
    std::vector<std::string> names{ae_name};
    std::vector<std::string> stems{"ae"};
    for (auto k : kinds) {
      names.emplace_back(display_name(k));
      stems.emplace_back(to_string(k));
    }
    for (std::size_t i = 0; i < score_files.size(); ++i) {
      const fs::path p = out / "reports" / (stems[i] + ".json");
      const auto r = stage_evaluate(score_files[i], split_files.test_labels, names[i], p);
      note("  " + names[i] + ": P " + detail::format_real(r.metrics.precision) + " R " +
           detail::format_real(r.metrics.recall) + " F1 " + detail::format_real(r.metrics.f1));
      reports.push_back(p);
      add_file(p);
    }
  });

  stage("compare", [&] {
    // Supervised rows first, autoencoder last, mirroring the usual comparison layout.
    std::vector<fs::path> ordered(reports.begin() + 1, reports.end());
    ordered.push_back(reports.front());
    stage_compare(ordered, out / "comparison.csv");
    add_file(out / "comparison.csv");
  });

  stage("histogram", [&] {
    stage_histogram(data_csv, cfg.histogram_bins(), out / "histograms.csv");
    add_file(out / "histograms.csv");
  });

  manifest.complete = true;
  write_manifest();
  return manifest;
}

}  // namespace aeromon
