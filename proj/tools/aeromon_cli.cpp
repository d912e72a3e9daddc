// aeromon: command-line front end for the anomaly-detection pipeline.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aeromon/aeromon.hpp"

namespace {

using namespace aeromon;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  bool quiet = false;
};

std::size_t threads_from_env() {
  const char* v = std::getenv("AEROMON_THREADS");
  if (!v || !*v) return 0;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 0) throw ConfigError(std::string("AEROMON_THREADS must be a non-negative integer, got '") + v + "'");
  return static_cast<std::size_t>(n);
}

std::optional<PipelineConfig> maybe_config(const Globals& g) {
  if (g.config.empty()) return std::nullopt;
  auto cfg = PipelineConfig::load(g.config);
  if (g.seed) cfg.override_seed(*g.seed);
  return cfg;
}

Logger make_logger(const Globals& g) {
  if (g.quiet) return {};
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

fs::path out_dir(const Globals& g) {
  fs::path p = g.out;
  fs::create_directories(p);
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aeromon - autoencoder anomaly detection and supervised baselines for engine telemetry"};
  app.set_version_flag("--version", std::string(kToolkitVersion));
  app.require_subcommand(1);

  Globals g;
  app.add_option("--config", g.config, "Pipeline configuration (flat JSON key/value document)");
  app.add_option("--seed", g.seed, "Override the configuration's master seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");

  // generate
  auto* gen = app.add_subcommand("generate", "Write seeded synthetic telemetry to <out>/data.csv");
  std::optional<std::size_t> gen_n;
  std::optional<double> gen_fraction;
  gen->add_option("--n", gen_n, "Number of samples (default 20000 or synth.n_samples)");
  gen->add_option("--fraction", gen_fraction, "Anomalous fraction (default 0.40)");

  // split
  auto* spl = app.add_subcommand("split", "Stratified test holdout plus normal-only AE train/validation parts");
  std::string split_data;
  double test_fraction = 0.10, ae_val_fraction = 0.10;
  spl->add_option("--data", split_data, "Labeled CSV")->required();
  spl->add_option("--test-fraction", test_fraction)->capture_default_str();
  spl->add_option("--ae-val-fraction", ae_val_fraction)->capture_default_str();

  // train-ae
  auto* tae = app.add_subcommand("train-ae", "Train the 7-5-3-5-7 autoencoder on normal samples");
  std::string tae_train, tae_val;
  std::optional<std::size_t> tae_epochs, tae_batch;
  std::optional<double> tae_lr;
  tae->add_option("--train", tae_train, "AE training CSV (normal samples)")->required();
  tae->add_option("--val", tae_val, "AE validation CSV (normal samples)")->required();
  tae->add_option("--epochs", tae_epochs, "Maximum epochs (default 200)");
  tae->add_option("--batch-size", tae_batch, "Mini-batch size (default 1024)");
  tae->add_option("--lr", tae_lr, "Initial learning rate (default 0.001)");

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Calibrate the anomaly threshold on healthy training data");
  std::string cal_model, cal_scaler, cal_train, cal_policy = "mahalanobis";
  double cal_percentile = 85.0;
  cal->add_option("--model", cal_model)->required();
  cal->add_option("--scaler", cal_scaler)->required();
  cal->add_option("--train", cal_train, "AE training CSV")->required();
  cal->add_option("--policy", cal_policy, "mse | mahalanobis")->capture_default_str();
  cal->add_option("--percentile", cal_percentile)->capture_default_str();

  // score
  auto* sco = app.add_subcommand("score", "Score a feature-only CSV; writes index,score,decision");
  std::string sco_scorer, sco_clf, sco_features, sco_name = "scores";
  auto* sco_scorer_opt = sco->add_option("--scorer", sco_scorer, "Calibrated AE scorer JSON");
  auto* sco_clf_opt = sco->add_option("--classifier", sco_clf, "Classifier model JSON");
  sco_scorer_opt->excludes(sco_clf_opt);
  sco->add_option("--features", sco_features, "Feature CSV without labels")->required();
  sco->add_option("--name", sco_name, "Output file stem")->capture_default_str();

  // train-clf
  auto* tcl = app.add_subcommand("train-clf", "Train a supervised classifier (optionally CV-selected)");
  std::string tcl_kind, tcl_train;
  bool tcl_cv = false, tcl_no_bootstrap = false;
  std::size_t tcl_folds = 5, tcl_min_leaf = 1, tcl_trees = 100, tcl_fps = 3, tcl_epochs_lr = 500, tcl_epochs_mlp = 60;
  std::vector<std::size_t> tcl_k{5}, tcl_depth{32}, tcl_hidden{8};
  std::vector<double> tcl_l2{0.0};
  tcl->add_option("--kind", tcl_kind, "logreg | gnb | knn | tree | forest | mlp")->required();
  tcl->add_option("--train", tcl_train, "Labeled training CSV")->required();
  tcl->add_flag("--cv", tcl_cv, "Select hyperparameters by stratified cross-validation");
  tcl->add_option("--folds", tcl_folds)->capture_default_str();
  tcl->add_option("--k", tcl_k, "k-NN neighbours (list with --cv)")->delimiter(',');
  tcl->add_option("--l2", tcl_l2, "Logistic regression L2 strengths (list with --cv)")->delimiter(',');
  tcl->add_option("--max-depth", tcl_depth, "Tree depth limits (list with --cv)")->delimiter(',');
  tcl->add_option("--hidden", tcl_hidden, "MLP hidden widths (list with --cv)")->delimiter(',');
  tcl->add_option("--min-leaf", tcl_min_leaf)->capture_default_str();
  tcl->add_option("--n-trees", tcl_trees)->capture_default_str();
  tcl->add_option("--features-per-split", tcl_fps)->capture_default_str();
  tcl->add_flag("--no-bootstrap", tcl_no_bootstrap);
  tcl->add_option("--logreg-epochs", tcl_epochs_lr)->capture_default_str();
  tcl->add_option("--mlp-epochs", tcl_epochs_mlp)->capture_default_str();

  // evaluate
  auto* eva = app.add_subcommand("evaluate", "Compare scores/decisions against test labels");
  std::string eva_scores, eva_labels, eva_name, eva_stem = "report";
  eva->add_option("--scores", eva_scores)->required();
  eva->add_option("--labels", eva_labels)->required();
  eva->add_option("--name", eva_name, "Model name recorded in the report")->required();
  eva->add_option("--stem", eva_stem, "Output file stem")->capture_default_str();

  // compare
  auto* cmp = app.add_subcommand("compare", "Build the comparison table from report files");
  std::vector<std::string> cmp_reports;
  cmp->add_option("--reports", cmp_reports)->required();

  // histogram
  auto* his = app.add_subcommand("histogram", "Per-channel, per-class histograms as CSV");
  std::string his_data;
  std::size_t his_bins = 50;
  his->add_option("--data", his_data, "Labeled CSV")->required();
  his->add_option("--bins", his_bins)->capture_default_str();

  // run
  auto* run = app.add_subcommand("run", "Run the full pipeline from a configuration file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(ErrorCategory::Config);
  }

  const Logger log = make_logger(g);
  try {
    const std::size_t threads = threads_from_env();
    const auto cfg = maybe_config(g);

    if (*gen) {
      SynthConfig sc = cfg ? cfg->synth() : SynthConfig{};
      if (!cfg && g.seed) sc.seed = *g.seed;
      if (gen_n) sc.n_samples = *gen_n;
      if (gen_fraction) sc.anomaly_fraction = *gen_fraction;
      const auto path = out_dir(g) / "data.csv";
      stage_generate(sc, path);
      if (log) log("wrote " + path.string());
    } else if (*spl) {
      const std::uint64_t seed = cfg ? cfg->split_seed() : g.seed.value_or(7);
      const auto files = stage_split(split_data, test_fraction, ae_val_fraction, seed, out_dir(g));
      if (log) log("wrote split files to " + g.out);
    } else if (*tae) {
      TrainConfig tc = cfg ? cfg->train() : TrainConfig{};
      if (!cfg && g.seed) tc.seed = *g.seed;
      if (tae_epochs) tc.max_epochs = *tae_epochs;
      if (tae_batch) tc.batch_size = *tae_batch;
      if (tae_lr) tc.learning_rate = *tae_lr;
      const auto report = stage_train_ae(tae_train, tae_val, tc, out_dir(g), log);
      if (log) log("best val MSE " + std::to_string(report.best_val_loss) + " at epoch " + std::to_string(report.best_epoch));
    } else if (*cal) {
      ThresholdPolicy policy{threshold_kind_from_string(cal_policy), cal_percentile};
      const auto scorer = stage_calibrate(cal_model, cal_scaler, cal_train, policy, out_dir(g) / "scorer.json");
      if (log) log("threshold " + std::to_string(scorer.threshold));
    } else if (*sco) {
      const auto path = out_dir(g) / (sco_name + ".csv");
      if (!sco_scorer.empty()) stage_score_ae(sco_scorer, sco_features, path);
      else if (!sco_clf.empty()) stage_score_clf(sco_clf, sco_features, path);
      else throw ConfigError("score needs --scorer or --classifier");
      if (log) log("wrote " + path.string());
    } else if (*tcl) {
      ClassifierConfig base;
      base.kind = classifier_kind_from_string(tcl_kind);
      base.seed = g.seed.value_or(7);
      base.min_leaf = tcl_min_leaf;
      base.n_trees = tcl_trees;
      base.features_per_split = tcl_fps;
      base.bootstrap = !tcl_no_bootstrap;
      base.logreg_epochs = tcl_epochs_lr;
      base.mlp_epochs = tcl_epochs_mlp;
      std::vector<ClassifierConfig> cands;
      auto expand = [&](const auto& values, auto setter) {
        for (const auto& v : values) {
          cands.push_back(base);
          setter(cands.back(), v);
        }
      };
      switch (base.kind) {
        case ClassifierKind::LogReg: expand(tcl_l2, [](auto& c, double v) { c.l2 = v; }); break;
        case ClassifierKind::Knn: expand(tcl_k, [](auto& c, std::size_t v) { c.k = v; }); break;
        case ClassifierKind::DecisionTree:
        case ClassifierKind::RandomForest: expand(tcl_depth, [](auto& c, std::size_t v) { c.max_depth = v; }); break;
        case ClassifierKind::Mlp: expand(tcl_hidden, [](auto& c, std::size_t v) { c.hidden_units = v; }); break;
        case ClassifierKind::GaussianNB: cands.push_back(base); break;
      }
      for (const auto& c : cands) {
        try {
          c.validate();
        } catch (const DomainError& e) {
          throw ConfigError(e.what());
        }
      }
      ClassifierStageOptions o{cands, tcl_cv, tcl_folds, derive_seed(base.seed, 1), threads};
      const auto path = out_dir(g) / (tcl_kind + ".json");
      const auto model = stage_train_clf(tcl_train, o, path);
      if (log) log("selected " + model.config.describe() + ", wrote " + path.string());
    } else if (*eva) {
      const auto r = stage_evaluate(eva_scores, eva_labels, eva_name, out_dir(g) / (eva_stem + ".json"));
      std::cout << to_json(r).dump(2) << '\n';
    } else if (*cmp) {
      std::vector<fs::path> paths(cmp_reports.begin(), cmp_reports.end());
      const auto path = out_dir(g) / "comparison.csv";
      stage_compare(paths, path);
      if (log) log("wrote " + path.string());
    } else if (*his) {
      const auto path = out_dir(g) / "histograms.csv";
      stage_histogram(his_data, his_bins, path);
      if (log) log("wrote " + path.string());
    } else if (*run) {
      if (!cfg) throw ConfigError("run requires --config");
      PipelineConfig c = *cfg;
      if (app.get_option("--out")->count() > 0) c.override_output(g.out);
      const auto manifest = run_pipeline(c, {threads, log});
      if (log) log("run complete, config hash " + manifest.config_hash + ", outputs in " + c.output_dir().string());
    }
  } catch (const Error& e) {
    std::cerr << "aeromon: " << e.what() << '\n';
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "aeromon: " << e.what() << '\n';
    return exit_code(ErrorCategory::Data);
  }
  return 0;
}
