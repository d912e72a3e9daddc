// Acceptance driver: one PASS/FAIL/SKIP line per criterion, non-zero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "support.hpp"

using namespace aeromon;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const char* verdict, const std::string& title, const std::string& detail) {
  std::cout << '[' << verdict << "] " << id << ". " << title << ": " << detail << std::endl;
  if (std::string(verdict) == "FAIL") ++failures;
}

void verdict(int id, bool ok, const std::string& title, const std::string& detail) {
  report(id, ok ? "PASS" : "FAIL", title, detail);
}

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

void gradient_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    Network net = init_network(autoencoder_topology(), seed);
    Rng rng(derive_seed(seed, 1234));
    for (auto& l : net.layers)
      for (double& b : l.biases) b = rng.uniform(-0.3, 0.3);
    std::vector<double> x(kChannels);
    for (double& v : x) v = rng.uniform();
    const auto fr = forward(net, x);
    worst = std::max(worst, oracle::max_rel_err(backward(net, fr.cache, x), oracle::fd_mse_gradient(net, x, 1e-5)));
  }
  const double dt = seconds_since(t0);
  verdict(1, worst < 1e-4 && dt < 5.0, "gradient check",
          fmt("25 pairs, worst relative error %.3g (limit 1e-4), %.2f s (limit 5 s)", worst, dt));
}

void oracle_equivalence() {
  const auto t0 = Clock::now();
  std::size_t auroc_bad = 0, knn_bad = 0, knn_checked = 0, metrics_bad = 0;

  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<Label> t(n);
    for (auto& l : t) l = rng.below(2) ? Label::Anomalous : Label::Normal;
    t[0] = Label::Anomalous;
    t[1] = Label::Normal;
    std::vector<double> s(n);
    for (double& v : s) v = trial % 2 ? static_cast<double>(rng.below(6)) : rng.normal();
    auroc_bad += auroc(s, t) != oracle::pair_count_auroc(s, t);
  }

  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<std::vector<double>> xs(n, std::vector<double>(kChannels, 0.0));
    std::vector<int> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < 3; ++j) xs[i][j] = static_cast<double>(rng.below(5)) / 4.0;
      ys[i] = static_cast<int>(rng.below(2));
    }
    ys[0] = 0;
    ys[1] = 1;
    const Dataset d = test::labeled_points(xs, ys);
    for (std::size_t k : {1u, 3u, 5u, 9u}) {
      ClassifierConfig cfg;
      cfg.kind = ClassifierKind::Knn;
      cfg.k = k;
      const auto model = train_classifier(cfg, d);
      for (int q = 0; q < 20; ++q) {
        std::vector<double> x(kChannels, 0.0);
        for (std::size_t j = 0; j < 3; ++j) x[j] = static_cast<double>(rng.below(9)) / 8.0;
        knn_bad += predict_prob(model, x) != oracle::brute_knn_prob(xs, ys, x, k);
        ++knn_checked;
      }
    }
  }

  // Hand-tallied cases: (pred, truth) -> (tp, fp, fn, tn), then the ratios as exact fractions.
  using L = Label;
  constexpr L A = L::Anomalous, N = L::Normal;
  struct Case {
    std::vector<L> pred, truth;
    ConfusionMatrix expect;
  };
  const std::vector<Case> cases{
      {{A, A, N, N, A, N, A, N}, {A, N, N, A, A, N, N, N}, {2, 2, 1, 3}},
      {{A, A, A, N}, {A, A, A, N}, {3, 0, 0, 1}},
      {{N, N, N, N, N}, {A, A, N, N, N}, {0, 0, 2, 3}},
      {{A, N, A, N, A, A}, {N, A, N, A, A, A}, {2, 2, 2, 0}},
  };
  for (const auto& c : cases) {
    const auto cm = confusion(c.pred, c.truth);
    const auto m = metrics(cm);
    const auto& e = c.expect;
    const double p = e.tp + e.fp ? static_cast<double>(e.tp) / static_cast<double>(e.tp + e.fp) : 0.0;
    const double r = e.tp + e.fn ? static_cast<double>(e.tp) / static_cast<double>(e.tp + e.fn) : 0.0;
    const double f1 = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    const double acc = static_cast<double>(e.tp + e.tn) / static_cast<double>(e.total());
    metrics_bad += !(cm == e) || m.precision != p || m.recall != r || m.f1 != f1 || m.accuracy != acc;
  }

  const double dt = seconds_since(t0);
  verdict(2, auroc_bad + knn_bad + metrics_bad == 0 && dt < 10.0, "oracle equivalence",
          fmt("AUROC 200 instances (%zu mismatches), k-NN %zu queries n<=200 (%zu mismatches), "
              "%zu hand-tallied confusion cases (%zu mismatches), %.2f s (limit 10 s)",
              auroc_bad, knn_checked, knn_bad, cases.size(), metrics_bad, dt));
}

void calibration_band() {
  const auto parts = split(generate_synthetic(test::small_synth(12000, 3)), 0.1, 0.1, 3);
  const MinMaxScaler scaler = fit_scaler(parts.ae_train);
  TrainConfig tc;
  tc.batch_size = 256;
  tc.max_epochs = 60;
  const Network net = train(init_network(autoencoder_topology(), 3), to_matrix(apply_scaler(scaler, parts.ae_train)),
                            to_matrix(apply_scaler(scaler, parts.ae_val)), tc)
                          .net;
  std::size_t checked = 0, bad = 0;
  double lo_seen = 1.0, hi_seen = 0.0;
  for (auto kind : {ThresholdKind::MsePercentile, ThresholdKind::MahalanobisPercentile}) {
    for (std::size_t n : {1000u, 1003u, 1001u, 1999u, 2500u, 4001u}) {
      Dataset cal;
      cal.samples.assign(parts.ae_train.samples.begin(), parts.ae_train.samples.begin() + static_cast<long>(n));
      const auto scorer = calibrate(net, scaler, cal, {kind, 85.0});
      std::size_t above = 0;
      for (double s : score_all(scorer, cal)) above += s > scorer.threshold;
      const double frac = static_cast<double>(above) / static_cast<double>(n);
      lo_seen = std::min(lo_seen, frac);
      hi_seen = std::max(hi_seen, frac);
      bad += !(frac <= 0.15 && frac >= 0.15 - 2.0 / static_cast<double>(n));
      ++checked;
    }
  }
  verdict(3, bad == 0, "threshold calibration band",
          fmt("%zu calibration sets (both policies, n from 1000 to 4001 incl. 1003), flagged fraction in "
              "[%.4f, %.4f], %zu outside [0.15 - 2/n, 0.15]",
              checked, lo_seen, hi_seen, bad));
}

struct RunResult {
  int rc = -1;
  double seconds = 0.0;
};

RunResult cli_run(const fs::path& config, const fs::path& out) {
  const auto t0 = Clock::now();
  const int rc = test::run_cli("--quiet --config " + test::quote(config) + " --out " + test::quote(out) + " run");
  return {rc, seconds_since(t0)};
}

EvalReport load_report(const fs::path& p) { return report_from_json(read_json_file(p)); }

double run4_seconds = 0.0;

void synthetic_end_to_end(const fs::path& out) {
  const auto r = cli_run(AEROMON_DEFAULT_CONFIG, out);
  run4_seconds = r.seconds;
  if (r.rc != 0) {
    verdict(4, false, "synthetic end-to-end", fmt("aeromon run exited with %d", r.rc));
    return;
  }
  const auto ae = load_report(out / "reports" / "ae.json");
  const auto rf = load_report(out / "reports" / "forest.json");
  const bool ok = ae.metrics.f1 >= 0.80 && ae.metrics.recall >= 0.85 && rf.metrics.f1 >= 0.98 && r.seconds < 180.0;
  verdict(4, ok, "synthetic end-to-end",
          fmt("AE+Mahalanobis F1 %.4f (>= 0.80), recall %.4f (>= 0.85); random forest F1 %.4f (>= 0.98); "
              "%.1f s single-threaded (limit 180 s)",
              ae.metrics.f1, ae.metrics.recall, rf.metrics.f1, r.seconds));
}

void phm_reproduction(const fs::path& work) {
  const char* csv = std::getenv("AEROMON_PHM_CSV");
  if (!csv || !*csv) {
    report(5, "SKIP", "PHM 2024 real-data reproduction", "AEROMON_PHM_CSV not set; dataset not available");
    return;
  }
  const fs::path cfg = work / "phm.json";
  write_json_file(cfg, {{"seed", 7}, {"data.csv", csv}, {"baselines.models", {"forest"}}});
  const auto r = cli_run(cfg, work / "phm");
  if (r.rc != 0) {
    verdict(5, false, "PHM 2024 real-data reproduction", fmt("aeromon run exited with %d", r.rc));
    return;
  }
  const auto ae = load_report(work / "phm" / "reports" / "ae.json").metrics;
  const auto rf = load_report(work / "phm" / "reports" / "forest.json").metrics;
  auto near = [](const Metrics& m, std::array<double, 4> want, double tol) {
    return std::abs(m.precision - want[0]) <= tol && std::abs(m.recall - want[1]) <= tol &&
           std::abs(m.f1 - want[2]) <= tol && std::abs(m.accuracy - want[3]) <= tol;
  };
  const bool ok = near(ae, {0.8181, 0.8856, 0.8505, 0.8758}, 0.05) && near(rf, {0.9993, 0.9995, 0.9994, 0.9995}, 0.005);
  verdict(5, ok, "PHM 2024 real-data reproduction",
          fmt("AE P/R/F1/Acc %.4f/%.4f/%.4f/%.4f (+-0.05), RF %.4f/%.4f/%.4f/%.4f (+-0.005)", ae.precision,
              ae.recall, ae.f1, ae.accuracy, rf.precision, rf.recall, rf.f1, rf.accuracy));
}

void determinism(const fs::path& first, const fs::path& second) {
  const auto r = cli_run(AEROMON_DEFAULT_CONFIG, second);
  if (r.rc != 0 || !fs::exists(first / "manifest.json")) {
    verdict(6, false, "determinism", fmt("second run exited with %d", r.rc));
    return;
  }
  std::size_t compared = 0, differing = 0;
  const auto m1 = read_json_file(first / "manifest.json"), m2 = read_json_file(second / "manifest.json");
  for (const auto& f : m1.at("files")) {
    const auto rel = f.get<std::string>();
    ++compared;
    differing += !fs::exists(second / rel) || test::read_file(first / rel) != test::read_file(second / rel);
  }
  auto strip = [](nlohmann::json j) {
    j.erase("timing");
    return j;
  };
  const bool manifest_same = strip(m1) == strip(m2);
  const double budget = 2.0 * run4_seconds;
  const bool ok = differing == 0 && manifest_same && compared > 0 && r.seconds < budget;
  verdict(6, ok, "determinism",
          fmt("%zu output files compared (reports, scores, models), %zu differ; manifest equal apart from timing: %s; "
              "second run %.1f s (limit 2x %.1f s)",
              compared, differing, manifest_same ? "yes" : "no", r.seconds, run4_seconds));
}

void invariant_suites() {
  const std::vector<std::string> binaries{"test_numerics", "test_dataset",    "test_autoencoder", "test_anomaly",
                                          "test_baselines", "test_evaluation", "test_pipeline"};
  // Each named invariant must exist as a property test; all property tests must pass.
  const std::vector<std::string> required{
      "property: covariance is exactly symmetric",
      "property: cholesky reconstructs random SPD matrices",
      "property: percentile is monotone",
      "property: scaled fit set lies in [0,1] with exact boundary identities",
      "property: split partition laws",
      "property: training report invariants",
      "property: identity-covariance Mahalanobis equals the centered Euclidean norm",
      "property: a one-tree forest without bootstrap over all features is the plain tree",
      "property: F1 lies between min(P, R) and the arithmetic mean",
      "property: re-running a stage reproduces its files byte for byte",
      "property: config hash changes exactly when a setting changes",
  };
  test::TempDir tmp("invariants");
  std::string listing;
  std::size_t failed_binaries = 0;
  for (const auto& b : binaries) {
    const fs::path exe = fs::path(AEROMON_TEST_BIN_DIR) / b;
    const fs::path list = tmp / (b + ".txt");
    if (std::system(("\"" + exe.string() + "\" --list-tests --verbosity quiet > " + test::quote(list)).c_str()) != 0) {
      ++failed_binaries;
      continue;
    }
    listing += test::read_file(list);
    const int status = std::system(("\"" + exe.string() + "\" \"property:*\" > /dev/null 2>&1").c_str());
    failed_binaries += !(WIFEXITED(status) && WEXITSTATUS(status) == 0);
  }
  std::size_t property_tests = 0, missing = 0;
  std::istringstream lines(listing);
  for (std::string line; std::getline(lines, line);) property_tests += line.rfind("property:", 0) == 0;
  std::string missing_names;
  for (const auto& r : required) {
    if (listing.find(r) == std::string::npos) {
      ++missing;
      missing_names += " '" + r + "'";
    }
  }
  verdict(7, failed_binaries == 0 && missing == 0, "invariant suites",
          fmt("%zu property tests across %zu suites, %zu suite(s) failing, %zu of %zu named invariants missing",
              property_tests, binaries.size(), failed_binaries, missing, required.size()) +
              missing_names);
}

}  // namespace

int main() {
  // Criteria 4 and 6 are specified single-threaded.
  ::setenv("AEROMON_THREADS", "1", 1);
  test::TempDir work("acceptance");
  const auto guarded = [](int id, auto&& body) {
    try {
      body();
    } catch (const std::exception& e) {
      verdict(id, false, "criterion raised an exception", e.what());
    }
  };
  guarded(1, gradient_check);
  guarded(2, oracle_equivalence);
  guarded(3, calibration_band);
  guarded(4, [&] { synthetic_end_to_end(work / "run1"); });
  guarded(5, [&] { phm_reproduction(work.path()); });
  guarded(6, [&] { determinism(work / "run1", work / "run2"); });
  guarded(7, invariant_suites);
  std::cout << (failures == 0 ? "acceptance: all criteria met" : "acceptance: " + std::to_string(failures) + " failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
