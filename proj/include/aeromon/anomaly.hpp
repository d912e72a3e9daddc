#pragma once

// Reconstruction-residual anomaly scoring: per-sample MSE or the Mahalanobis
// distance of the residual vector, with a percentile threshold calibrated on
// healthy training data.

#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "aeromon/autoencoder.hpp"
#include "aeromon/dataset.hpp"
#include "aeromon/error.hpp"
#include "aeromon/evaluation.hpp"
#include "aeromon/numerics.hpp"

namespace aeromon {

/// r = forward(net, x) - x
inline std::vector<double> residual(const Network& net, std::span<const double> x_scaled) {
  if (x_scaled.size() != net.input_dim() || net.output_dim() != net.input_dim()) {
    throw ShapeError("residual needs an input matching the autoencoder width");
  }
  ForwardCache cache;
  forward_into(net, x_scaled, cache);
  std::vector<double> r(x_scaled.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = cache.output()[i] - x_scaled[i];
  return r;
}

inline double score_mse(const Network& net, std::span<const double> x_scaled) {
  if (x_scaled.size() != net.input_dim()) throw ShapeError("score_mse input width mismatch");
  ForwardCache cache;
  forward_into(net, x_scaled, cache);
  return mse_loss(x_scaled, cache.output());
}

struct ResidualStats {
  std::vector<double> mean;
  Matrix cov;
  CholeskyFactor chol;
  std::size_t n_fit = 0;
};

/// Builds stats from a precomputed mean and covariance (factorizes `cov`).
inline ResidualStats make_residual_stats(std::vector<double> mean, Matrix cov, std::size_t n_fit) {
  if (mean.size() != cov.rows()) throw ShapeError("residual mean/covariance dimension mismatch");
  try {
    CholeskyFactor chol = cholesky(cov);
    return {std::move(mean), std::move(cov), std::move(chol), n_fit};
  } catch (const NotPositiveDefiniteError& e) {
    throw DegenerateResidualsError(e.what());
  }
}

/// Mean and covariance of the residual vectors over the (scaled) rows of `scaled`.
inline ResidualStats fit_residual_stats(const Network& net, const Matrix& scaled) {
  const std::size_t d = net.input_dim();
  if (scaled.rows() < d + 1) {
    throw InsufficientDataError("residual statistics need at least " + std::to_string(d + 1) + " samples, got " +
                                std::to_string(scaled.rows()));
  }
  Matrix residuals(scaled.rows(), d);
  for (std::size_t r = 0; r < scaled.rows(); ++r) {
    const auto res = residual(net, scaled.row(r));
    std::copy(res.begin(), res.end(), residuals.row(r).begin());
  }
  auto mc = covariance(residuals);
  return make_residual_stats(std::move(mc.mean), std::move(mc.cov), scaled.rows());
}

inline ResidualStats fit_residual_stats(const Network& net, const Dataset& scaled) {
  return fit_residual_stats(net, to_matrix(scaled));
}

/// sqrt((r - mean)^T cov^-1 (r - mean))
inline double score_mahalanobis(const ResidualStats& stats, std::span<const double> r) {
  if (r.size() != stats.mean.size()) throw ShapeError("residual dimension does not match the fitted stats");
  std::vector<double> centered(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) centered[i] = r[i] - stats.mean[i];
  const auto solved = solve_spd(stats.chol, centered);
  double q = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) q += centered[i] * solved[i];
  return std::sqrt(std::max(q, 0.0));
}

enum class ThresholdKind : std::uint8_t { MsePercentile, MahalanobisPercentile };

inline std::string_view to_string(ThresholdKind k) noexcept {
  return k == ThresholdKind::MsePercentile ? "mse" : "mahalanobis";
}

inline ThresholdKind threshold_kind_from_string(std::string_view s) {
  if (s == "mse") return ThresholdKind::MsePercentile;
  if (s == "mahalanobis") return ThresholdKind::MahalanobisPercentile;
  throw ConfigError("unknown threshold policy '" + std::string(s) + "' (expected mse|mahalanobis)");
}

struct ThresholdPolicy {
  ThresholdKind kind = ThresholdKind::MahalanobisPercentile;
  double percentile = 85.0;

  void validate() const {
    if (!(percentile > 0.0 && percentile <= 100.0)) throw DomainError("threshold percentile must lie in (0,100]");
  }
};

struct AnomalyScorer {
  Network net;
  MinMaxScaler scaler;
  ThresholdPolicy policy;
  std::optional<ResidualStats> stats;
  double threshold = 0.0;

  /// Score of an already-scaled sample under the configured policy.
  double score_scaled(std::span<const double> x_scaled) const {
    if (policy.kind == ThresholdKind::MsePercentile) return score_mse(net, x_scaled);
    if (!stats) throw DegenerateResidualsError("Mahalanobis scorer has no residual statistics");
    return score_mahalanobis(*stats, residual(net, x_scaled));
  }

  double score(const Features& raw) const {
    const Features x = scaler.transform(raw);
    return score_scaled(x);
  }
};

/// Scores every sample of `raw` (unscaled) through `scorer`.
inline std::vector<double> score_all(const AnomalyScorer& scorer, const Dataset& raw) {
  std::vector<double> scores;
  scores.reserve(raw.size());
  for (const auto& s : raw.samples) scores.push_back(scorer.score(s.features));
  return scores;
}

/// Threshold = nearest-rank percentile of the training scores, so that at most
/// (100 - p)% of the calibration samples score strictly above it.
inline AnomalyScorer calibrate(const Network& net, const MinMaxScaler& scaler, const Dataset& ae_train_raw,
                               const ThresholdPolicy& policy) {
  policy.validate();
  if (ae_train_raw.empty()) throw InsufficientDataError("calibration set is empty");
  AnomalyScorer scorer{net, scaler, policy, std::nullopt, 0.0};
  if (policy.kind == ThresholdKind::MahalanobisPercentile) {
    scorer.stats = fit_residual_stats(net, apply_scaler(scaler, ae_train_raw));
  }
  const auto scores = score_all(scorer, ae_train_raw);
  scorer.threshold = percentile(scores, policy.percentile, PercentileMethod::NearestRank);
  return scorer;
}

/// Anomalous iff score > threshold; a score equal to the threshold is Normal.
inline Decision classify(const AnomalyScorer& scorer, const Features& raw) {
  const double s = scorer.score(raw);
  return {s > scorer.threshold ? Label::Anomalous : Label::Normal, s};
}

inline constexpr int kScorerFormatVersion = 1;

/// The network itself is stored separately; `model_file` is recorded relative
/// to the scorer file's directory.
inline nlohmann::json to_json(const AnomalyScorer& s, const std::string& model_file) {
  nlohmann::json j = {{"format_version", kScorerFormatVersion},
                      {"type", "anomaly_scorer"},
                      {"policy", to_string(s.policy.kind)},
                      {"percentile", s.policy.percentile},
                      {"threshold", s.threshold},
                      {"scaler", to_json(s.scaler)},
                      {"model", model_file}};
  if (s.stats) {
    j["residual_mean"] = s.stats->mean;
    j["covariance"] = s.stats->cov.data();
    j["n_fit"] = s.stats->n_fit;
  }
  return j;
}

inline AnomalyScorer scorer_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  try {
    if (j.at("format_version").get<int>() != kScorerFormatVersion) throw SchemaError("unsupported scorer format_version");
    if (j.at("type").get<std::string>() != "anomaly_scorer") throw SchemaError("file is not an anomaly scorer");
    AnomalyScorer s;
    s.policy.kind = threshold_kind_from_string(j.at("policy").get<std::string>());
    s.policy.percentile = j.at("percentile").get<double>();
    s.threshold = j.at("threshold").get<double>();
    s.scaler = scaler_from_json(j.at("scaler"));
    s.net = load_network(base_dir / j.at("model").get<std::string>());
    if (s.policy.kind == ThresholdKind::MahalanobisPercentile) {
      auto mean = j.at("residual_mean").get<std::vector<double>>();
      auto cov = j.at("covariance").get<std::vector<double>>();
      const std::size_t d = mean.size();
      if (cov.size() != d * d) throw SchemaError("covariance must be d*d values");
      s.stats = make_residual_stats(std::move(mean), Matrix(d, d, std::move(cov)), j.at("n_fit").get<std::size_t>());
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("scorer: ") + e.what());
  }
}

inline void save_scorer(const std::filesystem::path& path, const AnomalyScorer& s, const std::string& model_file) {
  write_json_file(path, to_json(s, model_file));
}

inline AnomalyScorer load_scorer(const std::filesystem::path& path) {
  return scorer_from_json(read_json_file(path), path.parent_path());
}

}  // namespace aeromon
