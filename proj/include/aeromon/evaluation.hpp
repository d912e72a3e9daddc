#pragma once

// Confusion counts, point metrics for the anomalous class, rank-based AUROC,
// class-conditional feature histograms and per-model reports.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
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

/// A binary decision plus the continuous score it was derived from.
struct Decision {
  Label label = Label::Normal;
  double score = 0.0;
};

/// Anomalous is the positive class.
struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t total() const noexcept { return tp + fp + fn + tn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(std::span<const Label> pred, std::span<const Label> truth) {
  if (pred.size() != truth.size()) throw ShapeError("confusion: prediction/truth length mismatch");
  if (pred.empty()) throw InsufficientDataError("confusion of zero samples");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == Label::Anomalous;
    const bool t = truth[i] == Label::Anomalous;
    if (p && t) ++cm.tp;
    else if (p) ++cm.fp;
    else if (t) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  std::optional<double> auroc;
  /// Set when a ratio had a zero denominator and was reported as 0.
  bool degenerate = false;
};

inline Metrics metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InsufficientDataError("metrics of an empty confusion matrix");
  Metrics m;
  auto ratio = [&m](std::size_t num, std::size_t den) {
    if (den == 0) {
      m.degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(cm.tp, cm.tp + cm.fp);
  m.recall = ratio(cm.tp, cm.tp + cm.fn);
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.f1 = 0.0;
    m.degenerate = true;
  }
  m.accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
  return m;
}

/// Mann-Whitney AUROC: probability that a random anomalous sample outscores a
/// random normal one, ties counting one half. Uses mid-ranks.
inline double auroc(std::span<const double> scores, std::span<const Label> truth) {
  if (scores.size() != truth.size()) throw ShapeError("auroc: score/truth length mismatch");
  std::size_t n_pos = 0;
  for (Label l : truth) n_pos += l == Label::Anomalous;
  const std::size_t n_neg = truth.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedAurocError("both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Rank sums are multiples of 1/2 and stay exact in double for any realistic n.
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (truth[order[k]] == Label::Anomalous) pos_rank_sum += mid_rank;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

// ---------------------------------------------------------------------------
// Histograms

struct ChannelHistogram {
  double lo = 0.0;
  double hi = 0.0;
  std::array<std::vector<std::size_t>, 2> counts;  // indexed by Label
};

struct FeatureHistograms {
  std::size_t bins = 0;
  std::array<ChannelHistogram, kChannels> channels;
};

/// Equal-width bins over each channel's observed range (both classes pooled).
/// The maximum falls into the last bin; a constant channel puts everything in bin 0.
inline FeatureHistograms feature_histograms(const Dataset& data, std::size_t bins = 50) {
  if (data.empty()) throw InsufficientDataError("histograms of an empty dataset");
  if (bins < 2) throw DomainError("histograms need at least 2 bins");
  if (!data.fully_labeled()) throw MissingLabelsError("histograms are split by class");
  FeatureHistograms out;
  out.bins = bins;
  for (std::size_t ch = 0; ch < kChannels; ++ch) {
    auto& h = out.channels[ch];
    h.lo = h.hi = data.samples.front().features[ch];
    for (const auto& s : data.samples) {
      h.lo = std::min(h.lo, s.features[ch]);
      h.hi = std::max(h.hi, s.features[ch]);
    }
    h.counts[0].assign(bins, 0);
    h.counts[1].assign(bins, 0);
    const double width = (h.hi - h.lo) / static_cast<double>(bins);
    for (const auto& s : data.samples) {
      std::size_t b = 0;
      if (width > 0.0) {
        b = static_cast<std::size_t>(std::floor((s.features[ch] - h.lo) / width));
        b = std::min(b, bins - 1);
      }
      ++h.counts[static_cast<std::size_t>(*s.label)][b];
    }
  }
  return out;
}

/// `channel,bin,lo,hi,normal,anomalous`
inline void write_histograms_csv(const std::filesystem::path& path, const FeatureHistograms& h) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InsufficientDataError("cannot write " + path.string());
  out << "channel,bin,lo,hi,normal,anomalous\n";
  for (std::size_t ch = 0; ch < kChannels; ++ch) {
    const auto& c = h.channels[ch];
    const double width = (c.hi - c.lo) / static_cast<double>(h.bins);
    for (std::size_t b = 0; b < h.bins; ++b) {
      const double lo = c.lo + width * static_cast<double>(b);
      const double hi = b + 1 == h.bins ? c.hi : c.lo + width * static_cast<double>(b + 1);
      out << kChannelNames[ch] << ',' << b << ',' << detail::format_real(lo) << ',' << detail::format_real(hi) << ','
          << c.counts[0][b] << ',' << c.counts[1][b] << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Reports

struct ScoreSummary {
  std::size_t n = 0;
  double min = 0.0;
  double median = 0.0;
  double p85 = 0.0;
  double max = 0.0;
};

inline ScoreSummary summarize(std::span<const double> scores) {
  if (scores.empty()) return {};
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  return {scores.size(), *lo, percentile(scores, 50.0), percentile(scores, 85.0), *hi};
}

struct EvalReport {
  std::string model;
  Metrics metrics;
  ConfusionMatrix confusion;
  ScoreSummary normal_scores;
  ScoreSummary anomalous_scores;
};

inline EvalReport evaluate_predictions(const std::string& name, std::span<const Label> pred,
                                       std::span<const double> scores, std::span<const Label> truth) {
  if (scores.size() != truth.size()) throw ShapeError("evaluate: score/truth length mismatch");
  EvalReport r;
  r.model = name;
  r.confusion = confusion(pred, truth);
  r.metrics = metrics(r.confusion);
  std::array<std::vector<double>, 2> by_class;
  for (std::size_t i = 0; i < truth.size(); ++i) by_class[static_cast<std::size_t>(truth[i])].push_back(scores[i]);
  if (!by_class[0].empty() && !by_class[1].empty()) r.metrics.auroc = auroc(scores, truth);
  r.normal_scores = summarize(by_class[0]);
  r.anomalous_scores = summarize(by_class[1]);
  return r;
}

/// Applies `decide` (features -> Decision) to every test sample exactly once.
template <typename Decider>
EvalReport evaluate_model(const std::string& name, Decider&& decide, const Dataset& test) {
  if (test.empty()) throw InsufficientDataError("empty test set");
  if (!test.fully_labeled()) throw MissingLabelsError("test set must be labeled for evaluation");
  std::vector<Label> pred, truth;
  std::vector<double> scores;
  pred.reserve(test.size());
  truth.reserve(test.size());
  scores.reserve(test.size());
  for (const auto& s : test.samples) {
    const Decision d = decide(s.features);
    pred.push_back(d.label);
    scores.push_back(d.score);
    truth.push_back(*s.label);
  }
  return evaluate_predictions(name, pred, scores, truth);
}

inline nlohmann::json to_json(const ScoreSummary& s) {
  return {{"n", s.n}, {"min", s.min}, {"median", s.median}, {"p85", s.p85}, {"max", s.max}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"model", r.model},
                      {"precision", r.metrics.precision},
                      {"recall", r.metrics.recall},
                      {"f1", r.metrics.f1},
                      {"accuracy", r.metrics.accuracy},
                      {"auroc", r.metrics.auroc ? nlohmann::json(*r.metrics.auroc) : nlohmann::json(nullptr)},
                      {"degenerate", r.metrics.degenerate},
                      {"confusion", {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"fn", r.confusion.fn},
                                     {"tn", r.confusion.tn}}},
                      {"scores", {{"normal", to_json(r.normal_scores)}, {"anomalous", to_json(r.anomalous_scores)}}}};
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.model = j.at("model").get<std::string>();
    r.metrics.precision = j.at("precision").get<double>();
    r.metrics.recall = j.at("recall").get<double>();
    r.metrics.f1 = j.at("f1").get<double>();
    r.metrics.accuracy = j.at("accuracy").get<double>();
    if (!j.at("auroc").is_null()) r.metrics.auroc = j.at("auroc").get<double>();
    r.metrics.degenerate = j.value("degenerate", false);
    const auto& c = j.at("confusion");
    r.confusion = {c.at("tp").get<std::size_t>(), c.at("fp").get<std::size_t>(), c.at("fn").get<std::size_t>(),
                   c.at("tn").get<std::size_t>()};
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("report: ") + e.what());
  }
}

/// `Model,Precision,Recall,F1-score,Accuracy`, four decimals.
inline void write_comparison_csv(const std::filesystem::path& path, std::span<const EvalReport> reports) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InsufficientDataError("cannot write " + path.string());
  out << "Model,Precision,Recall,F1-score,Accuracy\n";
  char buf[160];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%.4f,%.4f,%.4f,%.4f", r.metrics.precision, r.metrics.recall, r.metrics.f1,
                  r.metrics.accuracy);
    out << r.model << ',' << buf << '\n';
  }
}

}  // namespace aeromon
