#pragma once

// Telemetry samples, CSV ingestion, min-max scaling, the holdout/AE splits and
// the seeded synthetic telemetry generator.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "aeromon/error.hpp"
#include "aeromon/numerics.hpp"

namespace aeromon {

inline constexpr std::size_t kChannels = 7;

/// Channel order used everywhere: OAT, MGT, PA, IAS, NP, CS, OT.
inline constexpr std::array<std::string_view, kChannels> kChannelNames = {"oat", "mgt", "pa", "ias",
                                                                          "np",  "cs",  "ot"};

enum class Channel : std::size_t { OAT = 0, MGT, PA, IAS, NP, CS, OT };

constexpr std::size_t idx(Channel c) noexcept { return static_cast<std::size_t>(c); }

enum class Label : std::uint8_t { Normal = 0, Anomalous = 1 };

inline std::string_view to_string(Label l) noexcept { return l == Label::Anomalous ? "anomalous" : "normal"; }

using Features = std::array<double, kChannels>;

struct TelemetrySample {
  Features features{};
  std::optional<Label> label;

  bool operator==(const TelemetrySample&) const = default;
};

struct Dataset {
  std::vector<TelemetrySample> samples;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }

  bool fully_labeled() const noexcept {
    return std::all_of(samples.begin(), samples.end(), [](const auto& s) { return s.label.has_value(); });
  }

  std::size_t count(Label l) const noexcept {
    return static_cast<std::size_t>(
        std::count_if(samples.begin(), samples.end(), [l](const auto& s) { return s.label == l; }));
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.samples.reserve(indices.size());
    for (std::size_t i : indices) out.samples.push_back(samples.at(i));
    return out;
  }

  bool operator==(const Dataset&) const = default;
};

/// Features of `data` as an n x 7 matrix.
inline Matrix to_matrix(const Dataset& data) {
  Matrix m(data.size(), kChannels);
  for (std::size_t r = 0; r < data.size(); ++r) {
    std::copy(data.samples[r].features.begin(), data.samples[r].features.end(), m.row(r).begin());
  }
  return m;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
  return out;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::optional<double> parse_real(std::string_view s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<Label> parse_label(std::string_view s) {
  const std::string l = lower(s);
  if (l == "normal" || l == "0") return Label::Normal;
  if (l == "anomalous" || l == "1") return Label::Anomalous;
  return std::nullopt;
}

/// Shortest decimal form that parses back to the same double.
inline std::string format_real(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Reads `oat,mgt,pa,ias,np,cs,ot[,label]`. Columns may appear in any order but
/// every channel must be present exactly once. Rows are numbered from 1 (the
/// first line after the header) in error messages.
inline Dataset load_csv(const std::filesystem::path& path, bool has_labels) {
  std::ifstream in(path);
  if (!in) throw InsufficientDataError("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line) || detail::trim(line).empty()) {
    throw InsufficientDataError(path.string() + " is empty");
  }
  const auto header = detail::split_fields(line);
  std::array<std::optional<std::size_t>, kChannels> column_of{};
  std::optional<std::size_t> label_col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name = detail::lower(header[c]);
    const auto it = std::find(kChannelNames.begin(), kChannelNames.end(), name);
    if (it != kChannelNames.end()) {
      auto& slot = column_of[static_cast<std::size_t>(it - kChannelNames.begin())];
      if (slot) throw SchemaError("duplicate column '" + name + "'");
      slot = c;
    } else if (name == "label" && has_labels && !label_col) {
      label_col = c;
    } else {
      throw SchemaError("unexpected column '" + std::string(header[c]) + "'");
    }
  }
  for (std::size_t ch = 0; ch < kChannels; ++ch) {
    if (!column_of[ch]) throw SchemaError("missing column '" + std::string(kChannelNames[ch]) + "'");
  }
  if (has_labels && !label_col) throw SchemaError("missing column 'label'");

  Dataset data;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto fields = detail::split_fields(line);
    if (fields.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " +
                           std::to_string(fields.size()),
                       row);
    }
    TelemetrySample s;
    for (std::size_t ch = 0; ch < kChannels; ++ch) {
      const auto v = detail::parse_real(fields[*column_of[ch]]);
      if (!v) {
        throw ParseError("column '" + std::string(kChannelNames[ch]) + "' value '" +
                             std::string(fields[*column_of[ch]]) + "' is not a finite number",
                         row);
      }
      s.features[ch] = *v;
    }
    if (label_col) {
      s.label = detail::parse_label(fields[*label_col]);
      if (!s.label) throw ParseError("unrecognised label '" + std::string(fields[*label_col]) + "'", row);
    }
    data.samples.push_back(s);
  }
  if (data.empty()) throw InsufficientDataError(path.string() + " has no data rows");
  return data;
}

/// Writes the canonical column order; labels as 0/1 when `with_labels`.
inline void write_csv(const std::filesystem::path& path, const Dataset& data, bool with_labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InsufficientDataError("cannot write " + path.string());
  for (std::size_t ch = 0; ch < kChannels; ++ch) out << (ch ? "," : "") << kChannelNames[ch];
  if (with_labels) out << ",label";
  out << '\n';
  for (const auto& s : data.samples) {
    for (std::size_t ch = 0; ch < kChannels; ++ch) out << (ch ? "," : "") << detail::format_real(s.features[ch]);
    if (with_labels) {
      if (!s.label) throw MissingLabelsError("sample without label cannot be written with labels");
      out << ',' << (*s.label == Label::Anomalous ? '1' : '0');
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Min-max scaling

struct MinMaxScaler {
  Features mins{};
  Features ranges{};

  bool degenerate(std::size_t ch) const noexcept { return ranges[ch] == 0.0; }

  Features transform(const Features& x) const noexcept {
    Features out{};
    for (std::size_t ch = 0; ch < kChannels; ++ch) {
      out[ch] = ranges[ch] == 0.0 ? 0.0 : (x[ch] - mins[ch]) / ranges[ch];
    }
    return out;
  }

  bool operator==(const MinMaxScaler&) const = default;
};

inline MinMaxScaler fit_scaler(const Dataset& train) {
  if (train.empty()) throw InsufficientDataError("cannot fit a scaler on an empty dataset");
  Features lo = train.samples.front().features;
  Features hi = lo;
  for (const auto& s : train.samples) {
    for (std::size_t ch = 0; ch < kChannels; ++ch) {
      lo[ch] = std::min(lo[ch], s.features[ch]);
      hi[ch] = std::max(hi[ch], s.features[ch]);
    }
  }
  MinMaxScaler sc;
  for (std::size_t ch = 0; ch < kChannels; ++ch) {
    sc.mins[ch] = lo[ch];
    sc.ranges[ch] = hi[ch] - lo[ch];
  }
  return sc;
}

/// Values outside the fit range are left unclamped.
inline Dataset apply_scaler(const MinMaxScaler& scaler, const Dataset& data) {
  Dataset out = data;
  for (auto& s : out.samples) s.features = scaler.transform(s.features);
  return out;
}

inline nlohmann::json to_json(const MinMaxScaler& sc) {
  return {{"mins", sc.mins}, {"ranges", sc.ranges}};
}

inline MinMaxScaler scaler_from_json(const nlohmann::json& j) {
  MinMaxScaler sc;
  try {
    const auto mins = j.at("mins").get<std::vector<double>>();
    const auto ranges = j.at("ranges").get<std::vector<double>>();
    if (mins.size() != kChannels || ranges.size() != kChannels) {
      throw SchemaError("scaler needs 7 mins and 7 ranges");
    }
    std::copy(mins.begin(), mins.end(), sc.mins.begin());
    std::copy(ranges.begin(), ranges.end(), sc.ranges.begin());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("scaler: ") + e.what());
  }
  for (double r : sc.ranges) {
    if (!(r >= 0.0)) throw SchemaError("scaler range must be non-negative");
  }
  return sc;
}

// ---------------------------------------------------------------------------
// Splits

/// Four-way partition of a labeled dataset. Index vectors refer to rows of the
/// input and are sorted ascending, so each part keeps the input's relative order.
struct SplitResult {
  Dataset test;
  Dataset supervised_train;
  Dataset ae_train;
  Dataset ae_val;
  std::vector<std::size_t> test_idx;
  std::vector<std::size_t> supervised_idx;
  std::vector<std::size_t> ae_train_idx;
  std::vector<std::size_t> ae_val_idx;
};

/// Per-class quotas summing to round(fraction * total) by the largest-remainder
/// rule; remainder ties go to the lower class index.
inline std::vector<std::size_t> largest_remainder(std::span<const std::size_t> class_sizes, double fraction) {
  std::size_t total = 0;
  for (std::size_t c : class_sizes) total += c;
  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
  std::vector<std::size_t> quota(class_sizes.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < class_sizes.size(); ++c) {
    const double exact = fraction * static_cast<double>(class_sizes[c]);
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < target && i < remainders.size(); ++i) {
    const std::size_t c = remainders[i].second;
    if (quota[c] < class_sizes[c]) {
      ++quota[c];
      ++assigned;
    }
  }
  return quota;
}

inline SplitResult split(const Dataset& data, double test_fraction, double ae_val_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw DomainError("test_fraction must lie in (0,1)");
  if (!(ae_val_fraction > 0.0 && ae_val_fraction < 1.0)) throw DomainError("ae_val_fraction must lie in (0,1)");
  if (!data.fully_labeled()) throw MissingLabelsError("split requires every sample to be labeled");

  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_class[static_cast<std::size_t>(*data.samples[i].label)].push_back(i);
  }
  for (std::size_t c = 0; c < 2; ++c) {
    if (by_class[c].size() < 2) {
      throw StratificationError(std::string("class '") + std::string(to_string(static_cast<Label>(c))) +
                                "' has " + std::to_string(by_class[c].size()) + " members, need at least 2");
    }
  }

  Rng rng(seed);
  const std::array<std::size_t, 2> sizes{by_class[0].size(), by_class[1].size()};
  const auto quota = largest_remainder(sizes, test_fraction);

  SplitResult out;
  std::vector<std::size_t> train_normals;
  for (std::size_t c = 0; c < 2; ++c) {
    auto members = by_class[c];
    rng.shuffle(members);
    out.test_idx.insert(out.test_idx.end(), members.begin(), members.begin() + quota[c]);
    out.supervised_idx.insert(out.supervised_idx.end(), members.begin() + quota[c], members.end());
    if (c == static_cast<std::size_t>(Label::Normal)) {
      train_normals.assign(members.begin() + quota[c], members.end());
    }
  }
  if (train_normals.size() < 2) throw StratificationError("fewer than 2 normal training samples");

  // train_normals is still in shuffled order.
  auto n_val = static_cast<std::size_t>(std::llround(ae_val_fraction * static_cast<double>(train_normals.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, train_normals.size() - 1);
  out.ae_val_idx.assign(train_normals.begin(), train_normals.begin() + n_val);
  out.ae_train_idx.assign(train_normals.begin() + n_val, train_normals.end());

  for (auto* v : {&out.test_idx, &out.supervised_idx, &out.ae_train_idx, &out.ae_val_idx}) {
    std::sort(v->begin(), v->end());
  }
  out.test = data.subset(out.test_idx);
  out.supervised_train = data.subset(out.supervised_idx);
  out.ae_train = data.subset(out.ae_train_idx);
  out.ae_val = data.subset(out.ae_val_idx);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic telemetry

/// Parameters of the synthetic engine model.
///
/// Normal operation is driven by two latent variables: power demand
/// d ~ U(demand_min, demand_max) and ambient temperature OAT ~ U(oat_min, oat_max).
///
///   NP  = 300 + 1300 d                 + N(0, 12)
///   CS  = 82 + 18 sqrt(d)              + N(0, 0.3)
///   IAS = 40 + 100 d                   + N(0, 4)
///   PA  = 1850 - 6.5 OAT               + N(0, 10)
///   MGT = 420 + 0.30 NP + 2.2 OAT      + N(0, 6)
///   OT  = design_torque(d)             + N(0, 0.8),   design_torque(d) = 15 + 85 d
///
/// Each noise term is multiplied by `noise_scale`. An anomalous sample is a normal
/// draw with one fault applied, chosen by `fault_weights`, with severity multiplier
/// s ~ U(1 - severity_spread, 1 + severity_spread):
///
///   torque margin loss:    OT  -= torque_drop * s
///   over-temperature:      MGT += mgt_drift * s
///   coupling distortion:   NP += sign * distortion * 12 * s,
///                          CS -= sign * distortion * 0.3 * s,
///                          IAS -= sign * distortion * 4 * s     (sign = +-1)
struct SynthConfig {
  std::size_t n_samples = 20000;
  double anomaly_fraction = 0.40;
  std::uint64_t seed = 7;

  double oat_min = -10.0;
  double oat_max = 35.0;
  double demand_min = 0.2;
  double demand_max = 1.0;
  double noise_scale = 1.0;

  double torque_drop = 14.0;
  double mgt_drift = 100.0;
  double distortion = 12.0;
  double severity_spread = 0.4;
  std::array<double, 3> fault_weights{1.0, 1.0, 1.0};

  void validate() const {
    if (n_samples < 100) throw DomainError("synthetic n_samples must be >= 100");
    if (!(anomaly_fraction > 0.0 && anomaly_fraction < 1.0)) throw DomainError("anomaly_fraction must lie in (0,1)");
    if (!(oat_max > oat_min)) throw DomainError("oat_max must exceed oat_min");
    if (!(demand_min >= 0.0 && demand_max > demand_min)) throw DomainError("demand range must be increasing and >= 0");
    if (!(noise_scale >= 0.0)) throw DomainError("noise_scale must be >= 0");
    if (!(severity_spread >= 0.0 && severity_spread < 1.0)) throw DomainError("severity_spread must lie in [0,1)");
    double wsum = 0.0;
    for (double w : fault_weights) {
      if (!(w >= 0.0)) throw DomainError("fault weights must be >= 0");
      wsum += w;
    }
    if (!(wsum > 0.0)) throw DomainError("at least one fault weight must be positive");
  }
};

enum class FaultKind : std::uint8_t { TorqueMargin = 0, OverTemperature = 1, CouplingDistortion = 2 };

inline double design_torque(double demand) noexcept { return 15.0 + 85.0 * demand; }

namespace detail {

inline Features draw_normal(const SynthConfig& cfg, Rng& rng) {
  const double d = rng.uniform(cfg.demand_min, cfg.demand_max);
  const double oat = rng.uniform(cfg.oat_min, cfg.oat_max);
  const double k = cfg.noise_scale;
  Features f{};
  f[idx(Channel::OAT)] = oat;
  f[idx(Channel::NP)] = 300.0 + 1300.0 * d + rng.normal(0.0, 12.0 * k);
  f[idx(Channel::CS)] = 82.0 + 18.0 * std::sqrt(d) + rng.normal(0.0, 0.3 * k);
  f[idx(Channel::IAS)] = 40.0 + 100.0 * d + rng.normal(0.0, 4.0 * k);
  f[idx(Channel::PA)] = 1850.0 - 6.5 * oat + rng.normal(0.0, 10.0 * k);
  f[idx(Channel::MGT)] = 420.0 + 0.30 * f[idx(Channel::NP)] + 2.2 * oat + rng.normal(0.0, 6.0 * k);
  f[idx(Channel::OT)] = design_torque(d) + rng.normal(0.0, 0.8 * k);
  return f;
}

inline FaultKind draw_fault(const SynthConfig& cfg, Rng& rng) {
  const double total = cfg.fault_weights[0] + cfg.fault_weights[1] + cfg.fault_weights[2];
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < 2; ++i) {
    if (u < cfg.fault_weights[i]) return static_cast<FaultKind>(i);
    u -= cfg.fault_weights[i];
  }
  return FaultKind::CouplingDistortion;
}

inline void apply_fault(const SynthConfig& cfg, FaultKind kind, Features& f, Rng& rng) {
  const double s = rng.uniform(1.0 - cfg.severity_spread, 1.0 + cfg.severity_spread);
  switch (kind) {
    case FaultKind::TorqueMargin:
      f[idx(Channel::OT)] -= cfg.torque_drop * s;
      break;
    case FaultKind::OverTemperature:
      f[idx(Channel::MGT)] += cfg.mgt_drift * s;
      break;
    case FaultKind::CouplingDistortion: {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      f[idx(Channel::NP)] += sign * cfg.distortion * 12.0 * s;
      f[idx(Channel::CS)] -= sign * cfg.distortion * 0.3 * s;
      f[idx(Channel::IAS)] -= sign * cfg.distortion * 4.0 * s;
      break;
    }
  }
}

}  // namespace detail

/// Exactly round(n * anomaly_fraction) anomalous samples at seeded random positions.
inline Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const auto n_anom = static_cast<std::size_t>(
      std::llround(cfg.anomaly_fraction * static_cast<double>(cfg.n_samples)));
  std::vector<Label> labels(cfg.n_samples, Label::Normal);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_anom), Label::Anomalous);
  rng.shuffle(labels);

  Dataset data;
  data.samples.reserve(cfg.n_samples);
  for (Label l : labels) {
    TelemetrySample s;
    s.features = detail::draw_normal(cfg, rng);
    if (l == Label::Anomalous) detail::apply_fault(cfg, detail::draw_fault(cfg, rng), s.features, rng);
    s.label = l;
    data.samples.push_back(s);
  }
  return data;
}

}  // namespace aeromon
