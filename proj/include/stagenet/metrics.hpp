#pragma once

// Confusion-matrix metrics for ordinal classification. Rows are ground
// truth, columns are predictions.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagenet/error.hpp"

namespace stagenet {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes) : c_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0) throw ConfigError("confusion matrix needs at least one class");
  }

  ConfusionMatrix(std::size_t num_classes, std::vector<std::uint64_t> counts) : c_(num_classes), counts_(std::move(counts)) {
    if (num_classes == 0 || counts_.size() != c_ * c_) {
      throw ShapeError("confusion matrix of " + std::to_string(c_) + " classes needs " + std::to_string(c_ * c_) +
                       " counts");
    }
  }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
      if (rows[t].size() != rows.size()) throw ShapeError("confusion matrix rows must be square");
      for (std::size_t p = 0; p < rows.size(); ++p) cm.at(t, p) = rows[t][p];
    }
    return cm;
  }

  std::size_t num_classes() const { return c_; }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_[truth * c_ + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * c_ + pred]; }
  std::span<const std::uint64_t> counts() const { return counts_; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
  }
  std::uint64_t row_sum(std::size_t truth) const {
    std::uint64_t t = 0;
    for (std::size_t p = 0; p < c_; ++p) t += at(truth, p);
    return t;
  }
  std::uint64_t col_sum(std::size_t pred) const {
    std::uint64_t t = 0;
    for (std::size_t r = 0; r < c_; ++r) t += at(r, pred);
    return t;
  }

  ConfusionMatrix transpose() const {
    ConfusionMatrix out(c_);
    for (std::size_t r = 0; r < c_; ++r)
      for (std::size_t p = 0; p < c_; ++p) out.at(p, r) = at(r, p);
    return out;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t c_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion_matrix(std::span<const std::size_t> truths, std::span<const std::size_t> preds,
                                        std::size_t num_classes) {
  if (truths.size() != preds.size()) {
    throw ShapeError("confusion_matrix: " + std::to_string(truths.size()) + " truths vs " +
                     std::to_string(preds.size()) + " predictions");
  }
  if (truths.empty()) throw ConfigError("confusion_matrix: empty input");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i] >= num_classes || preds[i] >= num_classes) {
      throw IndexError("confusion_matrix: label out of range at position " + std::to_string(i));
    }
    ++cm.at(truths[i], preds[i]);
  }
  return cm;
}

inline double accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw UndefinedError("accuracy of an empty confusion matrix");
  std::uint64_t trace = 0;
  for (std::size_t k = 0; k < cm.num_classes(); ++k) trace += cm.at(k, k);
  return static_cast<double>(trace) / static_cast<double>(total);
}

// kappa = 1 - Σ w_ij O_ij / Σ w_ij E_ij with w_ij = (i-j)^2/(C-1)^2 and
// E the outer product of the marginals over the total. The (C-1)^2 and the
// total cancel, leaving integer sums over the unordered pairs {i,j}:
//   kappa = 1 - N Σ d^2 (O_ij + O_ji) / Σ d^2 (r_i c_j + r_j c_i).
// These are exact, so kappa(M) == kappa(M^T) bit for bit.
inline double quadratic_weighted_kappa(const ConfusionMatrix& cm) {
  const std::size_t c = cm.num_classes();
  if (c < 2) throw ConfigError("quadratic weighted kappa needs at least 2 classes");
  const auto total = cm.total();
  if (total == 0) throw UndefinedError("kappa of an empty confusion matrix");
  using wide = unsigned __int128;
  std::vector<wide> rows(c), cols(c);
  for (std::size_t k = 0; k < c; ++k) {
    rows[k] = cm.row_sum(k);
    cols[k] = cm.col_sum(k);
  }
  wide observed = 0, expected = 0;
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = i + 1; j < c; ++j) {
      const wide d2 = static_cast<wide>((j - i) * (j - i));
      observed += d2 * (static_cast<wide>(cm.at(i, j)) + cm.at(j, i));
      expected += d2 * (rows[i] * cols[j] + rows[j] * cols[i]);
    }
  }
  if (expected == 0) {
    if (observed == 0) return 1.0;
    throw UndefinedError("kappa undefined: expected disagreement is zero");
  }
  return 1.0 - static_cast<double>(observed * total) / static_cast<double>(expected);
}

using RealMatrix = std::vector<std::vector<double>>;

inline RealMatrix normalize_rows(const ConfusionMatrix& cm) {
  const std::size_t c = cm.num_classes();
  RealMatrix out(c, std::vector<double>(c, 0.0));
  for (std::size_t r = 0; r < c; ++r) {
    const auto s = cm.row_sum(r);
    if (s == 0) continue;
    for (std::size_t p = 0; p < c; ++p) out[r][p] = static_cast<double>(cm.at(r, p)) / static_cast<double>(s);
  }
  return out;
}

struct OneVsRest {
  std::size_t positive_class = 0;
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::optional<double> fpr;  // empty when there are no negatives
  std::optional<double> fnr;  // empty when there are no positives
};

inline OneVsRest one_vs_rest(const ConfusionMatrix& cm, std::size_t positive_class) {
  if (positive_class >= cm.num_classes()) {
    throw IndexError("positive class " + std::to_string(positive_class) + " out of range");
  }
  OneVsRest r;
  r.positive_class = positive_class;
  r.tp = cm.at(positive_class, positive_class);
  r.fn = cm.row_sum(positive_class) - r.tp;
  r.fp = cm.col_sum(positive_class) - r.tp;
  r.tn = cm.total() - r.tp - r.fn - r.fp;
  if (r.fp + r.tn > 0) r.fpr = static_cast<double>(r.fp) / static_cast<double>(r.fp + r.tn);
  if (r.tp + r.fn > 0) r.fnr = static_cast<double>(r.fn) / static_cast<double>(r.tp + r.fn);
  return r;
}

struct MetricsReport {
  double accuracy = 0.0;
  std::optional<double> kappa;
  ConfusionMatrix confusion{1};
  RealMatrix confusion_row_normalized;
  std::vector<OneVsRest> per_class;

  // Recall of class k, empty when class k is absent from the truths.
  std::optional<double> recall(std::size_t k) const {
    const auto& r = per_class.at(k);
    if (!r.fnr) return std::nullopt;
    return 1.0 - *r.fnr;
  }
};

inline MetricsReport make_report(const ConfusionMatrix& cm) {
  MetricsReport rep;
  rep.accuracy = accuracy(cm);
  try {
    rep.kappa = quadratic_weighted_kappa(cm);
  } catch (const UndefinedError&) {
    rep.kappa.reset();
  }
  rep.confusion = cm;
  rep.confusion_row_normalized = normalize_rows(cm);
  for (std::size_t k = 0; k < cm.num_classes(); ++k) rep.per_class.push_back(one_vs_rest(cm, k));
  return rep;
}

namespace detail {
inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
inline std::optional<double> optional_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}
}  // namespace detail

inline nlohmann::json to_json(const MetricsReport& rep) {
  using nlohmann::json;
  const std::size_t c = rep.confusion.num_classes();
  json confusion = json::array();
  for (std::size_t r = 0; r < c; ++r) {
    json row = json::array();
    for (std::size_t p = 0; p < c; ++p) row.push_back(rep.confusion.at(r, p));
    confusion.push_back(std::move(row));
  }
  json per_class = json::array();
  for (const auto& o : rep.per_class) {
    per_class.push_back({{"class", o.positive_class},
                         {"tp", o.tp},
                         {"fp", o.fp},
                         {"fn", o.fn},
                         {"tn", o.tn},
                         {"fpr", detail::optional_json(o.fpr)},
                         {"fnr", detail::optional_json(o.fnr)}});
  }
  return {{"accuracy", rep.accuracy},
          {"kappa", detail::optional_json(rep.kappa)},
          {"confusion", std::move(confusion)},
          {"confusion_row_normalized", rep.confusion_row_normalized},
          {"per_class", std::move(per_class)}};
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  try {
    const auto rows = j.at("confusion").get<std::vector<std::vector<std::uint64_t>>>();
    MetricsReport rep = make_report(ConfusionMatrix::from_rows(rows));
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed, std::string("metrics report: ") + e.what());
  }
}

}  // namespace stagenet
