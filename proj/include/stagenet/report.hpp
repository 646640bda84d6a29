#pragma once

// Plain-text rendering of metrics and ablation reports.

#include <cstdio>
#include <string>

#include <nlohmann/json.hpp>

#include "stagenet/metrics.hpp"
#include "stagenet/pipeline.hpp"

namespace stagenet {

namespace detail {

template <typename... Args>
std::string fmt(const char* pattern, Args... args) {
  const int n = std::snprintf(nullptr, 0, pattern, args...);
  std::string out(static_cast<std::size_t>(n), '\0');
  std::snprintf(out.data(), out.size() + 1, pattern, args...);
  return out;
}

inline std::string opt_str(const std::optional<double>& v, const char* pattern = "%.4f") {
  return v ? fmt(pattern, *v) : std::string("n/a");
}

}  // namespace detail

inline std::string render_metrics(const MetricsReport& rep) {
  using detail::fmt;
  const std::size_t c = rep.confusion.num_classes();
  std::string out = fmt("accuracy %.4f  kappa %s  (n=%llu)\n", rep.accuracy, detail::opt_str(rep.kappa).c_str(),
                        static_cast<unsigned long long>(rep.confusion.total()));

  auto header = [&] {
    std::string h = "truth\\pred";
    for (std::size_t p = 0; p < c; ++p) h += fmt("%7zu", p);
    return h + "\n";
  };
  out += "\nconfusion (counts)\n" + header();
  for (std::size_t r = 0; r < c; ++r) {
    out += fmt("%10zu", r);
    for (std::size_t p = 0; p < c; ++p) out += fmt("%7llu", static_cast<unsigned long long>(rep.confusion.at(r, p)));
    out += "\n";
  }
  out += "\nconfusion (row-normalized)\n" + header();
  for (std::size_t r = 0; r < c; ++r) {
    out += fmt("%10zu", r);
    for (std::size_t p = 0; p < c; ++p) out += fmt("%7.3f", rep.confusion_row_normalized[r][p]);
    out += "\n";
  }
  out += "\nclass     tp     fp     fn     tn     fpr     fnr\n";
  for (const auto& o : rep.per_class) {
    out += fmt("%5zu %6llu %6llu %6llu %6llu %7s %7s\n", o.positive_class, static_cast<unsigned long long>(o.tp),
               static_cast<unsigned long long>(o.fp), static_cast<unsigned long long>(o.fn),
               static_cast<unsigned long long>(o.tn), detail::opt_str(o.fpr).c_str(), detail::opt_str(o.fnr).c_str());
  }
  return out;
}

inline AblationReport ablation_from_json(const nlohmann::json& j) {
  try {
    AblationReport rep;
    for (const auto& r : j.at("rows")) {
      AblationRow row;
      row.plan = r.at("plan").get<std::string>();
      row.mean_accuracy = r.at("mean_accuracy").get<double>();
      row.stdev_accuracy = r.at("stdev_accuracy").get<double>();
      row.mean_kappa = r.at("mean_kappa").get<double>();
      row.stdev_kappa = r.at("stdev_kappa").get<double>();
      for (const auto& run : r.at("runs")) {
        AblationRun a;
        a.seed = run.at("seed").get<std::uint64_t>();
        a.accuracy = run.at("accuracy").get<double>();
        a.kappa = run.at("kappa").get<double>();
        for (const auto& v : run.at("recall")) a.recall.push_back(detail::optional_from_json(v));
        row.runs.push_back(std::move(a));
      }
      rep.rows.push_back(std::move(row));
    }
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed, std::string("ablation report: ") + e.what());
  }
}

inline std::string render_ablation(const AblationReport& rep) {
  using detail::fmt;
  std::size_t width = 6;
  for (const auto& r : rep.rows) width = std::max(width, r.plan.size());
  const int w = static_cast<int>(width);
  std::string out = fmt("%-*s  %6s  %17s  %17s\n", w, "scheme", "seeds", "accuracy", "kappa");
  for (const auto& r : rep.rows) {
    out += fmt("%-*s  %6zu  %.4f +- %.4f  %.4f +- %.4f\n", w, r.plan.c_str(), r.runs.size(), r.mean_accuracy,
               r.stdev_accuracy, r.mean_kappa, r.stdev_kappa);
  }
  return out;
}

}  // namespace stagenet
