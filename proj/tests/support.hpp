#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "stagenet/autodiff.hpp"
#include "stagenet/metrics.hpp"
#include "stagenet/rng.hpp"

namespace stagenet::testkit {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Compares backward() against central differences on every element of every
// tensor in `params`. `loss_fn` must rebuild the graph from current values.
// Relative error is |a - n| / max(|a|, |n|, floor).
template <typename F>
GradCheck gradient_check(std::vector<Tensor> params, F loss_fn, double h = 1e-5, double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    analytic.emplace_back(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.back().begin());
  }
  GradCheck out;
  NoGradGuard guard;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = loss_fn().item();
      values[i] = orig - h;
      const double down = loss_fn().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
      ++out.checked;
    }
  }
  for (auto& p : params) p.zero_grad();
  return out;
}

inline std::vector<double> uniform_values(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline Tensor uniform_tensor(Rng& rng, Shape shape, double lo, double hi, bool requires_grad = false) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), uniform_values(rng, n, lo, hi), requires_grad);
}

// Random C x C count matrix with at least one nonzero entry.
inline ConfusionMatrix random_confusion(Rng& rng, std::size_t c, std::uint64_t max_count) {
  std::vector<std::uint64_t> counts(c * c);
  for (auto& x : counts) x = rng.below(max_count + 1);
  if (std::all_of(counts.begin(), counts.end(), [](auto x) { return x == 0; })) counts[rng.below(counts.size())] = 1;
  return ConfusionMatrix(c, std::move(counts));
}

// Quadratic weighted kappa from its definition over explicit samples:
// observed = mean over samples of w(t, p); expected = mean over all
// (sample, sample') pairs of w(t, p'). O(N^2) in the sample count.
inline double brute_force_qwk(const ConfusionMatrix& cm) {
  const std::size_t c = cm.num_classes();
  std::vector<std::size_t> truths, preds;
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      for (std::uint64_t k = 0; k < cm.at(i, j); ++k) {
        truths.push_back(i);
        preds.push_back(j);
      }
    }
  }
  const double denom = static_cast<double>((c - 1) * (c - 1));
  auto w = [&](std::size_t a, std::size_t b) {
    const double d = static_cast<double>(a) - static_cast<double>(b);
    return d * d / denom;
  };
  const double n = static_cast<double>(truths.size());
  double observed = 0.0;
  for (std::size_t s = 0; s < truths.size(); ++s) observed += w(truths[s], preds[s]);
  double expected = 0.0;
  for (std::size_t s = 0; s < truths.size(); ++s) {
    for (std::size_t r = 0; r < preds.size(); ++r) expected += w(truths[s], preds[r]);
  }
  return 1.0 - (observed / n) / (expected / (n * n));
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("stagenet-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace stagenet::testkit
