#pragma once

// Synthetic ordinal, class-imbalanced image datasets.
//
// Class k's clean prototype is a background plane plus the first k of a
// fixed sequence of square blobs, so both lit area and total intensity grow
// with the grade. Samples are prototype + i.i.d. Gaussian pixel noise. Blob
// positions come from `prototype_seed`, which related datasets share, while
// intensity and background level vary per dataset.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagenet/autodiff.hpp"
#include "stagenet/binary_io.hpp"
#include "stagenet/error.hpp"
#include "stagenet/rng.hpp"

namespace stagenet {

class ClassDistribution {
 public:
  ClassDistribution() = default;
  explicit ClassDistribution(std::vector<double> proportions) : p_(std::move(proportions)) {
    if (p_.empty()) throw ConfigError("distribution: needs at least one class");
    double total = 0.0;
    for (double v : p_) {
      if (!(v >= 0.0)) throw ConfigError("distribution: proportions must be >= 0");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("distribution: proportions must sum to 1");
  }

  // Five-grade skew of the small target task: 32% / 5% / 33% / 18% / 12%.
  static ClassDistribution target_default() { return ClassDistribution({0.32, 0.05, 0.33, 0.18, 0.12}); }

  std::size_t num_classes() const { return p_.size(); }
  std::span<const double> proportions() const { return p_; }

 private:
  std::vector<double> p_;
};

struct Sample {
  Tensor image;  // [1,h,w]
  std::size_t label = 0;
};

struct Dataset {
  std::string name;
  std::size_t num_classes = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto& s : samples) ++counts.at(s.label);
    return counts;
  }

  Shape image_shape() const { return samples.empty() ? Shape{} : samples.front().image.shape(); }
};

struct SynthSpec {
  std::string name = "synth";
  std::size_t n = 100;
  std::size_t h = 16;
  std::size_t w = 16;
  ClassDistribution distribution = ClassDistribution::target_default();
  double sigma = 0.0;  // pixel noise
  std::uint64_t seed = 0;
  // Appearance
  double blob_intensity = 1.0;
  double background = 0.0;
  std::size_t blob_size = 3;
  std::uint64_t prototype_seed = 7;
  // Fraction of samples whose image is drawn from a different class than
  // their label.
  double label_noise = 0.0;
};

// Largest-remainder apportionment of n over the proportions; ties go to the
// lower class index. When n covers every nonzero class, each such class gets
// at least one sample (taken from the currently largest class).
inline std::vector<std::size_t> apportion(std::size_t n, std::span<const double> proportions) {
  const std::size_t c = proportions.size();
  double total = 0.0;
  for (double p : proportions) total += p;
  std::vector<std::size_t> counts(c, 0);
  std::vector<double> remainder(c, 0.0);
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < c; ++k) {
    const double quota = static_cast<double>(n) * proportions[k] / total;
    counts[k] = static_cast<std::size_t>(std::floor(quota));
    remainder[k] = quota - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  std::vector<std::size_t> order(c);
  for (std::size_t k = 0; k < c; ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[order[i % c]];

  const auto nonzero = static_cast<std::size_t>(std::count_if(proportions.begin(), proportions.end(), [](double p) { return p > 0.0; }));
  if (n >= nonzero) {
    for (std::size_t k = 0; k < c; ++k) {
      if (proportions[k] > 0.0 && counts[k] == 0) {
        const auto donor = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
        --counts[donor];
        ++counts[k];
      }
    }
  }
  return counts;
}

namespace detail {

struct Blob {
  std::size_t y, x;
};

inline std::vector<Blob> place_blobs(const SynthSpec& spec, std::size_t count) {
  if (spec.blob_size == 0 || spec.blob_size > spec.h || spec.blob_size > spec.w) {
    throw ConfigError("blob_size must be in [1, min(h, w)]");
  }
  Rng rng(spec.prototype_seed);
  std::vector<Blob> blobs;
  const std::size_t s = spec.blob_size;
  for (int attempt = 0; blobs.size() < count; ++attempt) {
    if (attempt > 100000) throw ConfigError("image too small to place " + std::to_string(count) + " disjoint blobs");
    const Blob b{static_cast<std::size_t>(rng.below(spec.h - s + 1)), static_cast<std::size_t>(rng.below(spec.w - s + 1))};
    // Keep a one-pixel gap between blobs.
    const bool clear = std::all_of(blobs.begin(), blobs.end(), [&](const Blob& o) {
      return b.y + s + 1 <= o.y || o.y + s + 1 <= b.y || b.x + s + 1 <= o.x || o.x + s + 1 <= b.x;
    });
    if (clear) blobs.push_back(b);
  }
  return blobs;
}

}  // namespace detail

// Clean image of class k (row-major h*w).
inline std::vector<double> synth_prototype(const SynthSpec& spec, std::size_t k) {
  const auto blobs = detail::place_blobs(spec, spec.distribution.num_classes() - 1);
  std::vector<double> img(spec.h * spec.w, spec.background);
  for (std::size_t b = 0; b < k && b < blobs.size(); ++b) {
    for (std::size_t y = 0; y < spec.blob_size; ++y)
      for (std::size_t x = 0; x < spec.blob_size; ++x) img[(blobs[b].y + y) * spec.w + blobs[b].x + x] += spec.blob_intensity;
  }
  return img;
}

// Pixel mask of the blobs present in class k's prototype.
inline std::vector<bool> synth_blob_mask(const SynthSpec& spec, std::size_t k) {
  const auto blobs = detail::place_blobs(spec, spec.distribution.num_classes() - 1);
  std::vector<bool> mask(spec.h * spec.w, false);
  for (std::size_t b = 0; b < k && b < blobs.size(); ++b) {
    for (std::size_t y = 0; y < spec.blob_size; ++y)
      for (std::size_t x = 0; x < spec.blob_size; ++x) mask[(blobs[b].y + y) * spec.w + blobs[b].x + x] = true;
  }
  return mask;
}

inline void validate(const SynthSpec& spec) {
  const std::size_t c = spec.distribution.num_classes();
  if (c < 2 || c > 255) throw ConfigError("distribution: class count must be in [2, 255]");
  if (spec.n == 0) throw ConfigError("n: must be >= 1");
  if (spec.h == 0 || spec.w == 0 || spec.h > 65535 || spec.w > 65535) throw ConfigError("h/w: must be in [1, 65535]");
  if (!(spec.sigma >= 0.0)) throw ConfigError("sigma: must be >= 0");
  if (!(spec.label_noise >= 0.0 && spec.label_noise <= 1.0)) throw ConfigError("label_noise: must be in [0, 1]");
  detail::place_blobs(spec, c - 1);
}

inline Dataset synth_generate(const SynthSpec& spec) {
  validate(spec);
  const std::size_t c = spec.distribution.num_classes();
  const auto counts = apportion(spec.n, spec.distribution.proportions());
  std::vector<std::vector<double>> prototypes;
  for (std::size_t k = 0; k < c; ++k) prototypes.push_back(synth_prototype(spec, k));

  std::vector<std::size_t> labels;
  labels.reserve(spec.n);
  for (std::size_t k = 0; k < c; ++k) labels.insert(labels.end(), counts[k], k);
  Rng order_rng(derive_seed(spec.seed, 1));
  order_rng.shuffle(std::span(labels));

  Rng noise_rng(derive_seed(spec.seed, 2));
  Rng flip_rng(derive_seed(spec.seed, 3));
  Dataset ds{spec.name, c, {}};
  ds.samples.reserve(spec.n);
  for (std::size_t label : labels) {
    std::size_t source = label;
    if (spec.label_noise > 0.0 && flip_rng.uniform() < spec.label_noise) {
      source = (label + 1 + flip_rng.below(c - 1)) % c;
    }
    std::vector<double> pixels = prototypes[source];
    if (spec.sigma > 0.0) {
      for (double& v : pixels) v += spec.sigma * noise_rng.normal();
    }
    ds.samples.push_back({Tensor({1, spec.h, spec.w}, std::move(pixels)), label});
  }
  return ds;
}

// Named desk-scale stand-ins for a large noisy source, a medium source and
// the small target (train and test). They share one blob layout and differ
// in skew, noise and appearance.
inline std::optional<SynthSpec> builtin_synth_spec(const std::string& name) {
  SynthSpec s;
  s.name = name;
  s.blob_size = 5;
  if (name == "synth-large") {
    s.n = 5000;
    s.distribution = ClassDistribution({0.73, 0.07, 0.15, 0.03, 0.02});
    s.sigma = 1.0;
    s.blob_intensity = 2.0;
    s.background = 0.0;
    s.label_noise = 0.05;
    s.seed = 101;
  } else if (name == "synth-medium") {
    s.n = 1200;
    s.distribution = ClassDistribution({0.50, 0.05, 0.36, 0.02, 0.07});
    s.sigma = 1.0;
    s.blob_intensity = 1.6;
    s.background = 0.4;
    s.seed = 202;
  } else if (name == "synth-small" || name == "synth-small-test") {
    s.n = name == "synth-small" ? 100 : 103;
    s.sigma = 0.6;
    s.blob_intensity = 0.9;
    s.background = -0.2;
    s.seed = name == "synth-small" ? 303 : 304;
  } else {
    return std::nullopt;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Splitting

struct Split {
  Dataset train;
  Dataset val;
  std::vector<std::size_t> singleton_classes;  // classes kept wholly in train
};

// Per class: validation count = round-half-up(count * fraction), at least 1
// when the class has two or more samples, and never the whole class.
inline std::size_t stratified_val_count(std::size_t count, double fraction) {
  if (count < 2) return 0;
  auto v = static_cast<std::size_t>(std::floor(static_cast<double>(count) * fraction + 0.5 + 1e-9));
  return std::clamp<std::size_t>(v, 1, count - 1);
}

inline Split stratified_split(const Dataset& ds, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(ds.samples[i].label).push_back(i);

  Split out{{ds.name + "/train", ds.num_classes, {}}, {ds.name + "/val", ds.num_classes, {}}, {}};
  std::vector<bool> in_val(ds.size(), false);
  Rng rng(seed);
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& idx = by_class[k];
    if (idx.size() == 1) out.singleton_classes.push_back(k);
    const std::size_t v = stratified_val_count(idx.size(), val_fraction);
    rng.shuffle(std::span(idx));
    for (std::size_t i = 0; i < v; ++i) in_val[idx[i]] = true;
  }
  for (std::size_t i = 0; i < ds.size(); ++i) (in_val[i] ? out.val : out.train).samples.push_back(ds.samples[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentOps {
  bool hflip = false;
  bool vflip = false;
  bool rot90 = false;     // k in {1,2,3} quarter turns, square images only
  double jitter = 0.0;    // additive brightness shift ~ U(-jitter, jitter)

  bool any() const { return hflip || vflip || rot90 || jitter > 0.0; }
};

namespace detail {

inline std::vector<double> hflip(std::span<const double> img, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> out(img.size());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = img[(k * h + y) * w + (w - 1 - x)];
  return out;
}

inline std::vector<double> vflip(std::span<const double> img, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> out(img.size());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = img[(k * h + (h - 1 - y)) * w + x];
  return out;
}

// One counter-clockwise quarter turn of a square image.
inline std::vector<double> rot90(std::span<const double> img, std::size_t c, std::size_t n) {
  std::vector<double> out(img.size());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) out[(k * n + (n - 1 - x)) * n + y] = img[(k * n + y) * n + x];
  return out;
}

}  // namespace detail

inline Tensor hflip(const Tensor& image) {
  return Tensor(image.shape(), detail::hflip(image.values(), image.shape()[0], image.shape()[1], image.shape()[2]));
}
inline Tensor vflip(const Tensor& image) {
  return Tensor(image.shape(), detail::vflip(image.values(), image.shape()[0], image.shape()[1], image.shape()[2]));
}
inline Tensor rot90(const Tensor& image, int quarter_turns) {
  if (image.shape()[1] != image.shape()[2]) throw ShapeError("rot90 requires a square image");
  std::vector<double> v(image.values().begin(), image.values().end());
  for (int t = 0; t < ((quarter_turns % 4) + 4) % 4; ++t) v = detail::rot90(v, image.shape()[0], image.shape()[1]);
  return Tensor(image.shape(), std::move(v));
}

// Each enabled op fires independently with probability 1/2, in the order
// hflip, vflip, rot90, jitter.
inline Tensor augment(const Tensor& image, const AugmentOps& ops, Rng& rng) {
  if (image.rank() != 3) throw ShapeError("augment expects [c,h,w], got " + shape_str(image.shape()));
  if (ops.rot90 && image.shape()[1] != image.shape()[2]) throw ShapeError("rot90 augmentation requires square images");
  Tensor out = image.detach();
  if (ops.hflip && rng.coin()) out = hflip(out);
  if (ops.vflip && rng.coin()) out = vflip(out);
  if (ops.rot90 && rng.coin()) out = rot90(out, 1 + static_cast<int>(rng.below(3)));
  if (ops.jitter > 0.0 && rng.coin()) {
    const double delta = rng.uniform(-ops.jitter, ops.jitter);
    for (double& v : out.mutable_values()) v += delta;
  }
  return out;
}

inline Tensor augment(const Tensor& image, const AugmentOps& ops, std::uint64_t seed) {
  Rng rng(seed);
  return augment(image, ops, rng);
}

// ---------------------------------------------------------------------------
// Binary format: "STDS0001", u32 n, u16 C, u16 h, u16 w, then n records of
// (u8 label, h*w little-endian f64). Single-channel images only.

inline constexpr std::string_view kDatasetMagic = "STDS0001";

inline std::vector<char> encode_dataset(const Dataset& ds) {
  if (ds.num_classes == 0 || ds.num_classes > 255) throw ConfigError("dataset class count must be in [1, 255]");
  std::size_t h = 1, w = 1;
  if (!ds.empty()) {
    const auto& s = ds.image_shape();
    if (s.size() != 3 || s[0] != 1) throw ShapeError("dataset format stores [1,h,w] images only");
    h = s[1];
    w = s[2];
  }
  io::Writer out;
  out.bytes(kDatasetMagic);
  out.le(static_cast<std::uint32_t>(ds.size()));
  out.le(static_cast<std::uint16_t>(ds.num_classes));
  out.le(static_cast<std::uint16_t>(h));
  out.le(static_cast<std::uint16_t>(w));
  for (const auto& s : ds.samples) {
    if (s.image.shape() != Shape{1, h, w}) throw ShapeError("dataset images must share one shape");
    out.le(static_cast<std::uint8_t>(s.label));
    for (double v : s.image.values()) out.f64(v);
  }
  return out.buffer();
}

inline Dataset decode_dataset(std::span<const char> bytes, std::string name = "dataset") {
  io::Reader in(bytes, "truncated dataset");
  if (bytes.size() < kDatasetMagic.size() || in.bytes(kDatasetMagic.size()) != kDatasetMagic) {
    throw FormatError(FormatError::Kind::unrecognized, "unrecognized format: not a dataset file");
  }
  const auto n = in.le<std::uint32_t>();
  const auto c = in.le<std::uint16_t>();
  const auto h = in.le<std::uint16_t>();
  const auto w = in.le<std::uint16_t>();
  if (c == 0 || c > 255 || h == 0 || w == 0) {
    throw FormatError(FormatError::Kind::malformed, "malformed dataset header (C=" + std::to_string(c) +
                                                        ", h=" + std::to_string(h) + ", w=" + std::to_string(w) + ")");
  }
  const std::size_t record = 1 + 8 * static_cast<std::size_t>(h) * w;
  if (in.remaining() < record * n) throw FormatError(FormatError::Kind::truncated, "truncated dataset");
  Dataset ds{std::move(name), c, {}};
  ds.samples.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto label = in.le<std::uint8_t>();
    if (label >= c) throw FormatError(FormatError::Kind::malformed, "malformed dataset: label out of range in record " + std::to_string(i));
    std::vector<double> px(static_cast<std::size_t>(h) * w);
    for (double& v : px) v = in.f64();
    ds.samples.push_back({Tensor({1, h, w}, std::move(px)), label});
  }
  if (!in.at_end()) throw FormatError(FormatError::Kind::malformed, "malformed dataset: trailing bytes");
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  io::write_file(path, encode_dataset(ds));
}

inline Dataset load_dataset(const std::string& path) { return decode_dataset(io::read_file(path), path); }

// ---------------------------------------------------------------------------
// JSON for SynthSpec

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"name", s.name},
          {"n", s.n},
          {"h", s.h},
          {"w", s.w},
          {"distribution", std::vector<double>(s.distribution.proportions().begin(), s.distribution.proportions().end())},
          {"sigma", s.sigma},
          {"seed", s.seed},
          {"blob_intensity", s.blob_intensity},
          {"background", s.background},
          {"blob_size", s.blob_size},
          {"prototype_seed", s.prototype_seed},
          {"label_noise", s.label_noise}};
}

// Missing keys keep their defaults. Errors name the offending field.
inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("synth spec must be a JSON object");
  static const std::vector<std::string> known = {"name", "n", "h", "w", "distribution", "sigma", "seed",
                                                 "blob_intensity", "background", "blob_size", "prototype_seed", "label_noise"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("synth spec: unknown field '" + key + "'");
  }
  SynthSpec s;
  auto field = [&](const char* key, auto& target) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(target);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("synth spec: field '") + key + "' has the wrong type");
    }
  };
  field("name", s.name);
  field("n", s.n);
  field("h", s.h);
  field("w", s.w);
  field("sigma", s.sigma);
  field("seed", s.seed);
  field("blob_intensity", s.blob_intensity);
  field("background", s.background);
  field("blob_size", s.blob_size);
  field("prototype_seed", s.prototype_seed);
  field("label_noise", s.label_noise);
  if (j.contains("distribution")) {
    std::vector<double> p;
    field("distribution", p);
    try {
      s.distribution = ClassDistribution(std::move(p));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("synth spec: field 'distribution' invalid (") + e.what() + ")");
    }
  }
  try {
    validate(s);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  return s;
}

}  // namespace stagenet
