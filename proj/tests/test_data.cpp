#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <set>

#include "stagenet/data.hpp"
#include "support.hpp"

using namespace stagenet;
using stagenet::testkit::TempDir;

namespace {

SynthSpec small_spec(double sigma, std::uint64_t seed) {
  SynthSpec s;
  s.n = 100;
  s.sigma = sigma;
  s.seed = seed;
  return s;
}

// Accuracy of assigning each sample to its nearest clean prototype.
double nearest_prototype_accuracy(const SynthSpec& spec, const Dataset& ds) {
  std::vector<std::vector<double>> protos;
  for (std::size_t k = 0; k < ds.num_classes; ++k) protos.push_back(synth_prototype(spec, k));
  std::size_t correct = 0;
  for (const auto& s : ds.samples) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < protos.size(); ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < protos[k].size(); ++i) d += (s.image.values()[i] - protos[k][i]) * (s.image.values()[i] - protos[k][i]);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    correct += best == s.label;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

}  // namespace

TEST(Synth, DefaultDistributionCounts) {
  const auto ds = synth_generate(small_spec(0.3, 1));
  EXPECT_EQ(ds.size(), 100u);
  EXPECT_EQ(ds.class_counts(), (std::vector<std::size_t>{32, 5, 33, 18, 12}));
  EXPECT_EQ(ds.image_shape(), (Shape{1, 16, 16}));
}

TEST(Synth, ApportionSumsAndKeepsEveryClass) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = 2 + rng.below(6);
    std::vector<double> p(c);
    double total = 0.0;
    for (auto& x : p) total += (x = rng.uniform(0.01, 1.0));
    for (auto& x : p) x /= total;
    const std::size_t n = c + rng.below(500);
    const auto counts = apportion(n, p);
    std::size_t sum = 0;
    for (std::size_t k = 0; k < c; ++k) {
      EXPECT_GE(counts[k], 1u);
      sum += counts[k];
    }
    EXPECT_EQ(sum, n);
  }
}

TEST(Synth, NoiselessSamplesOfAClassAreIdentical) {
  const auto spec = small_spec(0.0, 9);
  const auto ds = synth_generate(spec);
  for (const auto& s : ds.samples) {
    const auto proto = synth_prototype(spec, s.label);
    EXPECT_TRUE(std::equal(proto.begin(), proto.end(), s.image.values().begin()));
  }
}

TEST(Synth, PrototypesAreOrdinal) {
  const auto spec = small_spec(0.0, 0);
  double prev = -1.0;
  for (std::size_t k = 0; k < 5; ++k) {
    const auto p = synth_prototype(spec, k);
    double sum = 0.0;
    for (double v : p) sum += v;
    EXPECT_GT(sum, prev);
    prev = sum;
  }
}

TEST(Synth, DeterministicInSeed) {
  const auto a = synth_generate(small_spec(0.7, 5));
  const auto b = synth_generate(small_spec(0.7, 5));
  const auto c = synth_generate(small_spec(0.7, 6));
  EXPECT_EQ(encode_dataset(a), encode_dataset(b));
  EXPECT_NE(encode_dataset(a), encode_dataset(c));
}

TEST(Synth, NearestPrototypeSeparability) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    double prev = 2.0;
    for (double sigma : {0.0, 0.5, 2.0}) {
      SynthSpec spec = small_spec(sigma, seed);
      spec.n = 400;
      const double acc = nearest_prototype_accuracy(spec, synth_generate(spec));
      if (sigma == 0.0) {
        EXPECT_EQ(acc, 1.0);
      }
      EXPECT_LE(acc, prev) << "seed " << seed << " sigma " << sigma;
      prev = acc;
    }
  }
}

TEST(Synth, LabelNoiseDrawsOtherClasses) {
  SynthSpec spec = small_spec(0.0, 2);
  spec.n = 1000;
  spec.label_noise = 0.2;
  const auto ds = synth_generate(spec);
  const double acc = nearest_prototype_accuracy(spec, ds);
  EXPECT_NEAR(acc, 0.8, 0.05);
}

TEST(Synth, RejectsBadSpecs) {
  SynthSpec s;
  s.sigma = -1.0;
  EXPECT_THROW(synth_generate(s), ConfigError);
  s = SynthSpec{};
  s.n = 0;
  EXPECT_THROW(synth_generate(s), ConfigError);
  s = SynthSpec{};
  s.h = s.w = 4;
  EXPECT_THROW(synth_generate(s), ConfigError);
  EXPECT_THROW(ClassDistribution({0.5, 0.6}), ConfigError);
}

TEST(Synth, BuiltinsExist) {
  for (const char* name : {"synth-large", "synth-medium", "synth-small", "synth-small-test"}) {
    ASSERT_TRUE(builtin_synth_spec(name).has_value()) << name;
  }
  EXPECT_FALSE(builtin_synth_spec("nope").has_value());
  EXPECT_EQ(builtin_synth_spec("synth-small-test")->n, 103u);
}

TEST(Synth, SpecJsonRoundTripAndUnknownField) {
  SynthSpec s = *builtin_synth_spec("synth-medium");
  const auto back = synth_spec_from_json(nlohmann::json::parse(to_json(s).dump()));
  EXPECT_EQ(to_json(back), to_json(s));
  try {
    synth_spec_from_json({{"n", 10}, {"colour", 3}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("colour"), std::string::npos);
  }
  EXPECT_THROW(synth_spec_from_json({{"n", "ten"}}), ConfigError);
}

TEST(Split, TargetValidationCounts) {
  const auto ds = synth_generate(small_spec(0.3, 1));
  const auto split = stratified_split(ds, 0.1, 42);
  EXPECT_EQ(split.val.class_counts(), (std::vector<std::size_t>{3, 1, 3, 2, 1}));
  EXPECT_EQ(split.train.size() + split.val.size(), ds.size());
}

TEST(Split, HalfFraction) {
  const auto ds = synth_generate(small_spec(0.3, 1));
  const auto split = stratified_split(ds, 0.5, 42);
  const auto all = ds.class_counts();
  const auto val = split.val.class_counts();
  for (std::size_t k = 0; k < all.size(); ++k) EXPECT_EQ(val[k], (all[k] + 1) / 2);
}

TEST(Split, DisjointCoverAndProportions) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    SynthSpec spec = small_spec(0.5, rng.next_u64());
    spec.n = 20 + rng.below(200);
    const auto ds = synth_generate(spec);
    const double f = rng.uniform(0.05, 0.6);
    const auto split = stratified_split(ds, f, rng.next_u64());
    // Samples are identified by their pixel buffers, which are distinct
    // under noise.
    std::multiset<std::vector<double>> seen, all;
    for (const auto& s : ds.samples) all.insert({s.image.values().begin(), s.image.values().end()});
    for (const auto* part : {&split.train, &split.val}) {
      for (const auto& s : part->samples) seen.insert({s.image.values().begin(), s.image.values().end()});
    }
    EXPECT_EQ(seen, all);
    const auto counts = ds.class_counts();
    const auto val = split.val.class_counts();
    for (std::size_t k = 0; k < counts.size(); ++k) {
      if (counts[k] < 2) continue;
      EXPECT_LE(std::abs(static_cast<double>(val[k]) - f * static_cast<double>(counts[k])), 1.0);
      EXPECT_LT(val[k], counts[k]);
    }
  }
}

TEST(Split, SingletonStaysInTrain) {
  Dataset ds{"tiny", 2, {}};
  for (int i = 0; i < 5; ++i) ds.samples.push_back({Tensor({1, 2, 2}, {double(i), 0, 0, 0}), 0});
  ds.samples.push_back({Tensor({1, 2, 2}, {9, 9, 9, 9}), 1});
  const auto split = stratified_split(ds, 0.2, 1);
  EXPECT_EQ(split.val.class_counts()[1], 0u);
  EXPECT_EQ(split.train.class_counts()[1], 1u);
  EXPECT_EQ(split.singleton_classes, (std::vector<std::size_t>{1}));
  EXPECT_THROW(stratified_split(ds, 0.0, 1), ConfigError);
  EXPECT_THROW(stratified_split(ds, 1.0, 1), ConfigError);
}

TEST(Split, DeterministicInSeed) {
  const auto ds = synth_generate(small_spec(0.3, 1));
  EXPECT_EQ(encode_dataset(stratified_split(ds, 0.1, 5).val), encode_dataset(stratified_split(ds, 0.1, 5).val));
}

TEST(Augment, InvolutionsAndIdentities) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto img = stagenet::testkit::uniform_tensor(rng, {1, 6, 6}, -1, 1);
    EXPECT_TRUE(same_values(hflip(hflip(img)), img));
    EXPECT_TRUE(same_values(vflip(vflip(img)), img));
    EXPECT_TRUE(same_values(rot90(img, 4), img));
    EXPECT_TRUE(same_values(rot90(rot90(img, 1), 3), img));
    EXPECT_TRUE(same_values(rot90(img, 2), hflip(vflip(img))));
    EXPECT_TRUE(same_values(augment(img, AugmentOps{}, rng.next_u64()), img));
  }
}

TEST(Augment, Rot90IsCounterClockwise) {
  // [[1,2],[3,4]] turned a quarter counter-clockwise is [[2,4],[1,3]].
  const Tensor img({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_TRUE(same_values(rot90(img, 1), Tensor({1, 2, 2}, {2, 4, 1, 3})));
}

TEST(Augment, PreservesShapeAndPixelMultiset) {
  Rng rng(2);
  AugmentOps ops{true, true, true, 0.0};
  for (int trial = 0; trial < 50; ++trial) {
    const auto img = stagenet::testkit::uniform_tensor(rng, {1, 5, 5}, 0, 1);
    const auto out = augment(img, ops, rng);
    EXPECT_EQ(out.shape(), img.shape());
    std::vector<double> a(img.values().begin(), img.values().end()), b(out.values().begin(), out.values().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
}

TEST(Augment, JitterShiftsUniformly) {
  Rng rng(3);
  AugmentOps ops;
  ops.jitter = 0.5;
  const Tensor img({1, 3, 3}, std::vector<double>(9, 1.0));
  for (int trial = 0; trial < 50; ++trial) {
    const auto out = augment(img, ops, rng);
    const double d = out.values()[0] - 1.0;
    EXPECT_LE(std::abs(d), 0.5);
    for (double v : out.values()) EXPECT_DOUBLE_EQ(v - 1.0, d);
  }
}

TEST(Augment, RejectsNonSquareRotation) {
  AugmentOps ops;
  ops.rot90 = true;
  EXPECT_THROW(augment(Tensor({1, 2, 3}), ops, 1), ShapeError);
}

TEST(DatasetIo, RoundTripIsBitExact) {
  TempDir dir("data");
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    SynthSpec spec = small_spec(rng.uniform(0.0, 2.0), rng.next_u64());
    spec.n = 1 + rng.below(60);
    const auto ds = synth_generate(spec);
    const std::string path = dir.file("d" + std::to_string(trial) + ".bin");
    save_dataset(ds, path);
    const auto back = load_dataset(path);
    ASSERT_EQ(back.size(), ds.size());
    EXPECT_EQ(back.num_classes, ds.num_classes);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
      EXPECT_TRUE(same_values(back.samples[i].image, ds.samples[i].image));
    }
  }
}

TEST(DatasetIo, TruncatedAndForeignFilesAreRejected) {
  const auto bytes = encode_dataset(synth_generate(small_spec(0.1, 1)));
  try {
    decode_dataset(std::span(bytes.data(), bytes.size() - 3));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated dataset"), std::string::npos);
  }
  auto foreign = bytes;
  foreign[0] = 'X';
  try {
    decode_dataset(foreign);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("unrecognized format"), std::string::npos);
  }
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_dataset(trailing), FormatError);
}
