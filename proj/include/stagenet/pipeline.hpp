#pragma once

// Stage-based training: a StagePlan is an ordered list of stages, each
// training the network on one dataset, starting from nothing (seeded init),
// an earlier stage's best checkpoint, an external checkpoint file, or an
// ensemble of earlier stages. Representation stages train every layer with
// cross-entropy; classifier stages freeze the backbone, reinitialize the
// final layer and retrain it (typically with the class-balanced loss).

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagenet/autodiff.hpp"
#include "stagenet/binary_io.hpp"
#include "stagenet/data.hpp"
#include "stagenet/error.hpp"
#include "stagenet/losses.hpp"
#include "stagenet/metrics.hpp"
#include "stagenet/model.hpp"
#include "stagenet/rng.hpp"

namespace stagenet {

// ---------------------------------------------------------------------------
// Optimizer

// Heavy-ball momentum: v <- momentum * v + g; p <- p - lr * v.
inline void sgd_momentum_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
                              double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd step: params/grads/velocity sizes differ (" + std::to_string(params.size()) + "/" +
                     std::to_string(grads.size()) + "/" + std::to_string(velocity.size()) + ")");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor> params, double lr, double momentum)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
  }

  // Parameters without a gradient this step are treated as having g = 0.
  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const std::vector<double> zeros = p.has_grad() ? std::vector<double>{} : std::vector<double>(p.numel(), 0.0);
      const std::span<const double> g = p.has_grad() ? p.grad() : std::span<const double>(zeros);
      sgd_momentum_step(p.mutable_values(), g, velocity_[i], lr_, momentum_);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_;
  double momentum_;
};

// ---------------------------------------------------------------------------
// Plan types

enum class LossKind { ce, cbce };
enum class TrainableScope { all, final_classifier_only };

struct LossSpec {
  LossKind kind = LossKind::ce;
  double beta = 0.9999;
  bool normalize = true;
  bool operator==(const LossSpec&) const = default;
};

struct InitRef {
  enum class Kind { none, stage, checkpoint_file, ensemble };
  Kind kind = Kind::none;
  std::string stage;                // Kind::stage
  std::string path;                 // Kind::checkpoint_file
  EnsembleMode mode = EnsembleMode::average;  // Kind::ensemble
  std::vector<std::string> stages;  // Kind::ensemble

  static InitRef from_stage(std::string name) {
    InitRef r;
    r.kind = Kind::stage;
    r.stage = std::move(name);
    return r;
  }
  static InitRef from_file(std::string p) {
    InitRef r;
    r.kind = Kind::checkpoint_file;
    r.path = std::move(p);
    return r;
  }
  static InitRef from_ensemble(EnsembleMode mode, std::vector<std::string> stages) {
    InitRef r;
    r.kind = Kind::ensemble;
    r.mode = mode;
    r.stages = std::move(stages);
    return r;
  }
  bool operator==(const InitRef&) const = default;
};

struct StageSpec {
  std::string name;
  std::string dataset;
  std::size_t epochs = 1;
  double learning_rate = 0.001;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  LossSpec loss;
  TrainableScope trainable_scope = TrainableScope::all;
  bool reinit_final = false;
  InitRef init_from;
  AugmentOps augmentation;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
};

struct DatasetSource {
  enum class Kind { synth, file };
  Kind kind = Kind::synth;
  SynthSpec synth;
  std::string path;
};

struct StagePlan {
  std::string name;
  std::optional<NetworkSpec> architecture;    // default: NetworkSpec::default_for(C)
  std::map<std::string, DatasetSource> datasets;  // extra names beyond the built-in synth-* sets
  std::vector<StageSpec> stages;
  std::string evaluation;
  InitRef evaluate;  // weights to evaluate; none = the last stage's output
};

struct RunRecord {
  std::string stage;
  std::vector<double> train_losses;
  std::vector<double> val_losses;
  std::size_t best_epoch = 0;  // 1-based
  std::string checkpoint;      // stage name, or file name once written
  std::optional<MetricsReport> metrics;
};

// 1-based index of the smallest value; earliest wins ties.
inline std::size_t best_epoch_of(std::span<const double> val_losses) {
  if (val_losses.empty()) throw ConfigError("no validation losses recorded");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_losses.size(); ++i) {
    if (val_losses[i] < val_losses[best]) best = i;
  }
  return best + 1;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

inline std::vector<std::size_t> predict_all(const Network& net, const Dataset& ds) {
  std::vector<std::size_t> out;
  out.reserve(ds.size());
  for (const auto& s : ds.samples) out.push_back(net.predict(s.image));
  return out;
}

inline MetricsReport evaluate(const Network& net, const Dataset& ds) {
  if (ds.num_classes != net.num_classes()) {
    throw ConfigError("dataset has " + std::to_string(ds.num_classes) + " classes but the network predicts " +
                      std::to_string(net.num_classes()));
  }
  std::vector<std::size_t> truths;
  for (const auto& s : ds.samples) truths.push_back(s.label);
  return make_report(confusion_matrix(truths, predict_all(net, ds), ds.num_classes));
}

namespace detail {

inline std::optional<ClassWeights> stage_weights(const LossSpec& loss, const Dataset& train) {
  if (loss.kind == LossKind::ce) return std::nullopt;
  const auto counts = train.class_counts();
  auto w = effective_number_weights(counts, loss.beta);
  return loss.normalize ? normalize_weights(w) : w;
}

inline Tensor batch_loss(std::span<const Tensor> logits, std::span<const std::size_t> labels,
                         const std::optional<ClassWeights>& weights) {
  return weights ? cbce_loss(logits, labels, *weights) : ce_loss(logits, labels);
}

inline double dataset_loss(const Network& net, const Dataset& ds, const std::optional<ClassWeights>& weights) {
  NoGradGuard guard;
  std::vector<Tensor> logits;
  std::vector<std::size_t> labels;
  for (const auto& s : ds.samples) {
    logits.push_back(net.forward(s.image));
    labels.push_back(s.label);
  }
  return batch_loss(logits, labels, weights).item();
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

struct StageOutcome {
  Checkpoint best;
  RunRecord record;
};

// Minibatch SGD with momentum for spec.epochs epochs over a seeded
// per-epoch shuffle (last partial batch kept). After every epoch the
// un-augmented validation loss is computed with the stage's own loss; the
// network is left at the weights of the lowest-loss epoch.
inline StageOutcome train_stage(Network& net, const Dataset& train, const Dataset& val, const StageSpec& spec,
                                std::uint64_t seed) {
  if (train.empty()) throw ConfigError("stage '" + spec.name + "': empty training dataset");
  if (val.empty()) throw ConfigError("stage '" + spec.name + "': empty validation dataset");
  if (train.num_classes != net.num_classes() || val.num_classes != net.num_classes()) {
    throw ConfigError("stage '" + spec.name + "': dataset has " + std::to_string(train.num_classes) +
                      " classes, network has " + std::to_string(net.num_classes()));
  }
  if (spec.epochs == 0 || spec.batch_size == 0) throw ConfigError("stage '" + spec.name + "': epochs and batch_size must be >= 1");

  const auto weights = detail::stage_weights(spec.loss, train);
  SgdMomentum opt(net.trainable_parameters(), spec.learning_rate, spec.momentum);
  Rng rng(seed);
  std::vector<std::size_t> order(train.size());

  StageOutcome out;
  out.record.stage = spec.name;
  out.record.checkpoint = spec.name;
  double best_val = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
      const std::size_t stop = std::min(order.size(), start + spec.batch_size);
      std::vector<Tensor> logits;
      std::vector<std::size_t> labels;
      for (std::size_t b = start; b < stop; ++b) {
        const auto& s = train.samples[order[b]];
        const Tensor img = spec.augmentation.any() ? augment(s.image, spec.augmentation, rng) : s.image;
        logits.push_back(net.forward(img));
        labels.push_back(s.label);
      }
      const Tensor loss = detail::batch_loss(logits, labels, weights);
      opt.zero_grad();
      if (loss.requires_grad()) {
        backward(loss);
        opt.step();
      }
      loss_sum += loss.item();
      ++batches;
    }
    out.record.train_losses.push_back(loss_sum / static_cast<double>(batches));
    const double v = detail::dataset_loss(net, val, weights);
    out.record.val_losses.push_back(v);
    if (v < best_val) {
      best_val = v;
      out.best = capture_checkpoint(net, {spec.name, seed, epoch, v, std::nullopt});
    }
  }
  opt.zero_grad();
  out.record.best_epoch = best_epoch_of(out.record.val_losses);
  apply_checkpoint(net, out.best);
  return out;
}

// Decoupled classifier retraining: load `ckpt`, freeze everything except the
// final classifier, optionally reinitialize it, and train only that layer.
inline StageOutcome classifier_stage(const Checkpoint& ckpt, const NetworkSpec& arch, const Dataset& train,
                                     const Dataset& val, const StageSpec& spec, std::uint64_t seed) {
  if (spec.trainable_scope != TrainableScope::final_classifier_only) {
    throw ConfigError("stage '" + spec.name + "': classifier stage requires trainable_scope=final_classifier_only");
  }
  Network net(arch, 0);
  apply_checkpoint(net, ckpt);
  freeze_all_except(net, arch.final_classifier);
  if (spec.reinit_final) reinit_layer(net, arch.final_classifier, derive_seed(seed, 0x5eed));
  return train_stage(net, train, val, spec, seed);
}

// ---------------------------------------------------------------------------
// JSON

inline std::string_view to_string(EnsembleMode m) { return m == EnsembleMode::sum ? "sum" : "average"; }

inline EnsembleMode ensemble_mode_from_string(std::string_view s) {
  if (s == "sum") return EnsembleMode::sum;
  if (s == "average") return EnsembleMode::average;
  throw ConfigError("ensemble mode must be 'sum' or 'average', got '" + std::string(s) + "'");
}

inline nlohmann::json to_json(const InitRef& r) {
  switch (r.kind) {
    case InitRef::Kind::none: return nullptr;
    case InitRef::Kind::stage: return {{"stage", r.stage}};
    case InitRef::Kind::checkpoint_file: return {{"checkpoint", r.path}};
    case InitRef::Kind::ensemble: return {{"ensemble", {{"mode", to_string(r.mode)}, {"stages", r.stages}}}};
  }
  return nullptr;
}

inline nlohmann::json to_json(const StageSpec& s) {
  return {{"name", s.name},
          {"dataset", s.dataset},
          {"epochs", s.epochs},
          {"learning_rate", s.learning_rate},
          {"momentum", s.momentum},
          {"batch_size", s.batch_size},
          {"loss", s.loss.kind == LossKind::ce ? nlohmann::json{{"kind", "ce"}}
                                               : nlohmann::json{{"kind", "cbce"}, {"beta", s.loss.beta}, {"normalize", s.loss.normalize}}},
          {"trainable_scope", s.trainable_scope == TrainableScope::all ? "all" : "final_classifier_only"},
          {"reinit_final", s.reinit_final},
          {"init_from", to_json(s.init_from)},
          {"augmentation", {{"hflip", s.augmentation.hflip}, {"vflip", s.augmentation.vflip}, {"rot90", s.augmentation.rot90}, {"jitter", s.augmentation.jitter}}},
          {"seed", s.seed},
          {"val_fraction", s.val_fraction}};
}

inline nlohmann::json to_json(const DatasetSource& d) {
  if (d.kind == DatasetSource::Kind::file) return {{"file", d.path}};
  return {{"synth", to_json(d.synth)}};
}

inline nlohmann::json to_json(const StagePlan& p) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : p.stages) stages.push_back(to_json(s));
  nlohmann::json j{{"name", p.name}, {"evaluation", p.evaluation}, {"stages", std::move(stages)}};
  if (!p.datasets.empty()) {
    nlohmann::json ds = nlohmann::json::object();
    for (const auto& [name, src] : p.datasets) ds[name] = to_json(src);
    j["datasets"] = std::move(ds);
  }
  if (p.architecture) j["architecture"] = to_json(*p.architecture);
  if (p.evaluate.kind != InitRef::Kind::none) j["evaluate"] = to_json(p.evaluate);
  return j;
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<std::string_view> known) {
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError(where + ": unknown field '" + key + "'");
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const std::string& where, const char* key, T& target) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(target);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": field '" + key + "' has the wrong type");
  }
}

inline InitRef init_ref_from_json(const nlohmann::json& j, const std::string& where) {
  if (j.is_null()) return {};
  if (!j.is_object() || j.size() != 1) throw ConfigError(where + ": must be null or one of {stage|checkpoint|ensemble}");
  if (j.contains("stage") && j["stage"].is_string()) return InitRef::from_stage(j["stage"].get<std::string>());
  if (j.contains("checkpoint") && j["checkpoint"].is_string()) return InitRef::from_file(j["checkpoint"].get<std::string>());
  if (j.contains("ensemble")) {
    const auto& e = j["ensemble"];
    reject_unknown(e, where + ".ensemble", {"mode", "stages"});
    std::vector<std::string> stages;
    std::string mode = "average";
    read_field(e, where + ".ensemble", "mode", mode);
    read_field(e, where + ".ensemble", "stages", stages);
    return InitRef::from_ensemble(ensemble_mode_from_string(mode), std::move(stages));
  }
  throw ConfigError(where + ": must be null or one of {stage|checkpoint|ensemble}");
}

}  // namespace detail

inline StageSpec stage_from_json(const nlohmann::json& j, std::size_t index) {
  const std::string where = "stages[" + std::to_string(index) + "]";
  if (!j.is_object()) throw ConfigError(where + ": must be an object");
  detail::reject_unknown(j, where, {"name", "dataset", "epochs", "learning_rate", "momentum", "batch_size", "loss", "trainable_scope",
                                    "reinit_final", "init_from", "augmentation", "seed", "val_fraction"});
  if (!j.contains("name") || !j.contains("dataset")) throw ConfigError(where + ": 'name' and 'dataset' are required");
  StageSpec s;
  detail::read_field(j, where, "name", s.name);
  detail::read_field(j, where, "dataset", s.dataset);
  detail::read_field(j, where, "epochs", s.epochs);
  detail::read_field(j, where, "learning_rate", s.learning_rate);
  detail::read_field(j, where, "momentum", s.momentum);
  detail::read_field(j, where, "batch_size", s.batch_size);
  detail::read_field(j, where, "reinit_final", s.reinit_final);
  detail::read_field(j, where, "seed", s.seed);
  detail::read_field(j, where, "val_fraction", s.val_fraction);
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    detail::reject_unknown(l, where + ".loss", {"kind", "beta", "normalize"});
    std::string kind = "ce";
    detail::read_field(l, where + ".loss", "kind", kind);
    if (kind == "ce") {
      s.loss.kind = LossKind::ce;
    } else if (kind == "cbce") {
      s.loss.kind = LossKind::cbce;
    } else {
      throw ConfigError(where + ".loss: field 'kind' must be 'ce' or 'cbce'");
    }
    detail::read_field(l, where + ".loss", "beta", s.loss.beta);
    detail::read_field(l, where + ".loss", "normalize", s.loss.normalize);
  }
  if (j.contains("trainable_scope")) {
    std::string scope;
    detail::read_field(j, where, "trainable_scope", scope);
    if (scope == "all") {
      s.trainable_scope = TrainableScope::all;
    } else if (scope == "final_classifier_only") {
      s.trainable_scope = TrainableScope::final_classifier_only;
    } else {
      throw ConfigError(where + ": field 'trainable_scope' must be 'all' or 'final_classifier_only'");
    }
  }
  if (j.contains("init_from")) s.init_from = detail::init_ref_from_json(j["init_from"], where + ".init_from");
  if (j.contains("augmentation")) {
    const auto& a = j["augmentation"];
    detail::reject_unknown(a, where + ".augmentation", {"hflip", "vflip", "rot90", "jitter"});
    detail::read_field(a, where + ".augmentation", "hflip", s.augmentation.hflip);
    detail::read_field(a, where + ".augmentation", "vflip", s.augmentation.vflip);
    detail::read_field(a, where + ".augmentation", "rot90", s.augmentation.rot90);
    detail::read_field(a, where + ".augmentation", "jitter", s.augmentation.jitter);
  }
  return s;
}

inline StagePlan plan_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("plan must be a JSON object");
  detail::reject_unknown(j, "plan", {"name", "architecture", "datasets", "stages", "evaluation", "evaluate"});
  StagePlan p;
  detail::read_field(j, "plan", "name", p.name);
  detail::read_field(j, "plan", "evaluation", p.evaluation);
  if (j.contains("architecture")) p.architecture = network_spec_from_json(j["architecture"]);
  if (j.contains("datasets")) {
    if (!j["datasets"].is_object()) throw ConfigError("plan: field 'datasets' must be an object");
    for (const auto& [name, src] : j["datasets"].items()) {
      const std::string where = "datasets." + name;
      DatasetSource d;
      if (src.is_object() && src.size() == 1 && src.contains("file") && src["file"].is_string()) {
        d.kind = DatasetSource::Kind::file;
        d.path = src["file"].get<std::string>();
      } else if (src.is_object() && src.size() == 1 && src.contains("synth")) {
        d.kind = DatasetSource::Kind::synth;
        try {
          d.synth = synth_spec_from_json(src["synth"]);
        } catch (const ConfigError& e) {
          throw ConfigError(where + ": " + e.what());
        }
        d.synth.name = name;
      } else {
        throw ConfigError(where + ": must be {\"file\": path} or {\"synth\": spec}");
      }
      p.datasets.emplace(name, std::move(d));
    }
  }
  if (!j.contains("stages") || !j["stages"].is_array()) throw ConfigError("plan: field 'stages' must be an array");
  for (std::size_t i = 0; i < j["stages"].size(); ++i) p.stages.push_back(stage_from_json(j["stages"][i], i));
  if (j.contains("evaluate")) p.evaluate = detail::init_ref_from_json(j["evaluate"], "plan.evaluate");
  return p;
}

// Reads a plan file; relative dataset and checkpoint paths inside it are
// taken relative to the plan file's directory.
inline StagePlan load_plan(const std::string& path) {
  const auto bytes = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("plan '" + path + "': invalid JSON: " + e.what());
  }
  StagePlan plan = plan_from_json(j);
  const auto base = std::filesystem::path(path).parent_path();
  auto fix = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  auto fix_ref = [&](InitRef& r) {
    if (r.kind == InitRef::Kind::checkpoint_file) fix(r.path);
  };
  for (auto& [_, src] : plan.datasets) {
    if (src.kind == DatasetSource::Kind::file) fix(src.path);
  }
  for (auto& st : plan.stages) fix_ref(st.init_from);
  fix_ref(plan.evaluate);
  return plan;
}

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j{{"stage", r.stage},
                   {"train_losses", r.train_losses},
                   {"val_losses", r.val_losses},
                   {"best_epoch", r.best_epoch},
                   {"checkpoint", r.checkpoint},
                   {"metrics", nullptr}};
  if (r.metrics) j["metrics"] = to_json(*r.metrics);
  return j;
}

// ---------------------------------------------------------------------------
// Plan execution

// Memo of stage results within one run seed. Identical stage chains (same
// specs, datasets, initialization lineage and seed) produce bit-identical
// outcomes, so plans sharing a prefix can reuse it.
struct RunCache {
  std::map<std::string, Dataset> datasets;
  std::map<std::string, StageOutcome> stages;
};

struct PlanResult {
  std::vector<RunRecord> records;
  std::vector<Checkpoint> checkpoints;  // one per stage, plan order
  Checkpoint evaluated;
  MetricsReport metrics;
};

namespace detail {

inline std::optional<DatasetSource> resolve_source(const StagePlan& plan, const std::string& name) {
  if (auto it = plan.datasets.find(name); it != plan.datasets.end()) return it->second;
  if (auto spec = builtin_synth_spec(name)) return DatasetSource{DatasetSource::Kind::synth, *spec, {}};
  return std::nullopt;
}

inline std::size_t source_classes(const DatasetSource& src) {
  if (src.kind == DatasetSource::Kind::synth) return src.synth.distribution.num_classes();
  return load_dataset(src.path).num_classes;
}

inline std::string file_digest(const std::string& path) {
  const auto bytes = io::read_file(path);
  return std::to_string(fnv1a(std::string_view(bytes.data(), bytes.size())));
}

class PlanRunner {
 public:
  PlanRunner(const StagePlan& plan, std::uint64_t run_seed, RunCache& cache)
      : plan_(plan), run_seed_(run_seed), cache_(cache) {}

  const Dataset& dataset(const std::string& name) {
    const DatasetSource src = *resolve_source(plan_, name);
    const std::string key = dataset_key(src);
    auto it = cache_.datasets.find(key);
    if (it == cache_.datasets.end()) {
      Dataset ds;
      if (src.kind == DatasetSource::Kind::synth) {
        SynthSpec spec = src.synth;
        spec.seed = derive_seed(spec.seed, run_seed_);
        ds = synth_generate(spec);
        ds.name = name;
      } else {
        ds = load_dataset(src.path);
        ds.name = name;
      }
      it = cache_.datasets.emplace(key, std::move(ds)).first;
    }
    return it->second;
  }

  // Same split for every stage training on the same dataset in this run.
  Split split(const std::string& name, double fraction) {
    return stratified_split(dataset(name), fraction, derive_seed(run_seed_, fnv1a("split:" + name)));
  }

  NetworkSpec architecture() {
    if (plan_.architecture) return *plan_.architecture;
    return NetworkSpec::default_for(source_classes(*resolve_source(plan_, plan_.evaluation)), {1, image_hw(plan_.evaluation).first, image_hw(plan_.evaluation).second});
  }

  std::uint64_t init_seed() const { return derive_seed(run_seed_, fnv1a("init")); }

  std::string init_key(const InitRef& ref) {
    switch (ref.kind) {
      case InitRef::Kind::none: return "init:" + std::to_string(init_seed());
      case InitRef::Kind::stage: return stage_key(stage_index(ref.stage));
      case InitRef::Kind::checkpoint_file: return "file:" + ref.path + "#" + file_digest(ref.path);
      case InitRef::Kind::ensemble: {
        std::string k = std::string("ensemble:") + std::string(to_string(ref.mode)) + "[";
        for (const auto& s : ref.stages) k += stage_key(stage_index(s)) + ";";
        return k + "]";
      }
    }
    return {};
  }

  std::string stage_key(std::size_t i) {
    const auto& s = plan_.stages[i];
    nlohmann::json j{{"stage", to_json(s)},
                     {"data", dataset_key(*resolve_source(plan_, s.dataset))},
                     {"arch", to_json(architecture())},
                     {"seed", run_seed_},
                     {"init", init_key(s.init_from)}};
    return j.dump();
  }

  std::size_t stage_index(const std::string& name) const {
    for (std::size_t i = 0; i < plan_.stages.size(); ++i) {
      if (plan_.stages[i].name == name) return i;
    }
    throw ConfigError("unknown stage '" + name + "'");
  }

  Checkpoint initial_checkpoint(const InitRef& ref, const std::vector<Checkpoint>& done) {
    switch (ref.kind) {
      case InitRef::Kind::none:
        return capture_checkpoint(Network(architecture(), init_seed()), {"init", init_seed(), 0, std::nullopt, std::nullopt});
      case InitRef::Kind::stage:
        return done.at(stage_index(ref.stage));
      case InitRef::Kind::checkpoint_file:
        return load_checkpoint(ref.path);
      case InitRef::Kind::ensemble: {
        std::vector<Checkpoint> parts;
        for (const auto& s : ref.stages) parts.push_back(done.at(stage_index(s)));
        return ensemble_checkpoints(parts, ref.mode);
      }
    }
    throw ConfigError("bad init reference");
  }

  StageOutcome run_stage(std::size_t i, const std::vector<Checkpoint>& done) {
    const auto key = stage_key(i);
    if (auto it = cache_.stages.find(key); it != cache_.stages.end()) return it->second;

    const auto& spec = plan_.stages[i];
    const auto arch = architecture();
    const Checkpoint init = initial_checkpoint(spec.init_from, done);
    const Split parts = split(spec.dataset, spec.val_fraction);
    const std::uint64_t seed = derive_seed(run_seed_, spec.seed);
    StageOutcome out;
    if (spec.trainable_scope == TrainableScope::final_classifier_only) {
      out = classifier_stage(init, arch, parts.train, parts.val, spec, seed);
    } else {
      Network net(arch, 0);
      apply_checkpoint(net, init);
      if (spec.reinit_final) reinit_layer(net, arch.final_classifier, derive_seed(seed, 0x5eed));
      out = train_stage(net, parts.train, parts.val, spec, seed);
    }
    out.best.meta.architecture = arch;
    out.record.metrics = evaluate(network_from_checkpoint(out.best), dataset(plan_.evaluation));
    cache_.stages.emplace(key, out);
    return out;
  }

 private:
  std::pair<std::size_t, std::size_t> image_hw(const std::string& name) {
    const auto src = *resolve_source(plan_, name);
    if (src.kind == DatasetSource::Kind::synth) return {src.synth.h, src.synth.w};
    const auto shape = dataset(name).image_shape();
    return {shape.at(1), shape.at(2)};
  }

  std::string dataset_key(const DatasetSource& src) {
    if (src.kind == DatasetSource::Kind::synth) {
      auto j = to_json(src.synth);
      j["run_seed"] = run_seed_;
      return j.dump();
    }
    return "file:" + src.path + "#" + file_digest(src.path);
  }

  const StagePlan& plan_;
  std::uint64_t run_seed_;
  RunCache& cache_;
};

}  // namespace detail

// Checks every reference and hyperparameter before any training happens.
inline void validate_plan(const StagePlan& plan) {
  const std::string where = "plan '" + plan.name + "': ";
  if (plan.stages.empty()) throw ConfigError(where + "no stages");
  if (plan.evaluation.empty()) throw ConfigError(where + "no evaluation dataset");
  auto check_dataset = [&](const std::string& name) -> std::size_t {
    const auto src = detail::resolve_source(plan, name);
    if (!src) throw ConfigError(where + "unknown dataset '" + name + "'");
    if (src->kind == DatasetSource::Kind::file && !std::filesystem::exists(src->path)) {
      throw ConfigError(where + "dataset file '" + src->path + "' does not exist");
    }
    return detail::source_classes(*src);
  };
  const std::size_t c = check_dataset(plan.evaluation);
  if (plan.architecture) {
    validate(*plan.architecture);
    if (plan.architecture->num_classes != c) throw ConfigError(where + "architecture class count differs from evaluation dataset");
  }
  std::vector<std::string> seen;
  auto check_ref = [&](const InitRef& ref, const std::string& ctx) {
    auto earlier = [&](const std::string& s) {
      if (std::find(seen.begin(), seen.end(), s) == seen.end()) {
        throw ConfigError(where + ctx + " references '" + s + "', which is not an earlier stage");
      }
    };
    switch (ref.kind) {
      case InitRef::Kind::none: break;
      case InitRef::Kind::stage: earlier(ref.stage); break;
      case InitRef::Kind::checkpoint_file:
        if (!std::filesystem::exists(ref.path)) throw ConfigError(where + ctx + " checkpoint file '" + ref.path + "' does not exist");
        break;
      case InitRef::Kind::ensemble:
        if (ref.stages.size() < 2) throw ConfigError(where + ctx + " ensemble needs at least two stages");
        for (const auto& s : ref.stages) earlier(s);
        break;
    }
  };
  for (const auto& s : plan.stages) {
    const std::string ctx = "stage '" + s.name + "'";
    if (s.name.empty()) throw ConfigError(where + "stage with empty name");
    if (!std::all_of(s.name.begin(), s.name.end(), [](char ch) {
          return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.' || ch == '+';
        }) || s.name.front() == '.') {
      throw ConfigError(where + ctx + ": name may only contain letters, digits and _ - . +");
    }
    if (std::find(seen.begin(), seen.end(), s.name) != seen.end()) throw ConfigError(where + "duplicate stage name '" + s.name + "'");
    if (check_dataset(s.dataset) != c) throw ConfigError(where + ctx + " dataset class count differs from evaluation dataset");
    if (s.epochs < 1) throw ConfigError(where + ctx + ": epochs must be >= 1");
    if (!(s.learning_rate > 0.0)) throw ConfigError(where + ctx + ": learning_rate must be > 0");
    if (!(s.momentum >= 0.0 && s.momentum < 1.0)) throw ConfigError(where + ctx + ": momentum must be in [0, 1)");
    if (s.batch_size < 1) throw ConfigError(where + ctx + ": batch_size must be >= 1");
    if (!(s.val_fraction > 0.0 && s.val_fraction < 1.0)) throw ConfigError(where + ctx + ": val_fraction must be in (0, 1)");
    if (s.loss.kind == LossKind::cbce && !(s.loss.beta >= 0.0 && s.loss.beta <= 1.0)) throw ConfigError(where + ctx + ": beta must be in [0, 1]");
    if (!(s.augmentation.jitter >= 0.0)) throw ConfigError(where + ctx + ": jitter must be >= 0");
    check_ref(s.init_from, ctx);
    seen.push_back(s.name);
  }
  check_ref(plan.evaluate, "evaluate");
}

inline PlanResult run_plan(const StagePlan& plan, std::uint64_t run_seed, RunCache* cache = nullptr) {
  validate_plan(plan);
  RunCache local;
  detail::PlanRunner runner(plan, run_seed, cache ? *cache : local);
  PlanResult result;
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    auto out = runner.run_stage(i, result.checkpoints);
    result.checkpoints.push_back(std::move(out.best));
    result.records.push_back(std::move(out.record));
  }
  if (plan.evaluate.kind == InitRef::Kind::none) {
    result.evaluated = result.checkpoints.back();
  } else {
    result.evaluated = runner.initial_checkpoint(plan.evaluate, result.checkpoints);
    result.evaluated.meta.architecture = runner.architecture();
  }
  result.metrics = evaluate(network_from_checkpoint(result.evaluated), runner.dataset(plan.evaluation));
  return result;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRun {
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double kappa = 0.0;
  std::vector<std::optional<double>> recall;  // per class
};

struct AblationRow {
  std::string plan;
  std::vector<AblationRun> runs;  // ascending seed order
  double mean_accuracy = 0.0, stdev_accuracy = 0.0;
  double mean_kappa = 0.0, stdev_kappa = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;  // descending mean kappa
};

struct AblationOptions {
  std::vector<EnsembleMode> ensemble_modes;  // adds parallel-ensemble rows built from ensemble_base
  std::string ensemble_base;                 // plan name; default = last plan given
  unsigned threads = 0;                      // 0 = hardware concurrency
};

// Mean and sample standard deviation (0 for a single value), reduced in the
// given order.
inline std::pair<double, double> mean_stdev(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

// Parallel-transfer variants of `base`: every representation stage trains
// independently from the shared seeded init, and the resulting weights are
// combined with `mode`. Returns the zero-shot ensemble plan, plus the
// ensemble followed by base's classifier stage when base has one.
inline std::vector<StagePlan> parallel_ensemble_plans(const StagePlan& base, EnsembleMode mode) {
  StagePlan zero_shot;
  zero_shot.name = "parallel-" + std::string(to_string(mode));
  zero_shot.architecture = base.architecture;
  zero_shot.datasets = base.datasets;
  zero_shot.evaluation = base.evaluation;
  std::vector<std::string> sources;
  const StageSpec* classifier = nullptr;
  for (const auto& s : base.stages) {
    if (s.trainable_scope == TrainableScope::final_classifier_only) {
      classifier = &s;
      continue;
    }
    StageSpec independent = s;
    independent.init_from = {};
    zero_shot.stages.push_back(independent);
    sources.push_back(s.name);
  }
  if (sources.size() < 2) throw ConfigError("plan '" + base.name + "' has fewer than two representation stages to ensemble");
  zero_shot.evaluate = InitRef::from_ensemble(mode, sources);
  std::vector<StagePlan> out{zero_shot};
  if (classifier) {
    StagePlan tuned = zero_shot;
    tuned.name += "+cbce";
    tuned.evaluate = {};
    StageSpec c = *classifier;
    c.init_from = InitRef::from_ensemble(mode, sources);
    tuned.stages.push_back(c);
    out.push_back(std::move(tuned));
  }
  return out;
}

inline AblationReport ablate(std::vector<StagePlan> plans, std::vector<std::uint64_t> seeds, const AblationOptions& options = {}) {
  if (plans.empty()) throw ConfigError("ablation needs at least one plan");
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (!options.ensemble_modes.empty()) {
    const std::string base_name = options.ensemble_base.empty() ? plans.back().name : options.ensemble_base;
    const auto base = std::find_if(plans.begin(), plans.end(), [&](const StagePlan& p) { return p.name == base_name; });
    if (base == plans.end()) throw ConfigError("ensemble base plan '" + base_name + "' not found");
    const StagePlan base_plan = *base;
    for (auto mode : options.ensemble_modes) {
      for (auto& p : parallel_ensemble_plans(base_plan, mode)) plans.push_back(std::move(p));
    }
  }
  for (const auto& p : plans) validate_plan(p);
  std::sort(seeds.begin(), seeds.end());

  // results[seed][plan]
  std::vector<std::vector<AblationRun>> results(seeds.size(), std::vector<AblationRun>(plans.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t si = next++; si < seeds.size(); si = next++) {
      RunCache cache;
      for (std::size_t pi = 0; pi < plans.size(); ++pi) {
        const auto r = run_plan(plans[pi], seeds[si], &cache);
        AblationRun run{seeds[si], r.metrics.accuracy, r.metrics.kappa.value_or(0.0), {}};
        for (std::size_t k = 0; k < r.metrics.per_class.size(); ++k) run.recall.push_back(r.metrics.recall(k));
        results[si][pi] = std::move(run);
      }
    }
  };
  unsigned threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(seeds.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  AblationReport report;
  for (std::size_t pi = 0; pi < plans.size(); ++pi) {
    AblationRow row{plans[pi].name, {}, 0, 0, 0, 0};
    std::vector<double> acc, kap;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      row.runs.push_back(results[si][pi]);
      acc.push_back(results[si][pi].accuracy);
      kap.push_back(results[si][pi].kappa);
    }
    std::tie(row.mean_accuracy, row.stdev_accuracy) = mean_stdev(acc);
    std::tie(row.mean_kappa, row.stdev_kappa) = mean_stdev(kap);
    report.rows.push_back(std::move(row));
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const AblationRow& a, const AblationRow& b) { return a.mean_kappa > b.mean_kappa; });
  return report;
}

inline const AblationRow& find_row(const AblationReport& report, std::string_view plan) {
  for (const auto& r : report.rows) {
    if (r.plan == plan) return r;
  }
  throw IndexError("no ablation row for plan '" + std::string(plan) + "'");
}

inline nlohmann::json to_json(const AblationReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& run : r.runs) {
      nlohmann::json recall = nlohmann::json::array();
      for (const auto& v : run.recall) recall.push_back(detail::optional_json(v));
      runs.push_back({{"seed", run.seed}, {"accuracy", run.accuracy}, {"kappa", run.kappa}, {"recall", std::move(recall)}});
    }
    rows.push_back({{"plan", r.plan},
                    {"mean_accuracy", r.mean_accuracy},
                    {"stdev_accuracy", r.stdev_accuracy},
                    {"mean_kappa", r.mean_kappa},
                    {"stdev_kappa", r.stdev_kappa},
                    {"runs", std::move(runs)}});
  }
  return {{"rows", std::move(rows)}};
}

}  // namespace stagenet
