#pragma once

// Small conv-backbone classifier with per-layer freezing, head
// re-initialization, checkpoint persistence, weight ensembling and Grad-CAM.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagenet/autodiff.hpp"
#include "stagenet/binary_io.hpp"
#include "stagenet/error.hpp"
#include "stagenet/rng.hpp"

namespace stagenet {

enum class LayerKind { conv, relu, global_avg_pool, flatten, dense };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(std::string_view s) {
  for (auto k : {LayerKind::conv, LayerKind::relu, LayerKind::global_avg_pool, LayerKind::flatten, LayerKind::dense}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown layer kind '" + std::string(s) + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::size_t in = 0;      // conv: input channels; dense: fan-in
  std::size_t out = 0;     // conv: output channels; dense: fan-out
  std::size_t kernel = 0;  // conv: square kernel size

  static LayerSpec conv(std::string name, std::size_t in, std::size_t out, std::size_t kernel) {
    return {LayerKind::conv, std::move(name), in, out, kernel};
  }
  static LayerSpec dense(std::string name, std::size_t in, std::size_t out) {
    return {LayerKind::dense, std::move(name), in, out, 0};
  }
  static LayerSpec simple(LayerKind kind, std::string name) { return {kind, std::move(name), 0, 0, 0}; }

  bool parametric() const { return kind == LayerKind::conv || kind == LayerKind::dense; }
  std::size_t fan_in() const { return kind == LayerKind::conv ? in * kernel * kernel : in; }

  bool operator==(const LayerSpec&) const = default;
};

struct NetworkSpec {
  Shape input{1, 16, 16};
  std::size_t num_classes = 5;
  std::vector<LayerSpec> layers;
  std::string final_classifier = "fc";

  // conv(1->8,3x3) -> relu -> conv(8->8,3x3) -> relu -> gap -> dense(8->C) "fc"
  static NetworkSpec default_for(std::size_t num_classes, Shape input = {1, 16, 16}) {
    NetworkSpec s;
    s.input = input;
    s.num_classes = num_classes;
    s.layers = {LayerSpec::conv("conv1", input.at(0), 8, 3),
                LayerSpec::simple(LayerKind::relu, "relu1"),
                LayerSpec::conv("conv2", 8, 8, 3),
                LayerSpec::simple(LayerKind::relu, "relu2"),
                LayerSpec::simple(LayerKind::global_avg_pool, "gap"),
                LayerSpec::dense("fc", 8, num_classes)};
    s.final_classifier = "fc";
    return s;
  }

  bool operator==(const NetworkSpec&) const = default;
};

// Checks name uniqueness, shape chaining and the final-classifier rule.
// Returns the output shape of every layer.
inline std::vector<Shape> validate(const NetworkSpec& spec) {
  if (spec.input.size() != 3) throw ConfigError("network input must be [c,h,w]");
  if (spec.layers.empty()) throw ConfigError("network has no layers");
  std::vector<Shape> shapes;
  Shape cur = spec.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.name.empty()) throw ConfigError("layer " + std::to_string(i) + " has an empty name");
    for (std::size_t j = 0; j < i; ++j) {
      if (spec.layers[j].name == l.name) throw ConfigError("duplicate layer name '" + l.name + "'");
    }
    const std::string where = "layer '" + l.name + "': ";
    switch (l.kind) {
      case LayerKind::conv:
        if (cur.size() != 3) throw ConfigError(where + "conv needs a [c,h,w] input, got " + shape_str(cur));
        if (l.in != cur[0]) throw ConfigError(where + "expects " + std::to_string(l.in) + " channels, gets " + std::to_string(cur[0]));
        if (l.out == 0 || l.kernel == 0 || l.kernel > cur[1] || l.kernel > cur[2]) throw ConfigError(where + "invalid conv size");
        cur = {l.out, cur[1] - l.kernel + 1, cur[2] - l.kernel + 1};
        break;
      case LayerKind::relu:
        break;
      case LayerKind::global_avg_pool:
        if (cur.size() != 3) throw ConfigError(where + "global_avg_pool needs a [c,h,w] input");
        cur = {cur[0]};
        break;
      case LayerKind::flatten:
        cur = {1, shape_numel(cur)};
        break;
      case LayerKind::dense: {
        const std::size_t features = shape_numel(cur);
        if (l.in != features) throw ConfigError(where + "fan-in " + std::to_string(l.in) + " but receives " + std::to_string(features) + " features");
        if (l.out == 0) throw ConfigError(where + "fan-out must be positive");
        cur = {1, l.out};
        break;
      }
    }
    shapes.push_back(cur);
  }
  const auto last_param = std::find_if(spec.layers.rbegin(), spec.layers.rend(), [](const LayerSpec& l) { return l.parametric(); });
  if (last_param == spec.layers.rend()) throw ConfigError("network has no parametric layer");
  if (last_param->name != spec.final_classifier || last_param->kind != LayerKind::dense) {
    throw ConfigError("final classifier '" + spec.final_classifier + "' must be the last parametric layer and dense");
  }
  if (last_param->out != spec.num_classes) {
    throw ConfigError("final classifier fan-out " + std::to_string(last_param->out) + " != num_classes " + std::to_string(spec.num_classes));
  }
  if (shape_numel(cur) != spec.num_classes) throw ConfigError("network output does not have num_classes values");
  return shapes;
}

inline nlohmann::json to_json(const NetworkSpec& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : s.layers) {
    nlohmann::json j{{"kind", to_string(l.kind)}, {"name", l.name}};
    if (l.parametric()) {
      j["in"] = l.in;
      j["out"] = l.out;
    }
    if (l.kind == LayerKind::conv) j["kernel"] = l.kernel;
    layers.push_back(std::move(j));
  }
  return {{"input", s.input}, {"num_classes", s.num_classes}, {"final_classifier", s.final_classifier}, {"layers", std::move(layers)}};
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  try {
    NetworkSpec s;
    s.input = j.at("input").get<Shape>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.final_classifier = j.at("final_classifier").get<std::string>();
    s.layers.clear();
    for (const auto& lj : j.at("layers")) {
      LayerSpec l;
      l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
      l.name = lj.at("name").get<std::string>();
      l.in = lj.value("in", std::size_t{0});
      l.out = lj.value("out", std::size_t{0});
      l.kernel = lj.value("kernel", std::size_t{0});
      s.layers.push_back(std::move(l));
    }
    validate(s);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("architecture: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

struct Layer {
  LayerSpec spec;
  std::vector<Tensor> params;  // conv: kernels [out,in,k,k], bias [out]; dense: weight [in,out], bias [out]
  bool trainable = true;
};

class Network {
 public:
  // Parameters ~ N(0, 2/fan_in), biases zero; layer i draws from
  // derive_seed(seed, i).
  Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    validate(spec_);
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      layers_.push_back({spec_.layers[i], {}, true});
      if (spec_.layers[i].parametric()) init_layer(i, seed);
    }
  }

  Network(const Network& other) : spec_(other.spec_) { copy_layers(other); }
  Network& operator=(const Network& other) {
    if (this != &other) {
      spec_ = other.spec_;
      layers_.clear();
      copy_layers(other);
    }
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetworkSpec& spec() const { return spec_; }
  std::size_t num_classes() const { return spec_.num_classes; }
  const std::vector<Layer>& layers() const { return layers_; }

  const Layer& layer(std::string_view name) const { return layers_[index_of(name)]; }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].spec.name == name) return i;
    }
    throw IndexError("unknown layer '" + std::string(name) + "'");
  }

  void set_trainable(std::string_view name, bool on) {
    auto& l = layers_[index_of(name)];
    l.trainable = on;
    for (auto& p : l.params) p.set_requires_grad(on);
  }

  void init_layer(std::size_t index, std::uint64_t seed) {
    auto& l = layers_.at(index);
    const auto& s = l.spec;
    const double scale = std::sqrt(2.0 / static_cast<double>(s.fan_in()));
    const std::uint64_t layer_seed = derive_seed(seed, index);
    const Shape wshape = s.kind == LayerKind::conv ? Shape{s.out, s.in, s.kernel, s.kernel} : Shape{s.in, s.out};
    l.params = {randn(wshape, layer_seed, scale, l.trainable), Tensor({s.out}, {}, l.trainable)};
  }

  // Trainable parameter tensors in layer order (weights before biases).
  std::vector<Tensor> trainable_parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers_) {
      if (l.trainable) out.insert(out.end(), l.params.begin(), l.params.end());
    }
    return out;
  }

  // Mutable parameter handle; layer by index, tensor by position.
  Tensor& param(std::size_t layer_index, std::size_t tensor_index) { return layers_.at(layer_index).params.at(tensor_index); }

  void zero_grad() {
    for (auto& l : layers_)
      for (auto& p : l.params) p.zero_grad();
  }

  // Logits [1, C].
  Tensor forward(const Tensor& input) const { return run(input, nullptr, nullptr); }

  // Forward pass where the output of layer `tap_layer` is replaced by a fresh
  // requires_grad leaf, returned through `activation`.
  Tensor forward_tapped(const Tensor& input, std::string_view tap_layer, Tensor& activation) const {
    return run(input, &tap_layer, &activation);
  }

  std::size_t predict(const Tensor& input) const {
    NoGradGuard guard;
    const Tensor logits = forward(input);
    const auto v = logits.values();
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  }

 private:
  void copy_layers(const Network& other) {
    for (const auto& l : other.layers_) {
      Layer copy{l.spec, {}, l.trainable};
      for (const auto& p : l.params) copy.params.push_back(Tensor(p.shape(), {p.values().begin(), p.values().end()}, p.requires_grad()));
      layers_.push_back(std::move(copy));
    }
  }

  Tensor run(const Tensor& input, const std::string_view* tap_layer, Tensor* activation) const {
    if (input.shape() != spec_.input) {
      throw ShapeError("network expects input " + shape_str(spec_.input) + ", got " + shape_str(input.shape()));
    }
    Tensor x = input;
    for (const auto& l : layers_) {
      switch (l.spec.kind) {
        case LayerKind::conv: x = conv2d(x, l.params[0], l.params[1]); break;
        case LayerKind::relu: x = relu(x); break;
        case LayerKind::global_avg_pool: x = global_avg_pool(x); break;
        case LayerKind::flatten: x = flatten(x); break;
        case LayerKind::dense:
          if (x.rank() != 2) x = flatten(x);
          x = add(matmul(x, l.params[0]), l.params[1]);
          break;
      }
      if (tap_layer && l.spec.name == *tap_layer) {
        x = Tensor(x.shape(), {x.values().begin(), x.values().end()}, true);
        *activation = x;
      }
    }
    return x;
  }

  NetworkSpec spec_;
  std::vector<Layer> layers_;
};

inline Network build_network(const NetworkSpec& spec, std::uint64_t seed) { return Network(spec, seed); }

inline void require_parametric(const Network& net, std::string_view name) {
  if (!net.layer(name).spec.parametric()) throw ConfigError("layer '" + std::string(name) + "' has no parameters");
}

inline void freeze_all_except(Network& net, std::string_view name) {
  require_parametric(net, name);
  for (const auto& l : net.layers()) {
    if (l.spec.parametric()) net.set_trainable(l.spec.name, l.spec.name == name);
  }
}

inline void unfreeze_all(Network& net) {
  for (const auto& l : net.layers()) {
    if (l.spec.parametric()) net.set_trainable(l.spec.name, true);
  }
}

// Redraws one layer with the build-time rule; reinit with the build seed
// reproduces the freshly built parameters.
inline void reinit_layer(Network& net, std::string_view name, std::uint64_t seed) {
  require_parametric(net, name);
  net.init_layer(net.index_of(name), seed);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "STCK0001", u32 layer count, then per layer: u16 name length, UTF-8 name,
// u8 tensor count, per tensor u8 rank + u32 dims + little-endian f64 values.
// The rest of the file is a UTF-8 JSON metadata object.

inline constexpr std::string_view kCheckpointMagic = "STCK0001";

struct ParamBlock {
  Shape shape;
  std::vector<double> values;
  bool operator==(const ParamBlock&) const = default;
};

struct CheckpointLayer {
  std::string name;
  std::vector<ParamBlock> tensors;
  bool operator==(const CheckpointLayer&) const = default;
};

struct CheckpointMeta {
  std::string stage;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::optional<double> val_loss;
  std::optional<NetworkSpec> architecture;
  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  std::vector<CheckpointLayer> layers;
  CheckpointMeta meta;

  const CheckpointLayer* find(std::string_view name) const {
    for (const auto& l : layers) {
      if (l.name == name) return &l;
    }
    return nullptr;
  }

  bool operator==(const Checkpoint&) const = default;
};

inline Checkpoint capture_checkpoint(const Network& net, CheckpointMeta meta) {
  Checkpoint ck;
  meta.architecture = net.spec();
  ck.meta = std::move(meta);
  for (const auto& l : net.layers()) {
    if (!l.spec.parametric()) continue;
    CheckpointLayer cl{l.spec.name, {}};
    for (const auto& p : l.params) cl.tensors.push_back({p.shape(), {p.values().begin(), p.values().end()}});
    ck.layers.push_back(std::move(cl));
  }
  return ck;
}

// Overwrites the parameters of every parametric layer. The checkpoint must
// hold exactly the network's parametric layers with matching shapes; nothing
// is written unless the whole checkpoint is compatible.
inline void apply_checkpoint(Network& net, const Checkpoint& ck) {
  for (const auto& cl : ck.layers) {
    std::size_t idx = 0;
    try {
      idx = net.index_of(cl.name);
    } catch (const IndexError&) {
      throw FormatError(FormatError::Kind::unknown_entry, "checkpoint contains unknown layer '" + cl.name + "'");
    }
    const auto& l = net.layers()[idx];
    if (!l.spec.parametric()) {
      throw FormatError(FormatError::Kind::unknown_entry, "checkpoint has parameters for non-parametric layer '" + cl.name + "'");
    }
    bool ok = cl.tensors.size() == l.params.size();
    for (std::size_t t = 0; ok && t < cl.tensors.size(); ++t) ok = cl.tensors[t].shape == l.params[t].shape();
    if (!ok) throw FormatError(FormatError::Kind::shape_mismatch, "checkpoint shape mismatch for layer '" + cl.name + "'");
  }
  for (const auto& l : net.layers()) {
    if (l.spec.parametric() && !ck.find(l.spec.name)) {
      throw FormatError(FormatError::Kind::missing_entry, "checkpoint is missing layer '" + l.spec.name + "'");
    }
  }
  for (const auto& cl : ck.layers) {
    const std::size_t idx = net.index_of(cl.name);
    for (std::size_t t = 0; t < cl.tensors.size(); ++t) {
      auto dst = net.param(idx, t).mutable_values();
      std::copy(cl.tensors[t].values.begin(), cl.tensors[t].values.end(), dst.begin());
    }
  }
}

inline nlohmann::json to_json(const CheckpointMeta& m) {
  nlohmann::json j{{"stage", m.stage}, {"seed", m.seed}, {"epoch", m.epoch}, {"val_loss", nullptr}};
  if (m.val_loss) j["val_loss"] = *m.val_loss;
  if (m.architecture) j["architecture"] = to_json(*m.architecture);
  return j;
}

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  io::Writer out;
  out.bytes(kCheckpointMagic);
  out.le(static_cast<std::uint32_t>(ck.layers.size()));
  for (const auto& l : ck.layers) {
    if (l.name.size() > 0xffff || l.tensors.size() > 0xff) throw ConfigError("checkpoint layer '" + l.name + "' too large to encode");
    out.le(static_cast<std::uint16_t>(l.name.size()));
    out.bytes(l.name);
    out.le(static_cast<std::uint8_t>(l.tensors.size()));
    for (const auto& t : l.tensors) {
      out.le(static_cast<std::uint8_t>(t.shape.size()));
      for (auto d : t.shape) out.le(static_cast<std::uint32_t>(d));
      for (double v : t.values) out.f64(v);
    }
  }
  out.bytes(to_json(ck.meta).dump());
  return out.buffer();
}

inline Checkpoint decode_checkpoint(std::span<const char> bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      std::string_view(bytes.data(), kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError(FormatError::Kind::unrecognized, "unrecognized format: not a checkpoint file");
  }
  io::Reader in(bytes, "malformed checkpoint: unexpected end of file");
  in.bytes(kCheckpointMagic.size());
  Checkpoint ck;
  const auto count = in.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointLayer l;
    const auto len = in.le<std::uint16_t>();
    l.name = std::string(in.bytes(len));
    const auto tensors = in.le<std::uint8_t>();
    for (std::uint8_t t = 0; t < tensors; ++t) {
      ParamBlock b;
      const auto rank = in.le<std::uint8_t>();
      for (std::uint8_t r = 0; r < rank; ++r) b.shape.push_back(in.le<std::uint32_t>());
      const std::size_t n = shape_numel(b.shape);
      if (in.remaining() / 8 < n) throw FormatError(FormatError::Kind::truncated, "malformed checkpoint: unexpected end of file");
      b.values.resize(n);
      for (double& v : b.values) v = in.f64();
      l.tensors.push_back(std::move(b));
    }
    ck.layers.push_back(std::move(l));
  }
  const auto meta_text = in.bytes(in.remaining());
  try {
    const auto j = nlohmann::json::parse(meta_text);
    ck.meta.stage = j.at("stage").get<std::string>();
    ck.meta.seed = j.at("seed").get<std::uint64_t>();
    ck.meta.epoch = j.at("epoch").get<std::size_t>();
    if (!j.at("val_loss").is_null()) ck.meta.val_loss = j.at("val_loss").get<double>();
    if (j.contains("architecture")) ck.meta.architecture = network_spec_from_json(j.at("architecture"));
  } catch (const std::exception& e) {
    throw FormatError(FormatError::Kind::malformed, std::string("malformed checkpoint metadata: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Network& net, const std::string& path, CheckpointMeta meta) {
  io::write_file(path, encode_checkpoint(capture_checkpoint(net, std::move(meta))));
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

// Network for a checkpoint: its stored architecture, or the default one with
// C taken from the final layer's bias.
inline Network network_from_checkpoint(const Checkpoint& ck) {
  NetworkSpec spec;
  if (ck.meta.architecture) {
    spec = *ck.meta.architecture;
  } else {
    const auto* fc = ck.find("fc");
    if (!fc || fc->tensors.size() != 2) throw FormatError(FormatError::Kind::missing_entry, "checkpoint has no architecture and no 'fc' layer");
    spec = NetworkSpec::default_for(fc->tensors[1].values.size());
  }
  Network net(spec, 0);
  apply_checkpoint(net, ck);
  return net;
}

enum class EnsembleMode { sum, average };

// Elementwise sum or mean. Each element is reduced over its values in sorted
// order, so the result does not depend on the order of `ckpts`.
inline Checkpoint ensemble_checkpoints(std::span<const Checkpoint> ckpts, EnsembleMode mode) {
  if (ckpts.size() < 2) throw ConfigError("ensembling needs at least two checkpoints");
  const auto& first = ckpts.front();
  for (const auto& ck : ckpts) {
    bool same = ck.layers.size() == first.layers.size();
    for (std::size_t l = 0; same && l < ck.layers.size(); ++l) {
      same = ck.layers[l].name == first.layers[l].name && ck.layers[l].tensors.size() == first.layers[l].tensors.size();
      for (std::size_t t = 0; same && t < ck.layers[l].tensors.size(); ++t) same = ck.layers[l].tensors[t].shape == first.layers[l].tensors[t].shape;
    }
    if (!same) throw ShapeError("ensembled checkpoints must share layer names and shapes");
  }
  Checkpoint out;
  out.meta.stage = mode == EnsembleMode::sum ? "ensemble-sum" : "ensemble-average";
  out.meta.architecture = first.meta.architecture;
  std::vector<double> column(ckpts.size());
  for (std::size_t l = 0; l < first.layers.size(); ++l) {
    CheckpointLayer cl{first.layers[l].name, {}};
    for (std::size_t t = 0; t < first.layers[l].tensors.size(); ++t) {
      ParamBlock b{first.layers[l].tensors[t].shape, std::vector<double>(first.layers[l].tensors[t].values.size())};
      for (std::size_t i = 0; i < b.values.size(); ++i) {
        for (std::size_t k = 0; k < ckpts.size(); ++k) column[k] = ckpts[k].layers[l].tensors[t].values[i];
        std::sort(column.begin(), column.end());
        double acc = 0.0;
        for (double v : column) acc += v;
        b.values[i] = mode == EnsembleMode::sum ? acc : acc / static_cast<double>(ckpts.size());
      }
      cl.tensors.push_back(std::move(b));
    }
    out.layers.push_back(std::move(cl));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grad-CAM

struct SaliencyMap {
  std::size_t h = 0, w = 0;
  std::vector<double> values;  // row-major, in [0,1]
};

// Channel weights are the spatial means of d(logit_class)/d(activation) at
// the named conv layer's output; the map is relu(sum_c weight_c * act_c),
// divided by its maximum when that is positive.
inline SaliencyMap grad_cam(const Network& net, const Tensor& input, std::size_t class_index, std::string_view conv_layer) {
  std::string valid;
  bool found = false;
  for (const auto& l : net.layers()) {
    if (l.spec.kind != LayerKind::conv) continue;
    valid += (valid.empty() ? "" : ", ") + l.spec.name;
    found = found || l.spec.name == conv_layer;
  }
  if (!found) {
    throw ConfigError("grad_cam: layer '" + std::string(conv_layer) + "' is not a conv layer (valid: " + valid + ")");
  }
  if (class_index >= net.num_classes()) throw IndexError("grad_cam: class index out of range");
  Network probe = net;
  for (const auto& l : probe.layers()) {
    if (l.spec.parametric()) probe.set_trainable(l.spec.name, false);
  }
  Tensor act;
  const Tensor logits = probe.forward_tapped(input, conv_layer, act);
  backward(element(logits, class_index));

  const std::size_t c = act.shape()[0], h = act.shape()[1], w = act.shape()[2], area = h * w;
  const auto a = act.values();
  const auto g = act.grad();
  SaliencyMap map{h, w, std::vector<double>(area, 0.0)};
  for (std::size_t k = 0; k < c; ++k) {
    double weight = 0.0;
    for (std::size_t t = 0; t < area; ++t) weight += g[k * area + t];
    weight /= static_cast<double>(area);
    for (std::size_t t = 0; t < area; ++t) map.values[t] += weight * a[k * area + t];
  }
  double mx = 0.0;
  for (double& v : map.values) {
    v = v > 0.0 ? v : 0.0;
    mx = std::max(mx, v);
  }
  if (mx > 0.0) {
    for (double& v : map.values) v /= mx;
  }
  return map;
}

// Binary PGM (P5), 8-bit, pixel = round(255 * value).
inline std::vector<char> encode_pgm(const SaliencyMap& map) {
  io::Writer out;
  out.bytes("P5\n" + std::to_string(map.w) + " " + std::to_string(map.h) + "\n255\n");
  for (double v : map.values) out.le(static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))));
  return out.buffer();
}

inline void write_pgm(const SaliencyMap& map, const std::string& path) {
  io::write_file(path, encode_pgm(map));
}

}  // namespace stagenet
