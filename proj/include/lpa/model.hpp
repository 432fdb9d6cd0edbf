#pragma once

// The VGG-attention model family: a VGG-16 feature stack, a two-layer global
// feature head, one attention module per tap point and a concat or indep
// classifier over the attended descriptors.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "lpa/attention.hpp"

namespace lpa {

enum class HeadMode { concat, indep };

inline const char* to_string(HeadMode h) { return h == HeadMode::concat ? "concat" : "indep"; }

inline Compatibility parse_compatibility(std::string_view s) {
  if (s == "dp") return Compatibility::dot_product;
  if (s == "pc") return Compatibility::parametrised;
  throw UsageError("unknown compatibility function '" + std::string(s) + "' (valid: dp, pc)");
}

inline HeadMode parse_head_mode(std::string_view s) {
  if (s == "concat") return HeadMode::concat;
  if (s == "indep") return HeadMode::indep;
  throw UsageError("unknown head mode '" + std::string(s) + "' (valid: concat, indep)");
}

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kGlobalDim = 512;

struct ModelConfig {
  int att = 3;
  Compatibility compat = Compatibility::parametrised;
  HeadMode head = HeadMode::concat;
  std::size_t num_classes = 10;
  /// Divides every channel count and D; 1 is the full-size network.
  std::size_t width_divisor = 1;

  std::size_t global_dim() const { return kGlobalDim / width_divisor; }

  void validate() const {
    if (att < 1 || att > 3) throw ConfigError("att must be one of {1,2,3}, got " + std::to_string(att));
    if (num_classes < 1) throw ConfigError("num_classes must be positive");
    if (width_divisor < 1 || 64 % width_divisor != 0)
      throw ConfigError("width_divisor must divide 64, got " + std::to_string(width_divisor));
  }

  /// e.g. "(VGG-att2)-concat-pc"
  std::string name() const {
    return "(VGG-att" + std::to_string(att) + ")-" + to_string(head) + "-" + to_string(compat);
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One 3x3 conv + ReLU of the backbone. `tap` is the attention level (1..3)
/// whose local features come from this layer's output, or 0.
struct ConvLayerSpec {
  std::string name;
  std::size_t in_channels;
  std::size_t out_channels;
  bool pool_after;
  int tap;
};

inline std::vector<ConvLayerSpec> backbone_layers(std::size_t width_divisor) {
  struct Block {
    std::size_t width;
    int convs;
    int tap;
  };
  constexpr std::array<Block, 5> blocks{{{64, 2, 0}, {128, 2, 0}, {256, 3, 1}, {512, 3, 2}, {512, 3, 3}}};
  std::vector<ConvLayerSpec> layers;
  std::size_t in = kImageChannels;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::size_t out = blocks[b].width / width_divisor;
    for (int i = 0; i < blocks[b].convs; ++i) {
      const bool last = i + 1 == blocks[b].convs;
      layers.push_back({"conv" + std::to_string(b + 1) + "_" + std::to_string(i + 1), in, out, last,
                        last ? blocks[b].tap : 0});
      in = out;
    }
  }
  return layers;
}

/// Tap levels in use: att3 -> {1,2,3}, att2 -> {2,3}, att1 -> {3}.
inline std::vector<int> attention_levels(int att) {
  std::vector<int> levels;
  for (int level = 4 - att; level <= 3; ++level) levels.push_back(level);
  return levels;
}

struct ParameterSpec {
  std::string name;
  Shape shape;
  enum class Init { fan_in_uniform, zero, compat_uniform } init;
  std::size_t fan_in;
};

/// Every parameter of the network described by `config`, in creation order.
inline std::vector<ParameterSpec> parameter_specs(const ModelConfig& config) {
  config.validate();
  using Init = ParameterSpec::Init;
  std::vector<ParameterSpec> specs;
  const std::size_t D = config.global_dim();
  std::vector<std::size_t> tap_width(4, 0);
  std::size_t last = 0;
  for (const ConvLayerSpec& l : backbone_layers(config.width_divisor)) {
    specs.push_back({l.name + ".weight", {l.out_channels, l.in_channels, 3, 3}, Init::fan_in_uniform, l.in_channels * 9});
    specs.push_back({l.name + ".bias", {l.out_channels}, Init::zero, 0});
    if (l.tap) tap_width[l.tap] = l.out_channels;
    last = l.out_channels;
  }
  // after five pools the 32x32 input is 1x1, so the flattened width is the channel count
  specs.push_back({"fc1.weight", {last, D}, Init::fan_in_uniform, last});
  specs.push_back({"fc1.bias", {D}, Init::zero, 0});
  specs.push_back({"global.weight", {D, D}, Init::fan_in_uniform, D});
  specs.push_back({"global.bias", {D}, Init::zero, 0});
  for (int level : attention_levels(config.att)) {
    const std::string prefix = "att" + std::to_string(level);
    if (tap_width[level] != D) {
      specs.push_back({prefix + ".proj.weight", {D, tap_width[level], 1, 1}, Init::fan_in_uniform, tap_width[level]});
      specs.push_back({prefix + ".proj.bias", {D}, Init::zero, 0});
    }
    if (config.compat == Compatibility::parametrised) specs.push_back({prefix + ".u", {D}, Init::compat_uniform, D});
  }
  const std::size_t K = config.num_classes;
  if (config.head == HeadMode::concat) {
    const std::size_t width = D * static_cast<std::size_t>(config.att);
    specs.push_back({"classifier.weight", {width, K}, Init::fan_in_uniform, width});
    specs.push_back({"classifier.bias", {K}, Init::zero, 0});
  } else {
    for (int level : attention_levels(config.att)) {
      const std::string prefix = "classifier" + std::to_string(level);
      specs.push_back({prefix + ".weight", {D, K}, Init::fan_in_uniform, D});
      specs.push_back({prefix + ".bias", {K}, Init::zero, 0});
    }
  }
  return specs;
}

/// Total number of scalar parameters.
inline std::size_t param_count(const ModelConfig& config) {
  std::size_t total = 0;
  for (const ParameterSpec& s : parameter_specs(config)) total += shape_size(s.shape);
  return total;
}

/// Tape handles produced by one forward pass.
template <typename T>
struct ForwardPass {
  Var<T> probs;
  std::vector<int> levels;
  std::vector<Var<T>> scores;
  std::vector<Var<T>> attention;
  std::vector<Var<T>> descriptors;
  /// (H, W) of each level's attention grid
  std::vector<std::pair<std::size_t, std::size_t>> grids;
};

/// Plain-tensor view of a forward pass.
template <typename T>
struct ForwardResult {
  Tensor<T> probs;
  std::vector<int> levels;
  std::vector<Tensor<T>> attention;
  std::vector<Tensor<T>> descriptors;
  std::vector<std::pair<std::size_t, std::size_t>> grids;
};

template <typename T>
class Network {
 public:
  /// Deterministic initialization: each parameter draws from its own stream
  /// seeded by (seed, parameter index). Weights are U(-b, b) with
  /// b = sqrt(6 / fan_in); u is U(-1/sqrt(D), 1/sqrt(D)); biases are zero.
  static Network build(const ModelConfig& config, std::uint64_t seed) {
    Network net(config);
    const std::vector<ParameterSpec> specs = parameter_specs(config);
    net.params_.reserve(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const ParameterSpec& s = specs[i];
      Tensor<T> value(s.shape);
      if (s.init != ParameterSpec::Init::zero) {
        const double bound = s.init == ParameterSpec::Init::fan_in_uniform
                                 ? std::sqrt(6.0 / static_cast<double>(s.fan_in))
                                 : 1.0 / std::sqrt(static_cast<double>(s.fan_in));
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(i)};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (T& v : value.values()) v = static_cast<T>(dist(rng));
      }
      net.params_.emplace_back(s.name, std::move(value));
    }
    return net;
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }

  Parameter<T>* find(std::string_view name) {
    for (Parameter<T>& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  Parameter<T>& parameter(std::string_view name) {
    if (Parameter<T>* p = find(name)) return *p;
    throw ConfigError("no parameter named '" + std::string(name) + "'");
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const Parameter<T>& p : params_) total += p.value.size();
    return total;
  }

  void zero_grad() {
    for (Parameter<T>& p : params_) p.zero_grad();
  }

  ForwardPass<T> forward(Tape<T>& tape, const Tensor<T>& batch) {
    if (batch.rank() != 4 || batch.dim(1) != kImageChannels || batch.dim(2) != kImageSize || batch.dim(3) != kImageSize)
      throw InputError("forward: batch must be [N,3,32,32], got " + shape_string(batch.shape()));
    auto bind = [&](const std::string& name) { return tape.parameter(parameter(name)); };

    Var<T> x = tape.constant(batch);
    std::vector<Var<T>> taps(4);
    for (const ConvLayerSpec& l : backbone_layers(config_.width_divisor)) {
      x = relu(conv2d(x, bind(l.name + ".weight"), bind(l.name + ".bias")));
      if (l.tap) taps[l.tap] = x;
      if (l.pool_after) x = maxpool2x2(x);
    }
    Var<T> hidden = relu(dense(flatten(x), bind("fc1.weight"), bind("fc1.bias")));
    Var<T> global = dense(hidden, bind("global.weight"), bind("global.bias"));

    ForwardPass<T> pass;
    pass.levels = attention_levels(config_.att);
    for (int level : pass.levels) {
      const std::string prefix = "att" + std::to_string(level);
      CompatParams<T> cp;
      if (find(prefix + ".proj.weight")) {
        cp.projection_kernel = bind(prefix + ".proj.weight");
        cp.projection_bias = bind(prefix + ".proj.bias");
      }
      if (config_.compat == Compatibility::parametrised) cp.u = bind(prefix + ".u");
      const Var<T> local = taps[level];
      AttentionLevel<T> out = attention_level(local, global, config_.compat, cp);
      pass.scores.push_back(out.scores);
      pass.attention.push_back(out.attention);
      pass.descriptors.push_back(out.descriptor);
      pass.grids.emplace_back(local.value().dim(2), local.value().dim(3));
    }

    if (config_.head == HeadMode::concat) {
      Var<T> joined = pass.descriptors.size() == 1 ? pass.descriptors.front() : concat(pass.descriptors);
      pass.probs = softmax(dense(joined, bind("classifier.weight"), bind("classifier.bias")));
    } else {
      std::vector<Var<T>> per_level;
      for (std::size_t i = 0; i < pass.levels.size(); ++i) {
        const std::string prefix = "classifier" + std::to_string(pass.levels[i]);
        per_level.push_back(softmax(dense(pass.descriptors[i], bind(prefix + ".weight"), bind(prefix + ".bias"))));
      }
      pass.probs = per_level.size() == 1 ? per_level.front() : mean(per_level);
    }
    return pass;
  }

  /// Forward pass without keeping a tape around.
  ForwardResult<T> predict(const Tensor<T>& batch) {
    Tape<T> tape;
    ForwardPass<T> pass = forward(tape, batch);
    ForwardResult<T> result{pass.probs.value(), pass.levels, {}, {}, pass.grids};
    for (const Var<T>& a : pass.attention) result.attention.push_back(a.value());
    for (const Var<T>& d : pass.descriptors) result.descriptors.push_back(d.value());
    return result;
  }

 private:
  explicit Network(const ModelConfig& config) : config_(config) {}

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
};

}  // namespace lpa
