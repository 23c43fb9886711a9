#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dahar/ops.hpp"
#include "dahar/serialize.hpp"
#include "dahar/tensor.hpp"

namespace dahar {

// Declarative model description; fully determines the parameter count.
// The three enable_* switches are the ablation toggles; enable_side_branch
// removes the whole side prediction path.
struct ModelConfig {
  std::vector<int> stage_blocks{2, 2, 2};
  std::vector<int> stage_widths{16, 32, 64};
  std::vector<int> self_mask_stages{0, 1, 2};
  std::vector<int> fusion_tap_stages{0, 1, 2};
  int fusion_width = 32;
  int attention_hidden = 16;
  int num_attributes = 8;
  int input_h = 64;
  int input_w = 64;
  bool enable_self_mask = true;
  bool enable_fusion_multilevel = true;
  bool enable_masked_attention = true;
  bool enable_side_branch = true;

  int stem_width() const { return std::max(1, stage_widths.at(0) / 4); }
  int stem_kernel() const { return std::min(input_h, input_w) >= 128 ? 7 : 3; }

  void validate() const {
    if (stage_blocks.empty()) throw ConfigError("ModelConfig.stage_blocks: must be non-empty");
    if (stage_blocks.size() != stage_widths.size())
      throw ConfigError("ModelConfig.stage_widths: length must match stage_blocks");
    for (int b : stage_blocks)
      if (b < 1) throw ConfigError("ModelConfig.stage_blocks: entries must be >= 1");
    for (int w : stage_widths)
      if (w < 1) throw ConfigError("ModelConfig.stage_widths: entries must be >= 1");
    const int n_stages = static_cast<int>(stage_blocks.size());
    for (int s : self_mask_stages)
      if (s < 0 || s >= n_stages)
        throw ConfigError("ModelConfig.self_mask_stages: stage index out of range");
    if (fusion_tap_stages.size() != 3)
      throw ConfigError("ModelConfig.fusion_tap_stages: exactly three tap stages required");
    if (!std::is_sorted(fusion_tap_stages.begin(), fusion_tap_stages.end()))
      throw ConfigError("ModelConfig.fusion_tap_stages: must be sorted ascending");
    for (int s : fusion_tap_stages)
      if (s < 0 || s >= n_stages)
        throw ConfigError("ModelConfig.fusion_tap_stages: stage index out of range");
    if (fusion_width < 1) throw ConfigError("ModelConfig.fusion_width: must be positive");
    if (attention_hidden < 1) throw ConfigError("ModelConfig.attention_hidden: must be positive");
    if (num_attributes < 1) throw ConfigError("ModelConfig.num_attributes: must be positive");
    if (input_h < 1 || input_w < 1) throw ConfigError("ModelConfig.input_h/input_w: must be positive");
  }

  static std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(v[i]);
    }
    return s;
  }

  static std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(std::stoi(item));
    return out;
  }

  // Canonical text form: fixed key order, one key=value per line.
  std::string to_text() const {
    std::string s;
    s += "stage_blocks=" + join_ints(stage_blocks) + "\n";
    s += "stage_widths=" + join_ints(stage_widths) + "\n";
    s += "self_mask_stages=" + join_ints(self_mask_stages) + "\n";
    s += "fusion_tap_stages=" + join_ints(fusion_tap_stages) + "\n";
    s += "fusion_width=" + std::to_string(fusion_width) + "\n";
    s += "attention_hidden=" + std::to_string(attention_hidden) + "\n";
    s += "num_attributes=" + std::to_string(num_attributes) + "\n";
    s += "input_h=" + std::to_string(input_h) + "\n";
    s += "input_w=" + std::to_string(input_w) + "\n";
    s += "enable_self_mask=" + std::to_string(enable_self_mask ? 1 : 0) + "\n";
    s += "enable_fusion_multilevel=" + std::to_string(enable_fusion_multilevel ? 1 : 0) + "\n";
    s += "enable_masked_attention=" + std::to_string(enable_masked_attention ? 1 : 0) + "\n";
    s += "enable_side_branch=" + std::to_string(enable_side_branch ? 1 : 0) + "\n";
    return s;
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig cfg;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
      if (line.empty() || line[0] == '#') continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("ModelConfig: malformed line '" + line + "'");
      std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      if (key == "stage_blocks") cfg.stage_blocks = split_ints(val);
      else if (key == "stage_widths") cfg.stage_widths = split_ints(val);
      else if (key == "self_mask_stages") cfg.self_mask_stages = split_ints(val);
      else if (key == "fusion_tap_stages") cfg.fusion_tap_stages = split_ints(val);
      else if (key == "fusion_width") cfg.fusion_width = std::stoi(val);
      else if (key == "attention_hidden") cfg.attention_hidden = std::stoi(val);
      else if (key == "num_attributes") cfg.num_attributes = std::stoi(val);
      else if (key == "input_h") cfg.input_h = std::stoi(val);
      else if (key == "input_w") cfg.input_w = std::stoi(val);
      else if (key == "enable_self_mask") cfg.enable_self_mask = (val == "1");
      else if (key == "enable_fusion_multilevel") cfg.enable_fusion_multilevel = (val == "1");
      else if (key == "enable_masked_attention") cfg.enable_masked_attention = (val == "1");
      else if (key == "enable_side_branch") cfg.enable_side_branch = (val == "1");
      else throw ParseError("ModelConfig: unknown key '" + key + "'");
    }
    return cfg;
  }

  static ModelConfig toy(int num_attributes = 8) {
    ModelConfig cfg;
    cfg.num_attributes = num_attributes;
    return cfg;
  }

  // ResNet-101 stage pattern, side branch tapping the three deepest stages.
  static ModelConfig full_scale(int num_attributes = 14) {
    ModelConfig cfg;
    cfg.stage_blocks = {3, 4, 23, 3};
    cfg.stage_widths = {256, 512, 1024, 2048};
    cfg.self_mask_stages = {1, 2, 3};
    cfg.fusion_tap_stages = {1, 2, 3};
    cfg.fusion_width = 256;
    cfg.attention_hidden = 256;
    cfg.num_attributes = num_attributes;
    cfg.input_h = 224;
    cfg.input_w = 224;
    return cfg;
  }
};

enum class Init { kaiming_fan_in, gaussian_001, zeros, ones };

// Owns every named parameter and buffer of a model. Names are
// hierarchical ("backbone.stage0.block1.conv2.w"); map order gives the
// deterministic serialization order, construction order gives the
// deterministic RNG consumption order.
template <typename T>
struct ParamRegistry {
  std::map<std::string, Tensor<T>> params;
  std::map<std::string, Tensor<T>> buffers;

  Tensor<T> add_param(Rng& rng, const std::string& name, Shape shape, Init init, int fan_in = 0) {
    Tensor<T> t(shape);
    switch (init) {
      case Init::kaiming_fan_in: {
        double std = std::sqrt(2.0 / std::max(1, fan_in));
        for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(rng.normal(0.0, std));
        break;
      }
      case Init::gaussian_001:
        for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(rng.normal(0.0, 0.01));
        break;
      case Init::ones:
        for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = T(1);
        break;
      case Init::zeros:
        break;
    }
    t.set_requires_grad(true);
    if (!params.emplace(name, t).second) throw ConfigError("duplicate parameter name " + name);
    return t;
  }

  Tensor<T> add_buffer(const std::string& name, Shape shape, T fill) {
    Tensor<T> t(shape, fill);
    if (!buffers.emplace(name, t).second) throw ConfigError("duplicate buffer name " + name);
    return t;
  }
};

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(ParamRegistry<T>& reg, Rng& rng, const std::string& name, int cin, int cout, int k,
              int stride_, int pad_, Init init)
      : stride(stride_), pad(pad_) {
    w = reg.add_param(rng, name + ".w", Shape{cout, cin, k, k}, init, cin * k * k);
    b = reg.add_param(rng, name + ".b", Shape{cout}, Init::zeros);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma, beta, running_mean, running_var;

  BatchNormLayer() = default;
  BatchNormLayer(ParamRegistry<T>& reg, Rng& rng, const std::string& name, int c) {
    gamma = reg.add_param(rng, name + ".gamma", Shape{c}, Init::ones);
    beta = reg.add_param(rng, name + ".beta", Shape{c}, Init::zeros);
    running_mean = reg.add_buffer(name + ".running_mean", Shape{c}, T(0));
    running_var = reg.add_buffer(name + ".running_var", Shape{c}, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) const {
    Tensor<T> rm = running_mean, rv = running_var;
    return batch_norm(x, gamma, beta, rm, rv, train ? BNMode::train : BNMode::eval);
  }
};

template <typename T>
struct LinearLayer {
  Tensor<T> w, b;

  LinearLayer() = default;
  LinearLayer(ParamRegistry<T>& reg, Rng& rng, const std::string& name, int in, int out, Init init) {
    w = reg.add_param(rng, name + ".w", Shape{out, in}, init, in);
    b = reg.add_param(rng, name + ".b", Shape{out}, Init::zeros);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w, b); }
};

struct ResidualBlockSpec {
  int in_channels = 0;
  int bottleneck_channels = 0;
  int out_channels = 0;
  int stride = 1;

  bool needs_projection() const { return in_channels != out_channels || stride != 1; }
};

// Bottleneck block: 1x1 reduce, 3x3 (carries the stride), 1x1 expand,
// plus a projection shortcut when shape changes.
template <typename T>
struct ResidualBlock {
  ResidualBlockSpec spec;
  Conv2dLayer<T> conv1, conv2, conv3;
  BatchNormLayer<T> bn1, bn2, bn3;
  std::optional<Conv2dLayer<T>> proj;
  std::optional<BatchNormLayer<T>> proj_bn;

  ResidualBlock() = default;
  ResidualBlock(ParamRegistry<T>& reg, Rng& rng, const std::string& name,
                const ResidualBlockSpec& s, Init init)
      : spec(s) {
    if (s.in_channels < 1 || s.bottleneck_channels < 1 || s.out_channels < 1)
      throw ConfigError("ResidualBlockSpec: channel counts must be positive");
    conv1 = Conv2dLayer<T>(reg, rng, name + ".conv1", s.in_channels, s.bottleneck_channels, 1, 1, 0, init);
    bn1 = BatchNormLayer<T>(reg, rng, name + ".bn1", s.bottleneck_channels);
    conv2 = Conv2dLayer<T>(reg, rng, name + ".conv2", s.bottleneck_channels, s.bottleneck_channels, 3,
                           s.stride, 1, init);
    bn2 = BatchNormLayer<T>(reg, rng, name + ".bn2", s.bottleneck_channels);
    conv3 = Conv2dLayer<T>(reg, rng, name + ".conv3", s.bottleneck_channels, s.out_channels, 1, 1, 0, init);
    bn3 = BatchNormLayer<T>(reg, rng, name + ".bn3", s.out_channels);
    if (s.needs_projection()) {
      proj.emplace(reg, rng, name + ".proj", s.in_channels, s.out_channels, 1, s.stride, 0, init);
      proj_bn.emplace(reg, rng, name + ".proj_bn", s.out_channels);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) const {
    if (x.dim(1) != spec.in_channels)
      throw ConfigError("residual block: input has " + std::to_string(x.dim(1)) +
                        " channels, expected " + std::to_string(spec.in_channels));
    Tensor<T> y = relu(bn1.forward(conv1.forward(x), train));
    y = relu(bn2.forward(conv2.forward(y), train));
    y = bn3.forward(conv3.forward(y), train);
    Tensor<T> shortcut = proj ? proj_bn->forward(proj->forward(x), train) : x;
    return relu(add(shortcut, y));
  }
};

// Coarse distraction awareness: a three-layer 1x1 stack predicts a
// single-channel saliency gate from the features it then multiplies.
template <typename T>
struct SelfMaskBlock {
  Conv2dLayer<T> c1, c2, c3;
  BatchNormLayer<T> b1, b2;

  SelfMaskBlock() = default;
  SelfMaskBlock(ParamRegistry<T>& reg, Rng& rng, const std::string& name, int channels) {
    const int mid = std::max(1, channels / 4);
    c1 = Conv2dLayer<T>(reg, rng, name + ".c1", channels, mid, 1, 1, 0, Init::gaussian_001);
    b1 = BatchNormLayer<T>(reg, rng, name + ".b1", mid);
    c2 = Conv2dLayer<T>(reg, rng, name + ".c2", mid, mid, 1, 1, 0, Init::gaussian_001);
    b2 = BatchNormLayer<T>(reg, rng, name + ".b2", mid);
    c3 = Conv2dLayer<T>(reg, rng, name + ".c3", mid, 1, 1, 1, 0, Init::gaussian_001);
  }

  // returns (gated features, saliency map in (0,1))
  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& f, bool train) const {
    Tensor<T> h = relu(b1.forward(c1.forward(f), train));
    h = relu(b2.forward(c2.forward(h), train));
    Tensor<T> m = sigmoid(c3.forward(h));
    return {gate_mul(f, m), m};
  }
};

// Channel-reduce each tap, re-sample to the target tap's resolution,
// sum, then smooth with two residual blocks.
template <typename T>
struct FusionBlock {
  std::vector<Conv2dLayer<T>> reduce;
  ResidualBlock<T> res1, res2;
  int target_tap = 0;

  FusionBlock() = default;
  FusionBlock(ParamRegistry<T>& reg, Rng& rng, const std::string& name,
              const std::vector<int>& tap_channels, int width, int target_tap_)
      : target_tap(target_tap_) {
    for (size_t i = 0; i < tap_channels.size(); ++i)
      reduce.emplace_back(reg, rng, name + ".reduce" + std::to_string(i), tap_channels[i], width, 1,
                          1, 0, Init::gaussian_001);
    ResidualBlockSpec rs{width, std::max(1, width / 4), width, 1};
    res1 = ResidualBlock<T>(reg, rng, name + ".res1", rs, Init::gaussian_001);
    res2 = ResidualBlock<T>(reg, rng, name + ".res2", rs, Init::gaussian_001);
  }

  Tensor<T> forward(const std::vector<Tensor<T>>& taps, bool train) const {
    if (taps.size() != reduce.size())
      throw ConfigError("fusion block: got " + std::to_string(taps.size()) + " taps, expected " +
                        std::to_string(reduce.size()));
    const int ht = taps[target_tap].dim(2), wt = taps[target_tap].dim(3);
    Tensor<T> acc;
    for (size_t i = 0; i < taps.size(); ++i) {
      Tensor<T> r = reduce[i].forward(taps[i]);
      if (r.dim(2) != ht || r.dim(3) != wt) r = resize_bilinear(r, ht, wt);
      acc = acc.defined() ? add(acc, r) : r;
    }
    return res2.forward(res1.forward(acc, train), train);
  }
};

template <typename T>
struct SideBranchOutput {
  Tensor<T> side_logits;
  Tensor<T> seg_logits;  // undefined when the mask branch is disabled
  Tensor<T> gate;        // undefined when the mask branch is disabled
};

// Fine distraction awareness. The mask branch (three 1x1 convs with two
// residual blocks before the final projection) predicts segmentation
// logits; its sigmoid gates the fused feature before confidence-weighted
// attention pools per-attribute descriptors. With use_mask off this is a
// plain confidence-weighted attention head.
template <typename T>
struct MaskedAttentionBlock {
  bool use_mask = true;
  Conv2dLayer<T> m1, m2, m3;
  BatchNormLayer<T> mb1, mb2;
  ResidualBlock<T> mres1, mres2;
  Conv2dLayer<T> attn;
  Tensor<T> head_w, head_b;

  MaskedAttentionBlock() = default;
  MaskedAttentionBlock(ParamRegistry<T>& reg, Rng& rng, const std::string& name, int in_channels,
                       int hidden, int num_attributes, bool use_mask_)
      : use_mask(use_mask_) {
    if (use_mask) {
      m1 = Conv2dLayer<T>(reg, rng, name + ".mask1", in_channels, hidden, 1, 1, 0, Init::gaussian_001);
      mb1 = BatchNormLayer<T>(reg, rng, name + ".mask_bn1", hidden);
      m2 = Conv2dLayer<T>(reg, rng, name + ".mask2", hidden, hidden, 1, 1, 0, Init::gaussian_001);
      mb2 = BatchNormLayer<T>(reg, rng, name + ".mask_bn2", hidden);
      ResidualBlockSpec rs{hidden, std::max(1, hidden / 4), hidden, 1};
      mres1 = ResidualBlock<T>(reg, rng, name + ".mask_res1", rs, Init::gaussian_001);
      mres2 = ResidualBlock<T>(reg, rng, name + ".mask_res2", rs, Init::gaussian_001);
      m3 = Conv2dLayer<T>(reg, rng, name + ".mask3", hidden, 1, 1, 1, 0, Init::gaussian_001);
    }
    attn = Conv2dLayer<T>(reg, rng, name + ".attn", in_channels, num_attributes, 1, 1, 0,
                          Init::gaussian_001);
    head_w = reg.add_param(rng, name + ".head.w", Shape{num_attributes, in_channels},
                           Init::gaussian_001);
    head_b = reg.add_param(rng, name + ".head.b", Shape{num_attributes}, Init::zeros);
  }

  SideBranchOutput<T> forward(const Tensor<T>& fused, bool train) const {
    SideBranchOutput<T> out;
    Tensor<T> gated = fused;
    if (use_mask) {
      Tensor<T> h = relu(mb1.forward(m1.forward(fused), train));
      h = relu(mb2.forward(m2.forward(h), train));
      h = mres2.forward(mres1.forward(h, train), train);
      out.seg_logits = m3.forward(h);
      out.gate = sigmoid(out.seg_logits);
      gated = gate_mul(fused, out.gate);
    }
    Tensor<T> attn_logits = attn.forward(gated);
    Tensor<T> desc = confidence_pool(gated, attn_logits);
    out.side_logits = attribute_head(desc, head_w, head_b);
    return out;
  }
};

template <typename T>
struct ModelOutput {
  Tensor<T> main_logits;
  Tensor<T> side_logits;      // undefined when side branch disabled
  Tensor<T> combined_logits;  // (main + side) / 2, or main alone
  Tensor<T> seg_logits;       // undefined when masked attention disabled
  Tensor<T> gate;             // undefined when masked attention disabled
  std::vector<Tensor<T>> saliency_maps;
};

template <typename T>
struct Model {
  ModelConfig cfg;
  ParamRegistry<T> reg;
  Conv2dLayer<T> stem;
  BatchNormLayer<T> stem_bn;
  std::vector<std::vector<ResidualBlock<T>>> stages;
  std::vector<std::optional<SelfMaskBlock<T>>> self_masks;  // per stage
  std::optional<FusionBlock<T>> fusion;
  std::optional<MaskedAttentionBlock<T>> side;
  LinearLayer<T> main_head;

  ModelOutput<T> forward(const Tensor<T>& images, bool train) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg.input_h ||
        images.dim(3) != cfg.input_w)
      throw ConfigError("model_forward: expected input [B,3," + std::to_string(cfg.input_h) + "," +
                        std::to_string(cfg.input_w) + "], got " + shape_str(images.shape()));
    ModelOutput<T> out;
    Tensor<T> x = relu(stem_bn.forward(stem.forward(images), train));
    std::map<int, Tensor<T>> tap_map;
    for (size_t s = 0; s < stages.size(); ++s) {
      for (const auto& block : stages[s]) x = block.forward(x, train);
      if (self_masks[s]) {
        auto [gated, m] = self_masks[s]->forward(x, train);
        x = gated;
        out.saliency_maps.push_back(m);
      }
      tap_map.emplace(static_cast<int>(s), x);
    }
    out.main_logits = main_head.forward(global_avg_pool(x));
    if (side) {
      std::vector<Tensor<T>> taps;
      if (cfg.enable_fusion_multilevel) {
        for (int s : cfg.fusion_tap_stages) taps.push_back(tap_map.at(s));
      } else {
        taps.push_back(tap_map.at(cfg.fusion_tap_stages.back()));
      }
      Tensor<T> fused = fusion->forward(taps, train);
      SideBranchOutput<T> sb = side->forward(fused, train);
      out.side_logits = sb.side_logits;
      out.seg_logits = sb.seg_logits;
      out.gate = sb.gate;
      out.combined_logits = scale(add(out.main_logits, out.side_logits), T(0.5));
    } else {
      out.combined_logits = out.main_logits;
    }
    return out;
  }
};

// Assembles the configured model. Backbone parameters get Kaiming
// fan-in init; the three proposed blocks get N(0, 0.01) conv weights.
template <typename T>
Model<T> build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model<T> model;
  model.cfg = cfg;
  auto& reg = model.reg;

  const int stem_w = cfg.stem_width();
  const int k = cfg.stem_kernel();
  model.stem = Conv2dLayer<T>(reg, rng, "backbone.stem", 3, stem_w, k, 2, k / 2, Init::kaiming_fan_in);
  model.stem_bn = BatchNormLayer<T>(reg, rng, "backbone.stem_bn", stem_w);

  const int n_stages = static_cast<int>(cfg.stage_blocks.size());
  int in_ch = stem_w;
  for (int s = 0; s < n_stages; ++s) {
    std::vector<ResidualBlock<T>> blocks;
    for (int b = 0; b < cfg.stage_blocks[s]; ++b) {
      ResidualBlockSpec spec;
      spec.in_channels = (b == 0) ? in_ch : cfg.stage_widths[s];
      spec.out_channels = cfg.stage_widths[s];
      spec.bottleneck_channels = std::max(1, cfg.stage_widths[s] / 4);
      spec.stride = (b == 0) ? 2 : 1;
      blocks.emplace_back(reg, rng, "backbone.stage" + std::to_string(s) + ".block" + std::to_string(b),
                          spec, Init::kaiming_fan_in);
    }
    model.stages.push_back(std::move(blocks));
    in_ch = cfg.stage_widths[s];

    bool want_mask = cfg.enable_self_mask &&
                     std::find(cfg.self_mask_stages.begin(), cfg.self_mask_stages.end(), s) !=
                         cfg.self_mask_stages.end();
    if (want_mask)
      model.self_masks.emplace_back(
          SelfMaskBlock<T>(reg, rng, "self_mask.stage" + std::to_string(s), cfg.stage_widths[s]));
    else
      model.self_masks.emplace_back(std::nullopt);
  }

  if (cfg.enable_side_branch) {
    std::vector<int> tap_channels;
    int target = 0;
    if (cfg.enable_fusion_multilevel) {
      for (int s : cfg.fusion_tap_stages) tap_channels.push_back(cfg.stage_widths[s]);
      target = 1;  // middle tap sets the fused resolution
    } else {
      tap_channels.push_back(cfg.stage_widths[cfg.fusion_tap_stages.back()]);
    }
    model.fusion.emplace(reg, rng, "fusion", tap_channels, cfg.fusion_width, target);
    model.side.emplace(reg, rng, "side", cfg.fusion_width, cfg.attention_hidden,
                       cfg.num_attributes, cfg.enable_masked_attention);
  }

  model.main_head = LinearLayer<T>(reg, rng, "head.main", cfg.stage_widths.back(),
                                   cfg.num_attributes, Init::kaiming_fan_in);
  return model;
}

template <typename T>
int64_t count_parameters(const Model<T>& model) {
  int64_t n = 0;
  for (const auto& [name, t] : model.reg.params) n += t.numel();
  return n;
}

// Scalar parameter count grouped by the top-level module prefix.
template <typename T>
std::map<std::string, int64_t> count_parameters_by_module(const Model<T>& model) {
  std::map<std::string, int64_t> out;
  for (const auto& [name, t] : model.reg.params) {
    std::string prefix = name.substr(0, name.find('.'));
    out[prefix] += t.numel();
  }
  return out;
}

// Fig-style probe: sum features over channels and binarize each sample at
// the spatial median of the summed map (even count: mean of the two
// middle values). Strictly-greater comparison, so a constant map is all
// zeros.
template <typename T>
Tensor<T> median_binarize(const Tensor<T>& features) {
  if (features.rank() != 4) throw ConfigError("median_binarize: expected BCHW input");
  const int b_n = features.dim(0), c_n = features.dim(1), h = features.dim(2), w = features.dim(3);
  const int hw = h * w;
  Tensor<T> out(Shape{b_n, 1, h, w});
  std::vector<T> summed(hw);
  std::vector<T> sorted(hw);
  for (int b = 0; b < b_n; ++b) {
    std::fill(summed.begin(), summed.end(), T(0));
    for (int c = 0; c < c_n; ++c) {
      const T* p = features.data() + (static_cast<int64_t>(b) * c_n + c) * hw;
      for (int i = 0; i < hw; ++i) summed[i] += p[i];
    }
    sorted = summed;
    std::sort(sorted.begin(), sorted.end());
    T median = (hw % 2 == 1) ? sorted[hw / 2]
                             : (sorted[hw / 2 - 1] + sorted[hw / 2]) / T(2);
    T* po = out.data() + static_cast<int64_t>(b) * hw;
    for (int i = 0; i < hw; ++i) po[i] = summed[i] > median ? T(1) : T(0);
  }
  return out;
}

// Checkpoint layout: magic "DAHAR01", u32 config byte count, the
// canonical ModelConfig text, u32 record count, then tensor records
// (params and buffers merged) in ascending name order.
inline constexpr char kCheckpointMagic[] = "DAHAR01";

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 7);
  std::string cfg = model.cfg.to_text();
  detail::write_le<uint32_t>(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  std::map<std::string, Tensor<T>> all;
  for (const auto& [name, t] : model.reg.params) all.emplace(name, t);
  for (const auto& [name, t] : model.reg.buffers) all.emplace(name, t);
  detail::write_le<uint32_t>(os, static_cast<uint32_t>(all.size()));
  for (const auto& [name, t] : all) write_tensor_record(os, name, t);
  if (!os) throw ParseError("write failure on " + path);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open " + path);
  char magic[7];
  is.read(magic, 7);
  if (!is || std::string(magic, 7) != kCheckpointMagic)
    throw ParseError("bad checkpoint magic in " + path);
  uint32_t cfg_len = detail::read_le<uint32_t>(is, path);
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), cfg_len);
  if (!is) throw ParseError("truncated checkpoint config in " + path);
  ModelConfig cfg = ModelConfig::from_text(cfg_text);
  Rng rng(0);
  Model<T> model = build_model<T>(cfg, rng);
  uint32_t n = detail::read_le<uint32_t>(is, path);
  for (uint32_t i = 0; i < n; ++i) {
    auto [name, t] = read_tensor_record<T>(is, path);
    auto pit = model.reg.params.find(name);
    auto bit = model.reg.buffers.find(name);
    Tensor<T>* dst = pit != model.reg.params.end() ? &pit->second
                    : bit != model.reg.buffers.end() ? &bit->second
                                                     : nullptr;
    if (dst == nullptr) throw ParseError("checkpoint tensor '" + name + "' not in model");
    if (dst->shape() != t.shape())
      throw ParseError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                       ", model expects " + shape_str(dst->shape()));
    dst->vec() = t.vec();
  }
  return model;
}

}  // namespace dahar
