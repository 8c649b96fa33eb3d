#include "tg/models.hpp"

#include <cmath>
#include <sstream>

#include "tg/rng.hpp"
#include "tg/text.hpp"

namespace tg {

// Enum text -----------------------------------------------------------------

std::string to_string(ModelKind v) { return v == ModelKind::slowfast ? "slowfast" : "tsm"; }
std::string to_string(Activation v) {
  switch (v) {
    case Activation::elu: return "elu";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}
std::string to_string(Downsample v) { return v == Downsample::maxpool ? "maxpool" : "strided_conv"; }
std::string to_string(ConvStyle v) { return v == ConvStyle::full3d ? "full3d" : "two_plus_one_d"; }
std::string to_string(InputMode v) { return v == InputMode::rgb ? "rgb" : "diff"; }

ModelKind parse_model_kind(const std::string& s) {
  if (s == "slowfast") return ModelKind::slowfast;
  if (s == "tsm") return ModelKind::tsm;
  throw ShapeError("unknown model kind '" + s + "' (slowfast|tsm)");
}
Activation parse_activation(const std::string& s) {
  if (s == "elu") return Activation::elu;
  if (s == "relu") return Activation::relu;
  throw ShapeError("unknown activation '" + s + "' (elu|relu)");
}
Downsample parse_downsample(const std::string& s) {
  if (s == "maxpool") return Downsample::maxpool;
  if (s == "strided_conv") return Downsample::strided_conv;
  throw ShapeError("unknown downsample '" + s + "' (maxpool|strided_conv)");
}
ConvStyle parse_conv_style(const std::string& s) {
  if (s == "full3d") return ConvStyle::full3d;
  if (s == "two_plus_one_d") return ConvStyle::two_plus_one_d;
  throw ShapeError("unknown conv style '" + s + "' (full3d|two_plus_one_d)");
}
InputMode parse_input_mode(const std::string& s) {
  if (s == "rgb") return InputMode::rgb;
  if (s == "diff") return InputMode::diff;
  throw ShapeError("unknown input mode '" + s + "' (rgb|diff)");
}

using text::parse_bool;
using text::parse_index;
using text::parse_index_list;

// ModelConfig -----------------------------------------------------------------

void ModelConfig::validate() const {
  if (num_classes < 1) throw ShapeError("model: num_classes must be positive");
  if (clip_len < 1) throw ShapeError("model: clip_len must be positive");
  if (stem_channels < 1) throw ShapeError("model: stem_channels must be positive");
  if (in_channels < 1) throw ShapeError("model: in_channels must be positive");
  if (stage_blocks.empty()) throw ShapeError("model: stage_blocks must name at least one stage");
  for (std::size_t i = 0; i < stage_blocks.size(); ++i) {
    if (stage_blocks[i] < 1) {
      throw ShapeError("model: stage " + std::to_string(i) + " has " +
                       std::to_string(stage_blocks[i]) + " blocks; need at least 1");
    }
  }
  if (kind == ModelKind::slowfast) {
    if (alpha < 1) throw ShapeError("model: alpha must be positive");
    if (clip_len % alpha != 0) {
      throw ShapeError("model: clip_len " + std::to_string(clip_len) +
                       " is not divisible by alpha " + std::to_string(alpha));
    }
    if (beta.num == 0 || beta.num > beta.den) throw ShapeError("model: beta must lie in (0, 1]");
  } else {
    shift.validate();
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "model.kind = " << to_string(kind) << '\n';
  os << "model.num_classes = " << num_classes << '\n';
  os << "model.clip_len = " << clip_len << '\n';
  os << "model.alpha = " << alpha << '\n';
  os << "model.beta = " << beta.str() << '\n';
  os << "model.stem_channels = " << stem_channels << '\n';
  os << "model.stage_blocks = ";
  for (std::size_t i = 0; i < stage_blocks.size(); ++i) os << (i ? "," : "") << stage_blocks[i];
  os << '\n';
  os << "model.activation = " << to_string(activation) << '\n';
  os << "model.downsample = " << to_string(downsample) << '\n';
  os << "model.conv_style = " << to_string(conv_style) << '\n';
  os << "model.shift_forward = " << shift.fraction_forward.str() << '\n';
  os << "model.shift_backward = " << shift.fraction_backward.str() << '\n';
  os << "model.shift_residual = " << (shift.residual_embedding ? "true" : "false") << '\n';
  os << "model.input_mode = " << to_string(input_mode) << '\n';
  os << "model.batchnorm = " << (batchnorm ? "true" : "false") << '\n';
  os << "model.in_channels = " << in_channels << '\n';
  return os.str();
}

std::uint64_t ModelConfig::config_hash() const {
  ModelConfig c = *this;
  if (kind == ModelKind::slowfast) {
    c.shift = ShiftSpec{};
  } else {
    c.alpha = 4;
    c.beta = Rational{1, 8};
  }
  return fnv1a64(c.to_text());
}

bool ModelConfig::set_field(const std::string& key, const std::string& v) {
  if (key == "model.kind") kind = parse_model_kind(v);
  else if (key == "model.num_classes") num_classes = parse_index(key, v);
  else if (key == "model.clip_len") clip_len = parse_index(key, v);
  else if (key == "model.alpha") alpha = parse_index(key, v);
  else if (key == "model.beta") beta = Rational::parse(v);
  else if (key == "model.stem_channels") stem_channels = parse_index(key, v);
  else if (key == "model.stage_blocks") stage_blocks = parse_index_list(key, v);
  else if (key == "model.activation") activation = parse_activation(v);
  else if (key == "model.downsample") downsample = parse_downsample(v);
  else if (key == "model.conv_style") conv_style = parse_conv_style(v);
  else if (key == "model.shift_forward") shift.fraction_forward = Rational::parse(v);
  else if (key == "model.shift_backward") shift.fraction_backward = Rational::parse(v);
  else if (key == "model.shift_residual") shift.residual_embedding = parse_bool(key, v);
  else if (key == "model.input_mode") input_mode = parse_input_mode(v);
  else if (key == "model.batchnorm") batchnorm = parse_bool(key, v);
  else if (key == "model.in_channels") in_channels = parse_index(key, v);
  else return false;
  return true;
}

Index slow_channels(const ModelConfig& config, std::size_t stage) {
  return config.stem_channels << stage;
}

Index fast_channels(const ModelConfig& config, std::size_t stage) {
  return std::max<Index>(1, config.beta.floor_times(config.stem_channels << stage));
}

// Model base ------------------------------------------------------------------

Model::Model(ModelConfig config) : config_(std::move(config)), active_clip_len_(config_.clip_len) {}

void Model::set_stage(Index clip_len, bool shift_enabled) {
  if (clip_len < 1) throw ShapeError("stage clip_len must be positive");
  active_clip_len_ = clip_len;
  shift_enabled_ = shift_enabled;
}

Parameter& Model::parameter(const std::string& name) {
  for (Parameter& p : params_) {
    if (p.name == name) return p;
  }
  throw ShapeError("no parameter named '" + name + "'");
}

Tensor Model::add_conv_weight(const std::string& name, Shape shape) {
  // fan_in = Cin * kernel volume, same rule as dense layers
  return add_linear_weight(name, std::move(shape));
}

Tensor Model::add_linear_weight(const std::string& name, Shape shape) {
  for (const Parameter& p : params_) {
    if (p.name == name) throw ShapeError("duplicate parameter name '" + name + "'");
  }
  Index fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  Tensor t(std::move(shape), 0.0, true);
  // Each parameter draws from its own stream keyed by name.
  Rng rng(derive_seed(seed_, "init", {fnv1a64(name)}));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  params_.push_back({name, t, {}});
  return t;
}

Tensor Model::add_constant(const std::string& name, Shape shape, double value) {
  for (const Parameter& p : params_) {
    if (p.name == name) throw ShapeError("duplicate parameter name '" + name + "'");
  }
  Tensor t(std::move(shape), value, true);
  params_.push_back({name, t, {}});
  return t;
}

BatchNormBuffers* Model::add_batchnorm_buffers(const std::string& name, Index channels) {
  bn_buffers_.push_back(BatchNormBuffers::create(channels));
  BatchNormBuffers& b = bn_buffers_.back();
  buffers_.push_back({name + ".running_mean", b.running_mean});
  buffers_.push_back({name + ".running_var", b.running_var});
  buffers_.push_back({name + ".batches_seen", b.batches_seen});
  return &b;
}

namespace {

// Building blocks -------------------------------------------------------------

struct Norm {
  Tensor gamma, beta;
  BatchNormBuffers* buffers = nullptr;

  Tensor operator()(const Tensor& x, bool training) const {
    return buffers ? batchnorm(x, gamma, beta, *buffers, training) : x;
  }
};

class NetBase : public Model {
 protected:
  using Model::Model;

  Norm add_norm(const std::string& name, Index channels) {
    if (!config_.batchnorm) return {};
    Norm n;
    n.gamma = add_constant(name + ".gamma", {channels}, 1.0);
    n.beta = add_constant(name + ".beta", {channels}, 0.0);
    n.buffers = add_batchnorm_buffers(name, channels);
    return n;
  }

  // Bias only when no normalisation follows.
  Tensor add_bias(const std::string& name, Index channels) {
    return config_.batchnorm ? Tensor{} : add_constant(name + ".bias", {channels}, 0.0);
  }

  Tensor act(const Tensor& x) const { return activate(x, config_.activation); }

  // Spatial stride of the stem and of each later stage's first block.
  Index conv_stride() const { return config_.downsample == Downsample::strided_conv ? 2 : 1; }
};

// 3D convolution in the configured style: full k^3 kernel or (2+1)D.
struct Conv3dUnit {
  ConvStyle style;
  Conv2Plus1DSpec spec;
  Tensor weight, bias;          // full3d
  Conv2Plus1DWeights factored;  // two_plus_one_d
  Norm mid_norm;
  Index stride = 1;             // spatial

  Tensor operator()(const Tensor& x, bool training) const {
    if (style == ConvStyle::full3d) {
      const Index p = (spec.k - 1) / 2;
      return conv3d(x, weight, bias, {1, stride, stride}, {p, p, p});
    }
    return conv2plus1d(x, spec, factored, training, stride);
  }
};

struct Block3d {
  Conv3dUnit conv1, conv2;
  Norm norm1, norm2;
  Tensor proj_weight;
  Norm proj_norm;
  Index stride = 1;  // spatial, on conv1 and the projection
};

struct Block2d {
  Tensor w1, b1, w2, b2;
  Norm norm1, norm2;
  Tensor proj_weight;
  Norm proj_norm;
  Index stride = 1;
};

// SlowFast ----------------------------------------------------------------------

class SlowFastNet final : public NetBase {
 public:
  SlowFastNet(const ModelConfig& config, std::uint64_t seed) : NetBase(config) {
    init_rng(seed);
    const std::size_t stages = config_.stage_blocks.size();
    const Index cs0 = slow_channels(config_, 0), cf0 = fast_channels(config_, 0);

    slow_stem_ = conv_unit("slow.stem.conv", config_.in_channels, cs0, conv_stride());
    slow_stem_norm_ = add_norm("slow.stem.norm", cs0);
    fast_stem_ = conv_unit("fast.stem.conv", config_.in_channels, cf0, conv_stride());
    fast_stem_norm_ = add_norm("fast.stem.norm", cf0);
    fuse_.push_back(add_conv_weight("lateral.0.weight", {2 * cf0, cf0, kLateralKernelT, 1, 1}));

    Index in_s = cs0 + 2 * cf0, in_f = cf0;
    for (std::size_t s = 0; s < stages; ++s) {
      const Index cs = slow_channels(config_, s), cf = fast_channels(config_, s);
      const std::string tag = std::to_string(s);
      std::vector<Block3d> sb, fb;
      for (Index b = 0; b < config_.stage_blocks[s]; ++b) {
        const std::string bt = tag + "." + std::to_string(b);
        const Index stride = s > 0 && b == 0 ? conv_stride() : 1;
        sb.push_back(block("slow.stage" + bt, b == 0 ? in_s : cs, cs, stride));
        fb.push_back(block("fast.stage" + bt, b == 0 ? in_f : cf, cf, stride));
      }
      slow_blocks_.push_back(std::move(sb));
      fast_blocks_.push_back(std::move(fb));
      fuse_.push_back(add_conv_weight("lateral." + std::to_string(s + 1) + ".weight",
                                      {2 * cf, cf, kLateralKernelT, 1, 1}));
      in_s = cs + 2 * cf;
      in_f = cf;
    }
    head_w_ = add_linear_weight("head.weight", {config_.num_classes, in_s + in_f});
    head_b_ = add_constant("head.bias", {config_.num_classes}, 0.0);
  }

  void set_stage(Index clip_len, bool shift_enabled) override {
    if (clip_len % config_.alpha != 0) {
      throw ShapeError("slowfast: stage clip_len " + std::to_string(clip_len) +
                       " not divisible by alpha " + std::to_string(config_.alpha));
    }
    Model::set_stage(clip_len, shift_enabled);
  }

  Tensor forward(const Tensor& batch) override {
    if (batch.ndim() != 5 || batch.dim(1) != config_.in_channels) {
      throw ShapeError("slowfast: expected [N," + std::to_string(config_.in_channels) +
                       ",T,H,W], got " + shape_str(batch.shape()));
    }
    const Index t = batch.dim(2);
    if (t != active_clip_len_) {
      throw ShapeError("slowfast: clip has T=" + std::to_string(t) + ", model expects " +
                       std::to_string(active_clip_len_));
    }
    const Index alpha = config_.alpha;
    Tensor slow = select_frames(batch, 0, alpha, t / alpha);
    Tensor fast = batch;

    slow = pool(act(slow_stem_norm_(slow_stem_(slow, training_), training_)));
    fast = pool(act(fast_stem_norm_(fast_stem_(fast, training_), training_)));
    slow = lateral_fuse(fast, slow, alpha, fuse_[0]);

    for (std::size_t s = 0; s < slow_blocks_.size(); ++s) {
      if (s > 0) {
        slow = pool(slow);
        fast = pool(fast);
      }
      for (const Block3d& b : slow_blocks_[s]) slow = run_block(b, slow);
      for (const Block3d& b : fast_blocks_[s]) fast = run_block(b, fast);
      slow = lateral_fuse(fast, slow, alpha, fuse_[s + 1]);
    }
    Tensor features = concat_channels({global_avg_pool(slow), global_avg_pool(fast)});
    return linear(features, head_w_, head_b_);
  }

 private:
  Conv3dUnit conv_unit(const std::string& name, Index cin, Index cout, Index stride = 1) {
    Conv3dUnit u;
    u.style = config_.conv_style;
    u.spec = Conv2Plus1DSpec{cin, cout, 3, std::nullopt};
    u.stride = stride;
    if (u.style == ConvStyle::full3d) {
      u.weight = add_conv_weight(name + ".weight", {cout, cin, 3, 3, 3});
      u.bias = add_bias(name, cout);
    } else {
      const Index m = u.spec.mid();
      u.factored.spatial = add_conv_weight(name + ".spatial", {m, cin, 1, 3, 3});
      u.mid_norm = add_norm(name + ".mid_norm", m);
      u.factored.gamma = u.mid_norm.gamma;
      u.factored.beta = u.mid_norm.beta;
      u.factored.buffers = u.mid_norm.buffers;
      u.factored.activation = config_.activation;
      u.factored.temporal = add_conv_weight(name + ".temporal", {cout, m, 3, 1, 1});
    }
    return u;
  }

  Tensor pool(const Tensor& x) const {
    return config_.downsample == Downsample::maxpool ? maxpool3d(x, {1, 2, 2}, {1, 2, 2}) : x;
  }

  Block3d block(const std::string& name, Index cin, Index cout, Index stride) {
    Block3d b;
    b.stride = stride;
    b.conv1 = conv_unit(name + ".conv1", cin, cout, stride);
    b.norm1 = add_norm(name + ".norm1", cout);
    b.conv2 = conv_unit(name + ".conv2", cout, cout);
    b.norm2 = add_norm(name + ".norm2", cout);
    if (cin != cout || stride != 1) {
      b.proj_weight = add_conv_weight(name + ".proj.weight", {cout, cin, 1, 1, 1});
      b.proj_norm = add_norm(name + ".proj.norm", cout);
    }
    return b;
  }

  Tensor run_block(const Block3d& b, const Tensor& x) const {
    Tensor h = act(b.norm1(b.conv1(x, training_), training_));
    h = b.norm2(b.conv2(h, training_), training_);
    Tensor shortcut = x;
    if (b.proj_weight.defined()) {
      shortcut = b.proj_norm(conv3d(x, b.proj_weight, {}, {1, b.stride, b.stride}), training_);
    }
    return act(add(shortcut, h));
  }

  Conv3dUnit slow_stem_, fast_stem_;
  Norm slow_stem_norm_, fast_stem_norm_;
  std::vector<std::vector<Block3d>> slow_blocks_, fast_blocks_;
  std::vector<Tensor> fuse_;
  Tensor head_w_, head_b_;
};

// TSM -----------------------------------------------------------------------------

class TsmNet final : public NetBase {
 public:
  TsmNet(const ModelConfig& config, std::uint64_t seed) : NetBase(config) {
    init_rng(seed);
    const Index c0 = config_.stem_channels;
    stem_w_ = add_conv_weight("stem.conv.weight", {c0, config_.in_channels, 3, 3});
    stem_b_ = add_bias("stem.conv", c0);
    stem_norm_ = add_norm("stem.norm", c0);
    Index in = c0;
    for (std::size_t s = 0; s < config_.stage_blocks.size(); ++s) {
      const Index c = c0 << s;
      const std::string tag = std::to_string(s);
      std::vector<Block2d> blocks;
      for (Index b = 0; b < config_.stage_blocks[s]; ++b) {
        const Index stride = s > 0 && b == 0 ? conv_stride() : 1;
        blocks.push_back(block("stage" + tag + "." + std::to_string(b), b == 0 ? in : c, c, stride));
      }
      stages_.push_back(std::move(blocks));
      in = c;
    }
    head_w_ = add_linear_weight("head.weight", {config_.num_classes, in});
    head_b_ = add_constant("head.bias", {config_.num_classes}, 0.0);
  }

  void set_stage(Index clip_len, bool shift_enabled) override {
    if (clip_len == 1 && shift_enabled) {
      throw ShapeError("tsm: single-frame stage requires shift to be disabled");
    }
    Model::set_stage(clip_len, shift_enabled);
  }

  Tensor forward(const Tensor& batch) override {
    if (batch.ndim() != 5 || batch.dim(1) != config_.in_channels) {
      throw ShapeError("tsm: expected [N," + std::to_string(config_.in_channels) + ",T,H,W], got " +
                       shape_str(batch.shape()));
    }
    const Index n = batch.dim(0), t = batch.dim(2);
    if (active_clip_len_ == 1 && t > 1) {
      throw ShapeError("tsm: single-frame mode got a clip with T=" + std::to_string(t));
    }
    if (t != active_clip_len_) {
      throw ShapeError("tsm: clip has T=" + std::to_string(t) + ", model expects " +
                       std::to_string(active_clip_len_));
    }
    const bool shifting = shift_enabled_ && !config_.shift.is_identity();
    Tensor x = clip_to_frames(batch);
    const Index ss = conv_stride();
    x = pool(act(stem_norm_(conv2d(x, stem_w_, stem_b_, {ss, ss}, {1, 1}), training_)));
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (s > 0) x = pool(x);
      for (const Block2d& b : stages_[s]) x = run_block(b, x, t, shifting);
    }
    Tensor logits = linear(global_avg_pool(x), head_w_, head_b_);  // [N*T, K]
    return mean_axis1(logits.reshape({n, t, config_.num_classes}));
  }

 private:
  Tensor pool(const Tensor& x) const {
    if (config_.downsample != Downsample::maxpool) return x;
    const Shape& s = x.shape();
    Tensor y = maxpool3d(x.reshape({s[0], s[1], 1, s[2], s[3]}), {1, 2, 2}, {1, 2, 2});
    const Shape& ys = y.shape();
    return y.reshape({ys[0], ys[1], ys[3], ys[4]});
  }

  Block2d block(const std::string& name, Index cin, Index cout, Index stride) {
    Block2d b;
    b.stride = stride;
    b.w1 = add_conv_weight(name + ".conv1.weight", {cout, cin, 3, 3});
    b.b1 = add_bias(name + ".conv1", cout);
    b.norm1 = add_norm(name + ".norm1", cout);
    b.w2 = add_conv_weight(name + ".conv2.weight", {cout, cout, 3, 3});
    b.b2 = add_bias(name + ".conv2", cout);
    b.norm2 = add_norm(name + ".norm2", cout);
    if (cin != cout || stride != 1) {
      b.proj_weight = add_conv_weight(name + ".proj.weight", {cout, cin, 1, 1});
      b.proj_norm = add_norm(name + ".proj.norm", cout);
    }
    return b;
  }

  Tensor run_block(const Block2d& b, Tensor x, Index t, bool shifting) const {
    Tensor branch_in = x;
    if (shifting) {
      if (config_.shift.residual_embedding) {
        branch_in = tsm_shift_frames(x, t, config_.shift);
      } else {
        x = tsm_shift_frames(x, t, config_.shift);
        branch_in = x;
      }
    }
    Tensor h = act(b.norm1(conv2d(branch_in, b.w1, b.b1, {b.stride, b.stride}, {1, 1}), training_));
    h = b.norm2(conv2d(h, b.w2, b.b2, {1, 1}, {1, 1}), training_);
    Tensor shortcut = x;
    if (b.proj_weight.defined()) {
      shortcut = b.proj_norm(conv2d(x, b.proj_weight, {}, {b.stride, b.stride}), training_);
    }
    return act(add(shortcut, h));
  }

  Tensor stem_w_, stem_b_;
  Norm stem_norm_;
  std::vector<std::vector<Block2d>> stages_;
  Tensor head_w_, head_b_;
};

}  // namespace

std::unique_ptr<Model> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  if (config.kind == ModelKind::slowfast) return std::make_unique<SlowFastNet>(config, seed);
  return std::make_unique<TsmNet>(config, seed);
}

Index count_parameters(const Model& model) {
  Index n = 0;
  for (const Parameter& p : model.parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace tg
