#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tg/optim.hpp"
#include "tg/video_ops.hpp"

namespace tg {

enum class ModelKind { slowfast, tsm };
enum class Downsample { maxpool, strided_conv };
enum class ConvStyle { full3d, two_plus_one_d };
enum class InputMode { rgb, diff };

std::string to_string(ModelKind v);
std::string to_string(Activation v);
std::string to_string(Downsample v);
std::string to_string(ConvStyle v);
std::string to_string(InputMode v);
ModelKind parse_model_kind(const std::string& s);
Activation parse_activation(const std::string& s);
Downsample parse_downsample(const std::string& s);
ConvStyle parse_conv_style(const std::string& s);
InputMode parse_input_mode(const std::string& s);

/// Every architectural choice as data. Defaults are the desk-scale variant:
/// ELU, max-pool downsampling and (2+1)D blocks.
struct ModelConfig {
  ModelKind kind = ModelKind::slowfast;
  Index num_classes = 4;
  Index clip_len = 64;
  Index alpha = 4;              // slow pathway temporal stride
  Rational beta{1, 8};          // fast/slow channel ratio
  Index stem_channels = 16;
  std::vector<Index> stage_blocks{1, 1, 1};
  Activation activation = Activation::elu;
  Downsample downsample = Downsample::maxpool;
  ConvStyle conv_style = ConvStyle::two_plus_one_d;
  ShiftSpec shift{};            // tsm only
  InputMode input_mode = InputMode::rgb;
  bool batchnorm = true;
  Index in_channels = 3;

  static Index default_clip_len(ModelKind kind) { return kind == ModelKind::slowfast ? 64 : 16; }

  void validate() const;
  /// Canonical "model.key = value" lines, used for checkpoints and hashing.
  std::string to_text() const;
  /// Hash of the canonical text. Fields a kind ignores (shift for slowfast,
  /// alpha/beta for tsm) do not contribute.
  std::uint64_t config_hash() const;
  /// Sets one "model.*" key; returns false for keys this struct does not own.
  bool set_field(const std::string& key, const std::string& value);
};

struct NamedBuffer {
  std::string name;
  Tensor tensor;
};

/// A classifier over [N, C, T, H, W] clips producing pre-softmax logits.
class Model {
 public:
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  virtual Tensor forward(const Tensor& batch) = 0;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<NamedBuffer>& buffers() { return buffers_; }
  const std::vector<NamedBuffer>& buffers() const { return buffers_; }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  /// Curriculum stage: the expected clip length and whether temporal shift is
  /// active. clip_len 1 is single-frame mode (tsm, shift off).
  virtual void set_stage(Index clip_len, bool shift_enabled);
  Index active_clip_len() const { return active_clip_len_; }
  bool shift_enabled() const { return shift_enabled_; }

  Parameter& parameter(const std::string& name);

 protected:
  explicit Model(ModelConfig config);

  // Construction helpers; registration order is the checkpoint order.
  Tensor add_conv_weight(const std::string& name, Shape shape);
  Tensor add_linear_weight(const std::string& name, Shape shape);
  Tensor add_constant(const std::string& name, Shape shape, double value);
  BatchNormBuffers* add_batchnorm_buffers(const std::string& name, Index channels);
  void init_rng(std::uint64_t seed) { seed_ = seed; }

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<NamedBuffer> buffers_;
  std::deque<BatchNormBuffers> bn_buffers_;
  bool training_ = true;
  Index active_clip_len_;
  bool shift_enabled_ = true;
  std::uint64_t seed_ = 0;
};

std::unique_ptr<Model> build_model(const ModelConfig& config, std::uint64_t seed);

Index count_parameters(const Model& model);

/// Channel widths used by the SlowFast pathways at each stage.
Index slow_channels(const ModelConfig& config, std::size_t stage);
Index fast_channels(const ModelConfig& config, std::size_t stage);

// Checkpoints ---------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'T', 'G', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

struct ArrayRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  int format_version = kCheckpointVersion;
  ModelConfig config;
  std::vector<ArrayRecord> parameters;  // construction order
  std::vector<ArrayRecord> buffers;     // batch-norm running statistics
  std::vector<ArrayRecord> momentum;    // optimiser state, keyed by parameter name
  int epoch = 0;
  std::uint64_t rng_seed = 0;
  /// Free-form resume state (stage index, stage epoch, ...).
  std::map<std::string, std::string> extra;
};

Checkpoint make_checkpoint(const Model& model, int epoch, std::uint64_t rng_seed,
                           std::map<std::string, std::string> extra = {});
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
/// Copies parameters, buffers and momentum into a model built from the same
/// config. Rejects a config-hash mismatch.
void restore_checkpoint(Model& model, const Checkpoint& ckpt);
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace tg
