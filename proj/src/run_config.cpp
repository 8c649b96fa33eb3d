#include "tg/run_config.hpp"

#include <fstream>
#include <sstream>

#include "tg/text.hpp"

namespace tg {

using text::format_double;
using text::parse_bool;
using text::parse_double;
using text::parse_index;
using text::parse_index_list;

namespace {

bool set_optim(OptimConfig& o, const std::string& key, const std::string& name, const std::string& v) {
  if (name == "lr") o.learning_rate = parse_double(key, v);
  else if (name == "momentum") o.momentum = parse_double(key, v);
  else if (name == "weight_decay") o.weight_decay = parse_double(key, v);
  else if (name == "lr_decay_factor") o.lr_decay_factor = parse_double(key, v);
  else if (name == "lr_decay_every") o.lr_decay_every_epochs = static_cast<int>(parse_index(key, v));
  else return false;
  return true;
}

bool set_augment(AugmentConfig& a, const std::string& key, const std::string& name, const std::string& v) {
  if (name == "base_size") a.base_size = parse_index(key, v);
  else if (name == "scale_min") a.scale_min = parse_double(key, v);
  else if (name == "scale_max") a.scale_max = parse_double(key, v);
  else if (name == "crop_size") a.crop_size = parse_index(key, v);
  else if (name == "flip_prob") a.flip_prob = parse_double(key, v);
  else if (name == "lighting") a.lighting = parse_double(key, v);
  else if (name == "contrast") a.contrast = parse_double(key, v);
  else if (name == "corner_crop") a.corner_crop = parse_bool(key, v);
  else if (name == "reverse_prob") a.reverse_prob = parse_double(key, v);
  else if (name == "strides") a.strides = parse_index_list(key, v);
  else return false;
  return true;
}

bool set_stage(StagePlan& s, const std::string& key, const std::string& name, const std::string& v) {
  if (name == "clip_len") s.clip_len = parse_index(key, v);
  else if (name == "shift") s.shift_enabled = parse_bool(key, v);
  else if (name == "epochs") s.epochs = static_cast<int>(parse_index(key, v));
  else if (name == "promotion_threshold") {
    if (v == "none") s.promotion_threshold.reset();
    else s.promotion_threshold = parse_double(key, v);
  } else if (name.rfind("optim.", 0) == 0) return set_optim(s.optim, key, name.substr(6), v);
  else if (name.rfind("augment.", 0) == 0) return set_augment(s.augment, key, name.substr(8), v);
  else return false;
  return true;
}

void write_optim(std::ostream& os, const std::string& prefix, const OptimConfig& o) {
  os << prefix << "lr = " << format_double(o.learning_rate) << '\n';
  os << prefix << "momentum = " << format_double(o.momentum) << '\n';
  os << prefix << "weight_decay = " << format_double(o.weight_decay) << '\n';
  os << prefix << "lr_decay_factor = " << format_double(o.lr_decay_factor) << '\n';
  os << prefix << "lr_decay_every = " << o.lr_decay_every_epochs << '\n';
}

void write_augment(std::ostream& os, const std::string& prefix, const AugmentConfig& a) {
  os << prefix << "base_size = " << a.base_size << '\n';
  os << prefix << "scale_min = " << format_double(a.scale_min) << '\n';
  os << prefix << "scale_max = " << format_double(a.scale_max) << '\n';
  os << prefix << "crop_size = " << a.crop_size << '\n';
  os << prefix << "flip_prob = " << format_double(a.flip_prob) << '\n';
  os << prefix << "lighting = " << format_double(a.lighting) << '\n';
  os << prefix << "contrast = " << format_double(a.contrast) << '\n';
  os << prefix << "corner_crop = " << (a.corner_crop ? "true" : "false") << '\n';
  os << prefix << "reverse_prob = " << format_double(a.reverse_prob) << '\n';
  os << prefix << "strides = ";
  for (std::size_t i = 0; i < a.strides.size(); ++i) os << (i ? "," : "") << a.strides[i];
  os << '\n';
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& v) {
  if (key == "seed") {
    const Index s = parse_index(key, v);
    if (s < 0) throw ShapeError("seed must be non-negative");
    seed = static_cast<std::uint64_t>(s);
  } else if (key == "threads") {
    threads = static_cast<int>(parse_index(key, v));
  } else if (key.rfind("model.", 0) == 0) {
    if (!model.set_field(key, v)) throw ShapeError("unknown config key '" + key + "'");
  } else if (key == "train.batch_size") {
    batch_size = parse_index(key, v);
  } else if (key == "train.eval_every") {
    eval_every = static_cast<int>(parse_index(key, v));
  } else if (key == "train.stages") {
    num_stages = static_cast<int>(parse_index(key, v));
    if (num_stages < 1) throw ShapeError("train.stages must be positive");
  } else if (key == "train.epochs") {
    epochs = static_cast<int>(parse_index(key, v));
  } else if (key.rfind("optim.", 0) == 0) {
    if (!set_optim(optim, key, key.substr(6), v)) throw ShapeError("unknown config key '" + key + "'");
  } else if (key.rfind("augment.", 0) == 0) {
    if (!set_augment(augment, key, key.substr(8), v)) throw ShapeError("unknown config key '" + key + "'");
  } else if (key.rfind("stage.", 0) == 0) {
    const auto dot = key.find('.', 6);
    if (dot == std::string::npos) throw ShapeError("unknown config key '" + key + "'");
    const Index idx = parse_index(key, key.substr(6, dot - 6));
    if (idx < 0 || idx > 63) throw ShapeError(key + ": stage index out of range");
    const std::string name = key.substr(dot + 1);
    StagePlan probe;
    if (!set_stage(probe, key, name, v)) throw ShapeError("unknown config key '" + key + "'");
    stage_overrides[static_cast<int>(idx)].emplace_back(name, v);
  } else if (key.rfind("synthetic.", 0) == 0) {
    const std::string name = key.substr(10);
    SyntheticSpec& s = synthetic;
    if (name == "num_classes") s.num_classes = parse_index(key, v);
    else if (name == "frame_size") s.frame_size = parse_index(key, v);
    else if (name == "clip_frames") s.clip_frames = parse_index(key, v);
    else if (name == "object_min") s.object_min = parse_index(key, v);
    else if (name == "object_max") s.object_max = parse_index(key, v);
    else if (name == "speed_min") s.speed_min = parse_index(key, v);
    else if (name == "speed_max") s.speed_max = parse_index(key, v);
    else if (name == "noise_std") s.noise_std = parse_double(key, v);
    else if (name == "samples_per_class") s.samples_per_class = parse_index(key, v);
    else if (name == "motion_set") s.motion_set = parse_motion_set(v);
    else throw ShapeError("unknown config key '" + key + "'");
  } else if (key == "eval.variant") {
    parse_tta_kind(v);
    eval_variant = v;
  } else if (key == "eval.stride") {
    eval_stride = static_cast<int>(parse_index(key, v));
  } else if (key == "eval.clips") {
    eval_clips = parse_index(key, v);
  } else if (key == "eval.policy") {
    eval_policy = parse_sample_policy(v);
  } else {
    throw ShapeError("unknown config key '" + key + "'");
  }
}

RunConfig RunConfig::parse(const std::string& body, const std::string& origin) {
  RunConfig cfg;
  std::istringstream is(body);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = text::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ShapeError(where + "expected 'key = value'");
    try {
      cfg.set(text::trim(line.substr(0, eq)), text::trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw ShapeError(where + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ShapeError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path);
}

std::vector<StagePlan> RunConfig::stages() const {
  for (const auto& [idx, kv] : stage_overrides) {
    if (idx >= num_stages) {
      throw ShapeError("stage." + std::to_string(idx) + " given but train.stages = " + std::to_string(num_stages));
    }
  }
  std::vector<StagePlan> out;
  for (int i = 0; i < num_stages; ++i) {
    StagePlan s;
    s.clip_len = model.clip_len;
    s.shift_enabled = true;
    s.epochs = epochs;
    s.optim = optim;
    s.augment = augment;
    s.augment.seed = seed;
    if (auto it = stage_overrides.find(i); it != stage_overrides.end()) {
      for (const auto& [name, v] : it->second) set_stage(s, "stage." + std::to_string(i) + "." + name, name, v);
    }
    out.push_back(std::move(s));
  }
  return out;
}

TrainPlan RunConfig::plan(const std::string& checkpoint_dir) const {
  TrainPlan p;
  p.stages = stages();
  p.eval_every = eval_every;
  p.batch_size = batch_size;
  p.checkpoint_dir = checkpoint_dir;
  p.seed = seed;
  return p;
}

SyntheticSpec RunConfig::synthetic_spec() const {
  SyntheticSpec s = synthetic;
  s.seed = derive_seed(seed, "data");
  return s;
}

void RunConfig::validate() const {
  if (threads < 1) throw ShapeError("threads must be positive");
  model.validate();
  plan("").validate(model);
  synthetic.validate();
  if (eval_stride != 1 && eval_stride != 2) throw ShapeError("eval.stride must be 1 or 2");
  if (eval_clips < 1) throw ShapeError("eval.clips must be positive");
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "seed = " << seed << '\n';
  os << "threads = " << threads << '\n';
  os << model.to_text();
  os << "train.batch_size = " << batch_size << '\n';
  os << "train.eval_every = " << eval_every << '\n';
  os << "train.epochs = " << epochs << '\n';
  os << "train.stages = " << num_stages << '\n';
  write_optim(os, "optim.", optim);
  write_augment(os, "augment.", augment);
  const auto resolved = stages();
  for (std::size_t i = 0; i < resolved.size(); ++i) {
    const StagePlan& s = resolved[i];
    const std::string p = "stage." + std::to_string(i) + ".";
    os << p << "clip_len = " << s.clip_len << '\n';
    os << p << "shift = " << (s.shift_enabled ? "true" : "false") << '\n';
    os << p << "epochs = " << s.epochs << '\n';
    os << p << "promotion_threshold = "
       << (s.promotion_threshold ? format_double(*s.promotion_threshold) : std::string("none")) << '\n';
    write_optim(os, p + "optim.", s.optim);
    write_augment(os, p + "augment.", s.augment);
  }
  const SyntheticSpec& y = synthetic;
  os << "synthetic.num_classes = " << y.num_classes << '\n';
  os << "synthetic.frame_size = " << y.frame_size << '\n';
  os << "synthetic.clip_frames = " << y.clip_frames << '\n';
  os << "synthetic.object_min = " << y.object_min << '\n';
  os << "synthetic.object_max = " << y.object_max << '\n';
  os << "synthetic.speed_min = " << y.speed_min << '\n';
  os << "synthetic.speed_max = " << y.speed_max << '\n';
  os << "synthetic.noise_std = " << format_double(y.noise_std) << '\n';
  os << "synthetic.samples_per_class = " << y.samples_per_class << '\n';
  os << "synthetic.motion_set = " << to_string(y.motion_set) << '\n';
  os << "eval.variant = " << eval_variant << '\n';
  os << "eval.stride = " << eval_stride << '\n';
  os << "eval.clips = " << eval_clips << '\n';
  os << "eval.policy = " << to_string(eval_policy) << '\n';
  return os.str();
}

}  // namespace tg
