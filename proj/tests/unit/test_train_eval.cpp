#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "tg/evaluate.hpp"
#include "tg/logits.hpp"
#include "tg/ops.hpp"
#include "tg/optim.hpp"
#include "tg/train.hpp"

using namespace tg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "tg_unit" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

const Dataset& tiny_data() {
  static const Dataset ds = [] {
    SyntheticSpec s;
    s.frame_size = 16;
    s.clip_frames = 6;
    s.samples_per_class = 10;
    return generate_synthetic(s);
  }();
  return ds;
}

ModelConfig tiny_model(ModelKind kind = ModelKind::tsm) {
  ModelConfig c;
  c.kind = kind;
  c.num_classes = 4;
  c.stem_channels = 4;
  c.stage_blocks = {1, 1};
  c.clip_len = 4;
  c.alpha = 2;
  c.beta = Rational{1, 2};
  return c;
}

AugmentConfig neutral(Index size) {
  AugmentConfig a;
  a.base_size = a.crop_size = size;
  a.scale_min = a.scale_max = 1.0;
  a.flip_prob = 0.0;
  a.lighting = a.contrast = 0.0;
  a.corner_crop = false;
  a.reverse_prob = 0.0;
  a.strides = {1};
  return a;
}

TrainPlan tiny_plan(int epochs) {
  StagePlan s;
  s.clip_len = 4;
  s.epochs = epochs;
  s.optim.learning_rate = 0.01;
  s.augment = neutral(16);
  s.augment.flip_prob = 0.5;
  TrainPlan p;
  p.stages = {s};
  p.batch_size = 8;
  p.seed = 5;
  return p;
}

LogitRecord rec(const std::string& video, const std::string& model, const std::string& variant,
                std::vector<double> logits, int stride = 1) {
  LogitRecord r;
  r.video_id = video;
  r.model_id = model;
  r.variant = variant;
  r.stride = stride;
  r.input_mode = "rgb";
  r.logits = std::move(logits);
  return r;
}

// Clip [C, T, H, W] with frames taken in the given order.
Tensor pick_frames(const Tensor& clip, const std::vector<Index>& order) {
  const Index c = clip.dim(0), t = clip.dim(1), hw = clip.dim(2) * clip.dim(3);
  const Index n = static_cast<Index>(order.size());
  Tensor out({c, n, clip.dim(2), clip.dim(3)});
  for (Index ch = 0; ch < c; ++ch)
    for (Index f = 0; f < n; ++f)
      for (Index i = 0; i < hw; ++i) out.mutable_data()[(ch * n + f) * hw + i] = clip.data()[(ch * t + order[f]) * hw + i];
  return out;
}

std::vector<double> softmax_oracle(const std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  std::vector<double> p;
  for (double v : z) p.push_back(std::exp(v - m) / s);
  return p;
}

}  // namespace

// Optimiser --------------------------------------------------------------------

TEST_CASE("learning rate steps down by ten every twenty epochs") {
  const OptimConfig c;
  CHECK(effective_lr(c, 0) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(effective_lr(c, 19) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(effective_lr(c, 20) == doctest::Approx(0.0001).epsilon(1e-15));
  CHECK(effective_lr(c, 39) == doctest::Approx(0.0001).epsilon(1e-15));
  CHECK(effective_lr(c, 40) == doctest::Approx(0.00001).epsilon(1e-15));
}

TEST_CASE("sgd step follows the momentum and weight decay update") {
  OptimConfig c;
  c.learning_rate = 0.1;
  c.momentum = 0.9;
  c.weight_decay = 0.01;
  Tensor w({3}, {1.0, -2.0, 0.5}, true);
  std::vector<Parameter> params{{"w", w, {}}};
  const std::vector<double> g{0.3, -0.1, 2.0};

  std::vector<double> ref_w{1.0, -2.0, 0.5}, ref_v(3, 0.0);
  for (int step = 0; step < 3; ++step) {
    weighted_sum(w, g).backward();
    sgd_step(params, c, 0);
    for (int i = 0; i < 3; ++i) {
      const double gi = g[i] + c.weight_decay * ref_w[i];
      ref_v[i] = c.momentum * ref_v[i] + gi;
      ref_w[i] -= c.learning_rate * ref_v[i];
    }
    CHECK(oracle::max_abs_diff(w.data(), ref_w) < 1e-15);
    CHECK(oracle::max_abs_diff(params[0].momentum, ref_v) < 1e-15);
    CHECK_FALSE(w.has_grad());
  }
  CHECK_THROWS_AS(sgd_step(params, c, 0), ShapeError);
  OptimConfig bad;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
}

// Training ---------------------------------------------------------------------

TEST_CASE("a single batch can be overfit") {
  for (ModelKind kind : {ModelKind::tsm, ModelKind::slowfast}) {
    const Dataset& ds = tiny_data();
    ModelConfig mc = tiny_model(kind);
    auto model = build_model(mc, 3);
    std::vector<Tensor> clips;
    std::vector<int> labels;
    for (std::size_t i = 0; i < 4; ++i) {
      clips.push_back(to_model_input(gather_window(ds.clips[i].frames, 0, 4, 1), InputMode::rgb, ds));
      labels.push_back(ds.clips[i].label);
    }
    const Tensor batch = stack_clips(clips);
    OptimConfig oc;
    oc.learning_rate = 0.05;
    oc.weight_decay = 0.0;
    double loss = 1e9;
    int steps = 0;
    while (steps < 200 && loss >= 0.01) {
      loss = train_step(*model, batch, labels, oc, 0);
      ++steps;
    }
    INFO(to_string(kind) << " steps " << steps);
    CHECK(loss < 0.01);
  }
}

TEST_CASE("non-finite loss is reported") {
  auto model = build_model(tiny_model(), 1);
  Tensor x = oracle::random({2, 3, 4, 16, 16}, 2);
  x.mutable_data()[7] = std::nan("");
  CHECK_THROWS_AS(train_step(*model, x, {0, 1}, OptimConfig{}, 0), NumericalError);
}

TEST_CASE("training is deterministic and resumes bit-identically") {
  const Dataset& ds = tiny_data();
  const ModelConfig mc = tiny_model();
  TrainPlan full = tiny_plan(3);
  full.checkpoint_dir = temp_dir("full").string();
  const TrainResult a = train(full, mc, ds);
  REQUIRE(a.finished);
  REQUIRE(a.metrics_lines.size() == 3);
  CHECK(a.metrics_lines[0].rfind("epoch 0 lr 0.01 loss ", 0) == 0);
  CHECK(fs::exists(fs::path(full.checkpoint_dir) / "metrics.log"));
  CHECK(fs::exists(fs::path(full.checkpoint_dir) / "stage_0.ckpt"));

  TrainPlan again = full;
  again.checkpoint_dir = temp_dir("again").string();
  const TrainResult b = train(again, mc, ds);
  CHECK(b.metrics_lines == a.metrics_lines);
  CHECK(slurp(fs::path(again.checkpoint_dir) / "final.ckpt") == slurp(fs::path(full.checkpoint_dir) / "final.ckpt"));

  TrainPlan part = full;
  part.checkpoint_dir = temp_dir("part").string();
  TrainOptions stop;
  stop.max_epochs_this_call = 1;
  const TrainResult first = train(part, mc, ds, stop);
  CHECK_FALSE(first.finished);
  CHECK(first.metrics_lines.size() == 1);
  TrainOptions resume;
  resume.resume_from = (fs::path(part.checkpoint_dir) / "epoch_0000.ckpt").string();
  const TrainResult rest = train(part, mc, ds, resume);
  CHECK(rest.finished);
  CHECK(rest.metrics_lines == a.metrics_lines);
  CHECK(slurp(fs::path(part.checkpoint_dir) / "final.ckpt") == slurp(fs::path(full.checkpoint_dir) / "final.ckpt"));

  TrainOptions done;
  done.resume_from = (fs::path(full.checkpoint_dir) / "final.ckpt").string();
  const TrainResult noop = train(full, mc, ds, done);
  CHECK(noop.already_finished);
  CHECK(noop.metrics_lines == a.metrics_lines);
}

TEST_CASE("a stage ends early once validation reaches its threshold") {
  const Dataset& ds = tiny_data();
  TrainPlan p = tiny_plan(5);
  StagePlan first = p.stages[0];
  first.clip_len = 1;
  first.shift_enabled = false;
  first.promotion_threshold = 0.0;
  StagePlan second = p.stages[0];
  second.epochs = 2;
  p.stages = {first, second};
  const TrainResult r = train(p, tiny_model(), ds);
  CHECK(r.metrics_lines.size() == 3);
  REQUIRE(r.stage_final_accuracy.size() == 2);
  CHECK(r.metrics_lines[1].rfind("epoch 1 ", 0) == 0);

  auto model = load_trained_model(r.final_checkpoint);
  CHECK(model->active_clip_len() == 4);

  p.stages[0].promotion_threshold = 1.5;
  CHECK_THROWS_AS(p.validate(tiny_model()), ShapeError);
}

TEST_CASE("train rejects mismatched data and bad plans") {
  const Dataset& ds = tiny_data();
  ModelConfig mc = tiny_model();
  mc.num_classes = 5;
  CHECK_THROWS_AS(train(tiny_plan(1), mc, ds), ShapeError);
  TrainPlan p = tiny_plan(1);
  p.stages.clear();
  CHECK_THROWS_AS(train(p, tiny_model(), ds), ShapeError);
  p = tiny_plan(1);
  p.stages[0].clip_len = 3;
  CHECK_THROWS_AS(p.validate(tiny_model(ModelKind::slowfast)), ShapeError);
}

// Ensembles and logit files ----------------------------------------------------

TEST_CASE("pre-softmax averaging differs from post-softmax averaging") {
  // Found by brute-force search over small integer logit pairs.
  const std::vector<double> a{-3, -3, 0}, b{0, 1, -3};
  std::vector<double> pre(3), post(3);
  const auto pa = softmax_oracle(a), pb = softmax_oracle(b);
  for (int k = 0; k < 3; ++k) {
    pre[k] = (a[k] + b[k]) / 2;
    post[k] = (pa[k] + pb[k]) / 2;
  }
  REQUIRE(argmax(pre) == 1);
  REQUIRE(argmax(post) == 2);

  const std::vector<LogitRecord> records{rec("v", "m1", "center-crop", a), rec("v", "m2", "center-crop", b)};
  const EnsembleResult r = ensemble(EnsembleSpec::parse("m1:center-crop+m2:center-crop"), records, {{"v", 1}});
  CHECK(r.predictions == std::vector<int>{1});
  CHECK(r.accuracy == 1.0);
  CHECK(r.fused[0].logits == pre);
}

TEST_CASE("ensemble averages and is invariant to order and scale") {
  const std::vector<LogitRecord> records{
      rec("v1", "a", "center-crop", {1, 2}),       rec("v1", "b", "center-crop", {3, 4}),
      rec("v1", "a", "horizontal-flip", {0, 9}),   rec("v2", "a", "center-crop", {5, -1}),
      rec("v2", "b", "center-crop", {-5, 1}),      rec("v2", "a", "horizontal-flip", {2, 2}),
  };
  const std::vector<std::pair<std::string, int>> labels{{"v1", 1}, {"v2", 0}};

  const EnsembleResult ab = ensemble(EnsembleSpec::parse("a:center-crop+b:center-crop"), records, labels);
  REQUIRE(ab.fused.size() == 2);
  CHECK(ab.fused[0].logits == std::vector<double>{2, 3});
  CHECK(ab.fused[1].logits == std::vector<double>{0, 0});

  const EnsembleResult ba = ensemble(EnsembleSpec::parse("b:center-crop,a:center-crop"), records, labels);
  const EnsembleResult scaled = ensemble(EnsembleSpec::parse("a:center-crop*3+b:center-crop*3"), records, labels);
  for (std::size_t v = 0; v < 2; ++v) {
    CHECK(ba.fused[v].logits == ab.fused[v].logits);
    CHECK(scaled.fused[v].logits == ab.fused[v].logits);
  }

  const EnsembleResult one = ensemble(EnsembleSpec::parse("a:horizontal-flip"), records, labels);
  CHECK(one.fused[0].logits == std::vector<double>{0, 9});
  CHECK(one.fused[1].logits == std::vector<double>{2, 2});

  const EnsembleResult weighted = ensemble(EnsembleSpec::parse("a:center-crop*3+b:center-crop"), records, labels);
  CHECK(weighted.fused[0].logits == std::vector<double>{1.5, 2.5});

  CHECK_THROWS_AS(ensemble(EnsembleSpec::parse("a:center-crop+c:center-crop"), records, labels), ShapeError);
  CHECK_THROWS_AS(ensemble(EnsembleSpec::parse("a:center-crop:2"), records, labels), ShapeError);
  std::vector<LogitRecord> ragged = records;
  ragged[1].logits.push_back(0);
  CHECK_THROWS_AS(ensemble(EnsembleSpec::parse("a:center-crop+b:center-crop"), ragged, labels), ShapeError);
}

TEST_CASE("ensemble spec parsing") {
  const EnsembleSpec s = EnsembleSpec::parse("sf:center-crop:2*3+tsm:horizontal-flip");
  REQUIRE(s.members.size() == 2);
  CHECK(s.members[0] == EnsembleMember{"sf", "center-crop", 2, 3});
  CHECK(s.members[1] == EnsembleMember{"tsm", "horizontal-flip", 1, 1});
  CHECK(EnsembleSpec::parse(s.str()).members == s.members);
  CHECK_THROWS_AS(EnsembleSpec::parse(""), ShapeError);
  CHECK_THROWS_AS(EnsembleSpec::parse("sf"), ShapeError);
  CHECK_THROWS_AS(EnsembleSpec::parse("sf:center-crop:3"), ShapeError);
  CHECK_THROWS_AS(EnsembleSpec::parse("sf:center-crop*0"), ShapeError);
}

TEST_CASE("argmax is unchanged by softmax") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> z(5);
    for (double& v : z) v = rng.uniform(-20, 20);
    CHECK(argmax(softmax(z)) == argmax(z));
    double s = 0;
    for (double p : softmax(z)) s += p;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(argmax({1, 3, 3}) == 1);
  CHECK(accuracy({0, 1, 2, 3}, {0, 1, 0, 0}) == 0.5);
  CHECK_THROWS_AS(accuracy({0}, {0, 1}), ShapeError);
}

TEST_CASE("logit files round-trip and merge on append") {
  const fs::path dir = temp_dir("logits");
  const std::string path = (dir / "l.tsv").string();
  std::vector<LogitRecord> rs{rec("v2", "m", "center-crop", {0.1, -1e-300, 3}),
                              rec("v1", "m", "reverse-order", {1.0 / 3, 2, 1e300}, 2),
                              rec("v1", "m", "center-crop", {4, 5, 6})};
  rs[1].weight = 0.25;
  write_logits(rs, path);
  std::vector<LogitRecord> back = read_logits(path);
  std::sort(rs.begin(), rs.end(), record_less);
  CHECK(back == rs);

  std::istringstream lines(slurp(path));
  std::string header, line;
  std::getline(lines, header);
  CHECK(header.rfind("#TGLOGITS 1 3", 0) == 0);
  int n = 0;
  while (std::getline(lines, line)) {
    ++n;
    CHECK(std::count(line.begin(), line.end(), '\t') == 6 + 3 - 1);
  }
  CHECK(n == 3);

  write_logits({rec("v1", "m", "center-crop", {7, 8, 9}), rec("v3", "m", "center-crop", {0, 0, 0})}, path, true);
  back = read_logits(path);
  REQUIRE(back.size() == 4);
  CHECK(back[0].logits == std::vector<double>{7, 8, 9});
  CHECK(back.back().video_id == "v3");
  CHECK(std::is_sorted(back.begin(), back.end(), record_less));

  CHECK_THROWS_AS(write_logits({rec("v9", "m", "center-crop", {1, 2})}, path, true), ShapeError);
  CHECK_THROWS_AS(write_logits({rec("a", "m", "center-crop", {1, 2}), rec("b", "m", "center-crop", {1})},
                               (dir / "mixed.tsv").string()),
                  ShapeError);

  const std::string empty = (dir / "empty.tsv").string();
  write_logits({}, empty);
  CHECK(slurp(empty).empty());
  CHECK(read_logits(empty).empty());

  std::ofstream(dir / "bad.tsv") << "#TGLOGITS 1 2\nv\tm\tcenter-crop\t1\trgb\t1\t0.5\n";
  CHECK_THROWS_AS(read_logits((dir / "bad.tsv").string()), ShapeError);
}

// Evaluation -------------------------------------------------------------------

TEST_CASE("single centred clip evaluation equals a plain forward") {
  const Dataset& ds = tiny_data();
  auto model = build_model(tiny_model(), 4);
  {
    NoGradGuard g;
    model->set_training(true);
    model->forward(oracle::random({2, 3, 4, 16, 16}, 5));
  }
  model->set_training(false);
  EvalOptions opts;
  opts.num_clips = 1;
  opts.policy = SamplePolicy::center;
  opts.eval_config = neutral(16);
  const EvalResult r = evaluate(*model, ds, {0, 1, 2}, TTAVariant{}, opts);
  REQUIRE(r.records.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const VideoClip& v = ds.clips[i];
    const Tensor x = to_model_input(gather_window(v.frames, 1, 4, 1), InputMode::rgb, ds);
    const Tensor logits = model->forward(stack_clips({x}));
    CHECK(r.records[i].logits == vec(logits.data()));
    CHECK(r.records[i].video_id == v.id);
    CHECK(r.predictions[i] == argmax(r.records[i].logits));
  }
}

TEST_CASE("evaluation is deterministic and independent of video order") {
  const Dataset& ds = tiny_data();
  auto model = build_model(tiny_model(), 4);
  {
    NoGradGuard g;
    model->set_training(true);
    model->forward(oracle::random({2, 3, 4, 16, 16}, 5));
  }
  EvalOptions opts;
  opts.num_clips = 3;
  opts.eval_config = neutral(16);
  opts.eval_config.crop_size = 12;
  TTAVariant crop;
  crop.kind = TTAKind::random_crop;
  const EvalResult a = evaluate(*model, ds, {0, 1, 2, 3}, crop, opts);
  const EvalResult b = evaluate(*model, ds, {3, 2, 1, 0}, crop, opts);
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.records[i] == b.records[3 - i]);
  CHECK(evaluate(*model, ds, {0, 1, 2, 3}, crop, opts).records == a.records);
  opts.seed = 43;
  CHECK(evaluate(*model, ds, {0, 1, 2, 3}, crop, opts).records != a.records);

  TTAVariant diff;
  diff.input_mode = InputMode::diff;
  CHECK_THROWS_AS(evaluate(*model, ds, {0}, diff, opts), ShapeError);
  CHECK_THROWS_AS(evaluate(*model, ds, {}, crop, opts), ShapeError);
}

TEST_CASE("test-time variants transform the window") {
  const Dataset& ds = tiny_data();
  const Tensor w = gather_window(ds.clips[0].frames, 0, 4, 1);
  const AugmentConfig cfg = neutral(16);
  Rng rng(1);
  auto input = [&](TTAKind k, const Tensor& win) {
    TTAVariant v;
    v.kind = k;
    return vec(variant_input(win, v, 4, cfg, ds, rng).data());
  };
  CHECK(input(TTAKind::center_crop, w) == vec(to_model_input(w, InputMode::rgb, ds).data()));
  CHECK(input(TTAKind::horizontal_flip, w) == vec(to_model_input(horizontal_flip(w), InputMode::rgb, ds).data()));
  CHECK(input(TTAKind::reverse_order, w) == vec(to_model_input(reverse_clip(w), InputMode::rgb, ds).data()));

  TTAVariant concat;
  concat.kind = TTAKind::normal_reverse_concat;
  CHECK(variant_window_frames(concat, 4) == 2);
  CHECK(variant_window_frames(concat, 5) == 3);
  const Tensor half = gather_window(ds.clips[0].frames, 0, 2, 1);
  const Tensor abba = pick_frames(half, {0, 1, 1, 0});
  CHECK(input(TTAKind::normal_reverse_concat, half) == vec(to_model_input(abba, InputMode::rgb, ds).data()));

  CHECK(parse_tta_kind("reverse-order") == TTAKind::reverse_order);
  for (const std::string& n : tta_names()) CHECK(to_string(parse_tta_kind(n)) == n);
  try {
    parse_tta_kind("mirror");
    FAIL("expected a throw");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("normal-reverse-concat") != std::string::npos);
  }
}
