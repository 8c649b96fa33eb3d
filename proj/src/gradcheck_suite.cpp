#include "tg/gradcheck_suite.hpp"

#include <fnmatch.h>

#include <cstdio>
#include <memory>

#include "tg/gradcheck.hpp"
#include "tg/models.hpp"
#include "tg/ops.hpp"
#include "tg/rng.hpp"
#include "tg/video_ops.hpp"

namespace tg {

namespace {

GradcheckCase op_case(std::string name, std::vector<Shape> shapes, GradcheckFn fn, GradcheckOptions opts = {}) {
  return {std::move(name), [shapes = std::move(shapes), fn = std::move(fn), opts](std::uint64_t seed) {
            return gradcheck(fn, shapes, seed, opts);
          }};
}

Tensor random_tensor(Shape shape, std::uint64_t seed, double range = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(-range, range);
  return t;
}

double model_case(ModelConfig config, Shape input_shape, Index clip_len, std::uint64_t seed) {
  auto model = build_model(config, seed);
  model->set_stage(clip_len, true);
  model->set_training(true);
  Tensor input = random_tensor(input_shape, derive_seed(seed, "gradcheck-model-input"));
  std::vector<Tensor> wrt{input};
  for (const Parameter& p : model->parameters()) wrt.push_back(p.tensor);
  GradcheckOptions opts;
  opts.max_elements_per_tensor = 6;
  return gradcheck_tensors([&] { return model->forward(input); }, wrt, seed, opts);
}

ModelConfig micro(ModelKind kind) {
  ModelConfig c;
  c.kind = kind;
  c.num_classes = 3;
  c.stem_channels = 4;
  c.stage_blocks = {1, 1};
  c.clip_len = kind == ModelKind::slowfast ? 8 : 4;
  c.alpha = 4;
  c.beta = Rational{1, 4};
  return c;
}

std::vector<GradcheckCase> build_cases() {
  std::vector<GradcheckCase> cases;
  GradcheckOptions kinked;
  kinked.kink_margin = 1e-3;

  cases.push_back(op_case("conv3d", {{2, 3, 4, 5, 5}, {4, 3, 3, 3, 3}, {4}}, [](const std::vector<Tensor>& in) {
    return conv3d(in[0], in[1], in[2], {1, 2, 1}, {1, 1, 0});
  }));
  cases.push_back(op_case("conv3d.pointwise", {{2, 3, 3, 4, 4}, {5, 3, 1, 1, 1}},
                          [](const std::vector<Tensor>& in) { return conv3d(in[0], in[1]); }));
  cases.push_back(op_case("conv2d", {{2, 3, 6, 6}, {4, 3, 3, 3}, {4}}, [](const std::vector<Tensor>& in) {
    return conv2d(in[0], in[1], in[2], {2, 2}, {1, 1});
  }));
  cases.push_back(op_case("maxpool3d", {{2, 2, 4, 6, 6}}, [](const std::vector<Tensor>& in) {
    return maxpool3d(in[0], {1, 2, 2}, {1, 2, 2});
  }));
  cases.push_back(op_case("maxpool3d.overlap", {{1, 2, 4, 7, 7}}, [](const std::vector<Tensor>& in) {
    return maxpool3d(in[0], {2, 3, 3}, {1, 2, 2});
  }));
  cases.push_back(op_case("elu", {{3, 4, 5}}, [](const std::vector<Tensor>& in) { return elu(in[0]); }, kinked));
  cases.push_back(op_case("relu", {{3, 4, 5}}, [](const std::vector<Tensor>& in) { return relu(in[0]); }, kinked));
  cases.push_back(op_case("add", {{3, 4}, {3, 4}}, [](const std::vector<Tensor>& in) { return add(in[0], in[1]); }));
  cases.push_back(op_case("scale", {{3, 4}}, [](const std::vector<Tensor>& in) { return scale(in[0], -1.7); }));
  cases.push_back(op_case("batchnorm.train", {{4, 3, 2, 3, 3}, {3}, {3}}, [](const std::vector<Tensor>& in) {
    auto buffers = BatchNormBuffers::create(3);
    return batchnorm(in[0], in[1], in[2], buffers, true);
  }));
  cases.push_back(op_case("batchnorm.eval", {{4, 3, 5}, {3}, {3}}, [](const std::vector<Tensor>& in) {
    auto buffers = BatchNormBuffers::create(3);
    {
      NoGradGuard guard;
      batchnorm(random_tensor({6, 3, 5}, 7), in[1], in[2], buffers, true);
    }
    return batchnorm(in[0], in[1], in[2], buffers, false);
  }));
  cases.push_back(op_case("linear", {{3, 5}, {4, 5}, {4}}, [](const std::vector<Tensor>& in) {
    return linear(in[0], in[1], in[2]);
  }));
  cases.push_back(op_case("softmax_cross_entropy", {{4, 5}}, [](const std::vector<Tensor>& in) {
    const std::vector<int> labels{0, 3, 4, 1};
    return softmax_cross_entropy(in[0], labels).loss;
  }));
  cases.push_back(op_case("concat_channels", {{2, 2, 3}, {2, 3, 3}}, [](const std::vector<Tensor>& in) {
    return concat_channels({in[0], in[1]});
  }));
  cases.push_back(op_case("global_avg_pool", {{2, 3, 2, 3, 3}},
                          [](const std::vector<Tensor>& in) { return global_avg_pool(in[0]); }));
  cases.push_back(
      op_case("mean_axis1", {{2, 4, 3}}, [](const std::vector<Tensor>& in) { return mean_axis1(in[0]); }));
  cases.push_back(op_case("select_frames", {{2, 2, 8, 2, 2}}, [](const std::vector<Tensor>& in) {
    return select_frames(in[0], 1, 3, 3);
  }));
  cases.push_back(op_case("clip_to_frames", {{2, 3, 4, 2, 2}},
                          [](const std::vector<Tensor>& in) { return clip_to_frames(in[0]); }));
  cases.push_back(op_case("frames_to_clip", {{8, 3, 2, 2}},
                          [](const std::vector<Tensor>& in) { return frames_to_clip(in[0], 4); }));
  cases.push_back(op_case("reshape", {{2, 3, 4}}, [](const std::vector<Tensor>& in) {
    return scale(in[0].reshape({6, 4}), 2.0);
  }));
  cases.push_back(op_case("tsm_shift", {{2, 8, 4, 2, 2}}, [](const std::vector<Tensor>& in) {
    return tsm_shift(in[0], ShiftSpec{});
  }));
  cases.push_back(op_case("tsm_shift_frames", {{8, 8, 2, 2}}, [](const std::vector<Tensor>& in) {
    return tsm_shift_frames(in[0], 4, ShiftSpec{{1, 4}, {1, 8}, true});
  }));
  cases.push_back(op_case("residual_frames", {{2, 3, 5, 2, 2}},
                          [](const std::vector<Tensor>& in) { return residual_frames(in[0]); }));
  cases.push_back(op_case("lateral_fuse", {{2, 2, 8, 3, 3}, {2, 4, 2, 3, 3}, {4, 2, 5, 1, 1}, {4}},
                          [](const std::vector<Tensor>& in) { return lateral_fuse(in[0], in[1], 4, in[2], in[3]); }));
  cases.push_back(op_case("conv2plus1d", {{2, 3, 4, 5, 5}, {4, 3, 1, 3, 3}, {5, 4, 3, 1, 1}, {4}, {4}},
                          [](const std::vector<Tensor>& in) {
                            auto buffers = BatchNormBuffers::create(4);
                            Conv2Plus1DSpec spec{3, 5, 3, 4};
                            Conv2Plus1DWeights w{in[1], in[2], in[3], in[4], &buffers, Activation::elu};
                            return conv2plus1d(in[0], spec, w, true, 2);
                          }));
  cases.push_back(op_case("conv2plus1d.plain", {{1, 2, 5, 4, 4}, {3, 2, 1, 3, 3}, {2, 3, 3, 1, 1}},
                          [](const std::vector<Tensor>& in) {
                            Conv2Plus1DSpec spec{2, 2, 3, 3};
                            Conv2Plus1DWeights w{in[1], in[2], {}, {}, nullptr, Activation::relu};
                            return conv2plus1d(in[0], spec, w, true, 1);
                          },
                          kinked));

  cases.push_back({"model.slowfast", [](std::uint64_t seed) {
                     return model_case(micro(ModelKind::slowfast), {2, 3, 8, 8, 8}, 8, seed);
                   }});
  cases.push_back({"model.slowfast.full3d_strided", [](std::uint64_t seed) {
                     ModelConfig c = micro(ModelKind::slowfast);
                     c.conv_style = ConvStyle::full3d;
                     c.downsample = Downsample::strided_conv;
                     return model_case(c, {2, 3, 8, 8, 8}, 8, seed);
                   }});
  cases.push_back({"model.tsm", [](std::uint64_t seed) {
                     return model_case(micro(ModelKind::tsm), {2, 3, 4, 8, 8}, 4, seed);
                   }});
  cases.push_back({"model.tsm.trunk_shift", [](std::uint64_t seed) {
                     ModelConfig c = micro(ModelKind::tsm);
                     c.shift.residual_embedding = false;
                     return model_case(c, {2, 3, 4, 8, 8}, 4, seed);
                   }});
  return cases;
}

}  // namespace

const std::vector<GradcheckCase>& gradcheck_cases() {
  static const std::vector<GradcheckCase> cases = build_cases();
  return cases;
}

bool glob_match(const std::string& pattern, const std::string& name) {
  return fnmatch(pattern.c_str(), name.c_str(), 0) == 0;
}

std::vector<GradcheckOutcome> run_gradcheck_suite(const std::string& glob, std::uint64_t seed, std::ostream* table) {
  std::vector<GradcheckOutcome> out;
  for (const GradcheckCase& c : gradcheck_cases()) {
    if (!glob_match(glob, c.name)) continue;
    GradcheckOutcome o;
    o.name = c.name;
    o.threshold = c.threshold;
    try {
      o.max_error = c.run(derive_seed(seed, "gradcheck", {fnv1a64(c.name)}));
      o.passed = o.max_error < c.threshold;
    } catch (const std::exception& e) {
      o.error = e.what();
      o.passed = false;
    }
    if (table) {
      char line[160];
      if (o.error.empty()) {
        std::snprintf(line, sizeof line, "%-32s %12.3e  < %.0e  %s", o.name.c_str(), o.max_error, o.threshold,
                      o.passed ? "PASS" : "FAIL");
      } else {
        std::snprintf(line, sizeof line, "%-32s %12s  < %.0e  FAIL (%s)", o.name.c_str(), "error", o.threshold,
                      o.error.c_str());
      }
      *table << line << '\n';
    }
    out.push_back(std::move(o));
  }
  if (table) {
    std::size_t passed = 0;
    for (const auto& o : out) passed += o.passed;
    *table << out.size() << " ops, " << passed << " passed, " << out.size() - passed << " failed\n";
  }
  return out;
}

}  // namespace tg
