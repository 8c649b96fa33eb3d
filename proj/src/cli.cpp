#include "tg/cli.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <filesystem>
#include <fstream>
#include <set>

#include "tg/binio.hpp"
#include "tg/evaluate.hpp"
#include "tg/gradcheck_suite.hpp"
#include "tg/logits.hpp"
#include "tg/run_config.hpp"
#include "tg/text.hpp"
#include "tg/train.hpp"

namespace tg {

namespace fs = std::filesystem;

namespace {

struct GenDataArgs {
  std::string spec, out;
};
struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::uint64_t> seed;
  int threads = 0;
};
struct EvalArgs {
  std::string checkpoint, data, variant, logits_out, model_id, config, policy = "random";
  int stride = 1;
  Index clips = 10;
  std::uint64_t seed = 42;
  int threads = 0;
};
struct EnsembleArgs {
  std::vector<std::string> logits;
  std::string spec, data, out;
};
struct GradcheckArgs {
  std::string filter = "*";
  std::uint64_t seed = 42;
};

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << body;
}

void set_threads(int n) {
  if (n > 0) Eigen::setNbThreads(n);
}

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  const RunConfig cfg = RunConfig::load(a.spec);
  const SyntheticSpec spec = cfg.synthetic_spec();
  spec.validate();
  const Dataset ds = generate_synthetic(spec);
  write_dataset(ds, a.out);
  write_text(a.out + ".config", cfg.to_text());
  out << ds.clips.size() << " clips, " << ds.num_classes << " classes, " << ds.channels << "x" << ds.frames << "x"
      << ds.height << "x" << ds.width << " (CxTxHxW), " << validation_indices(ds).size() << " validation\n";
  return kExitOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = RunConfig::load(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.threads > 0) cfg.threads = a.threads;
  cfg.validate();
  set_threads(cfg.threads);
  const Dataset ds = read_dataset(a.data);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.resolved", cfg.to_text());

  TrainOptions opts;
  opts.resume_from = a.resume;
  opts.progress = &out;
  const TrainResult r = train(cfg.plan(a.out), cfg.model, ds, opts);
  if (r.already_finished) {
    out << "run already finished at epoch " << r.final_checkpoint.epoch << "; nothing to do\n";
    return kExitOk;
  }
  out << "finished " << r.metrics_lines.size() << " epochs";
  for (std::size_t i = 0; i < r.stage_final_accuracy.size(); ++i) {
    out << "; stage " << i << " val_acc " << text::format_double(r.stage_final_accuracy[i]);
  }
  out << "\ncheckpoint " << (fs::path(a.out) / "final.ckpt").string() << '\n';
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  set_threads(a.threads);
  TTAVariant variant;
  variant.kind = parse_tta_kind(a.variant);
  if (a.stride != 1 && a.stride != 2) throw ShapeError("--stride must be 1 or 2");
  variant.stride = a.stride;
  if (a.clips < 1) throw ShapeError("--clips must be positive");

  auto model = load_trained_model(a.checkpoint);
  variant.input_mode = model->config().input_mode;
  const Dataset ds = read_dataset(a.data);

  EvalOptions opts;
  opts.num_clips = a.clips;
  opts.seed = a.seed;
  opts.policy = parse_sample_policy(a.policy);
  opts.eval_config.base_size = ds.height;
  opts.eval_config.crop_size = ds.height;
  if (!a.config.empty()) {
    const RunConfig cfg = RunConfig::load(a.config);
    opts.eval_config.base_size = cfg.augment.base_size;
    opts.eval_config.crop_size = cfg.augment.crop_size;
  }
  opts.model_id = a.model_id;
  if (opts.model_id.empty()) {
    const fs::path p(a.checkpoint);
    opts.model_id = p.has_parent_path() && !p.parent_path().filename().empty()
                        ? p.parent_path().filename().string()
                        : p.stem().string();
  }
  const EvalResult r = evaluate(*model, ds, validation_indices(ds), variant, opts);
  write_logits(r.records, a.logits_out, true);
  std::ostringstream run;
  run << "checkpoint = " << a.checkpoint << "\ndata = " << a.data << "\nvariant = " << a.variant
      << "\nstride = " << a.stride << "\nclips = " << a.clips << "\nseed = " << a.seed << "\npolicy = " << a.policy
      << "\nmodel_id = " << opts.model_id << "\nbase_size = " << opts.eval_config.base_size
      << "\ncrop_size = " << opts.eval_config.crop_size << '\n';
  write_text(a.logits_out + ".run", run.str());
  out << "accuracy " << text::format_double(r.accuracy) << '\n';
  return kExitOk;
}

int cmd_ensemble(const EnsembleArgs& a, std::ostream& out) {
  const EnsembleSpec spec = EnsembleSpec::parse(a.spec);
  std::vector<LogitRecord> records;
  for (const std::string& f : a.logits) {
    auto part = read_logits(f);
    records.insert(records.end(), part.begin(), part.end());
  }
  const Dataset ds = read_dataset(a.data);
  std::map<std::string, int> label_of;
  for (const VideoClip& c : ds.clips) label_of[c.id] = c.label;
  std::set<std::string> videos;
  for (const LogitRecord& r : records) videos.insert(r.video_id);
  std::vector<std::pair<std::string, int>> labels;
  for (const std::string& v : videos) {
    auto it = label_of.find(v);
    if (it == label_of.end()) throw ShapeError("ensemble: video '" + v + "' is not in " + a.data);
    labels.emplace_back(v, it->second);
  }
  const EnsembleResult r = ensemble(spec, records, labels);
  if (!a.out.empty()) {
    write_logits(r.fused, a.out, false);
    write_text(a.out + ".run", "spec = " + spec.str() + "\ndata = " + a.data + '\n');
  }
  out << "accuracy " << text::format_double(r.accuracy) << '\n';
  return kExitOk;
}

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const auto results = run_gradcheck_suite(a.filter, a.seed, &out);
  for (const auto& r : results) {
    if (!r.passed) return kExitNumerical;
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  tune_allocator();
  CLI::App app{"tempograd: video action recognition with temporal shift and SlowFast networks"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic motion dataset");
  c_gen->add_option("--spec", gen.spec, "Config file with synthetic.* keys")->required();
  c_gen->add_option("--out", gen.out, "Output dataset file")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--config", tr.config, "Run config")->required();
  c_train->add_option("--data", tr.data, "Dataset file")->required();
  c_train->add_option("--out", tr.out, "Output directory")->required();
  c_train->add_option("--resume", tr.resume, "Checkpoint to continue from");
  c_train->add_option("--seed", tr.seed, "Overrides the config seed");
  c_train->add_option("--threads", tr.threads, "Thread count");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  c_eval->add_option("--checkpoint", ev.checkpoint)->required();
  c_eval->add_option("--data", ev.data)->required();
  c_eval->add_option("--variant", ev.variant, "center-crop | horizontal-flip | random-crop | reverse-order | "
                                              "normal-reverse-concat")
      ->required();
  c_eval->add_option("--stride", ev.stride)->required();
  c_eval->add_option("--clips", ev.clips)->required();
  c_eval->add_option("--logits-out", ev.logits_out)->required();
  c_eval->add_option("--seed", ev.seed)->capture_default_str();
  c_eval->add_option("--model-id", ev.model_id, "Defaults to the checkpoint's directory name");
  c_eval->add_option("--config", ev.config, "Run config supplying augment.base_size / crop_size");
  c_eval->add_option("--policy", ev.policy, "random | consecutive | center | ten_random")->capture_default_str();
  c_eval->add_option("--threads", ev.threads);

  EnsembleArgs en;
  auto* c_ens = app.add_subcommand("ensemble", "Fuse pre-softmax logits");
  c_ens->add_option("--logits", en.logits)->required()->expected(1, -1);
  c_ens->add_option("--spec", en.spec, "model:variant[:stride][*mult] terms joined by '+'")->required();
  c_ens->add_option("--data", en.data, "Dataset providing labels")->required();
  c_ens->add_option("--out", en.out, "Fused logit file");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  c_gc->add_option("--filter", gc.filter, "Glob over op names")->capture_default_str();
  c_gc->add_option("--seed", gc.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*c_gen) return cmd_gen_data(gen, out);
    if (*c_train) return cmd_train(tr, out);
    if (*c_eval) return cmd_eval(ev, out);
    if (*c_ens) return cmd_ensemble(en, out);
    if (*c_gc) return cmd_gradcheck(gc, out);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace tg
