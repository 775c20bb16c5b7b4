// Command-line front end: data generation, teacher training, distillation,
// evaluation, benchmarking, cost reports and diagnostics.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "sit/analysis.hpp"
#include "sit/checkpoint.hpp"
#include "sit/dataset.hpp"
#include "sit/distillation.hpp"
#include "sit/io.hpp"
#include "sit/run_config.hpp"

namespace fs = std::filesystem;
using namespace sit;
using json = nlohmann::json;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<double> keep_ratio;
  std::optional<std::string> stages;
  std::optional<double> lambda_token, lambda_logits, lambda_hard;
  std::optional<int> threads;
  bool f64 = false;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "RunConfig JSON document")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "seed for training, initialization and sampling");
  cmd->add_option("--epochs", o.epochs, "epochs of the schedule this command runs");
  cmd->add_option("--keep-ratio", o.keep_ratio, "token keeping ratio r");
  cmd->add_option("--stages", o.stages, "blocks per stage, a,b,c,d");
  cmd->add_option("--lambda-token", o.lambda_token);
  cmd->add_option("--lambda-logits", o.lambda_logits);
  cmd->add_option("--lambda-hard", o.lambda_hard);
  cmd->add_option("--threads", o.threads, "worker threads for evaluation and benchmarking");
  cmd->add_flag("--f64", o.f64, "compute in double precision");
}

std::array<int, 4> parse_stages(const std::string& text) {
  std::array<int, 4> out{};
  std::stringstream in(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(in, item, ',')) {
    if (i == 4) throw ConfigError("--stages expects exactly four comma-separated counts");
    try {
      std::size_t used = 0;
      out[i] = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--stages: '" + item + "' is not an integer");
    }
    ++i;
  }
  if (i != 4) throw ConfigError("--stages expects exactly four comma-separated counts");
  return out;
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) c.pretrain.seed = c.train.seed = *o.seed;
  if (o.epochs) c.pretrain.epochs = c.train.epochs = *o.epochs;
  if (o.keep_ratio) c.model.keep_ratio = *o.keep_ratio;
  if (o.stages) {
    c.model.stages = parse_stages(*o.stages);
    c.model.depth = c.model.stages[0] + c.model.stages[1] + c.model.stages[2] + c.model.stages[3];
  }
  if (o.lambda_token) c.distill.lambda_token = *o.lambda_token;
  if (o.lambda_logits) c.distill.lambda_logits = *o.lambda_logits;
  if (o.lambda_hard) c.distill.lambda_hard = *o.lambda_hard;
  if (o.threads) c.threads = *o.threads;
  if (o.f64) c.f64 = true;
  c.validate();
  return c;
}

const std::string& require_path(const std::string& value, const char* name) {
  if (value.empty()) throw ConfigError(std::string("paths.") + name + " is required for this command");
  return value;
}

fs::path output_dir(const RunConfig& c) {
  fs::path dir(c.paths.output_dir);
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

void snapshot(const RunConfig& c, const std::string& command) {
  write_json(output_dir(c) / ("run_config." + command + ".json"), c);
}

Dataset eval_set(const RunConfig& c) {
  return read_dataset(c.paths.eval_dataset.empty() ? require_path(c.paths.dataset, "dataset") : c.paths.eval_dataset);
}

template <typename Scalar>
VisionTransformer<Scalar> model_from(const Checkpoint& ckpt) {
  Rng rng(0);
  VisionTransformer<Scalar> m(ckpt.config, rng);
  auto params = m.parameters();
  load_parameters(ckpt, params);
  return m;
}

template <typename Scalar>
Checkpoint checkpoint_of(const VisionTransformer<Scalar>& m, const RecalibrationBranch<Scalar>* branch, json meta) {
  auto params = m.parameters();
  if (branch != nullptr)
    for (const auto& p : branch->parameters()) params.push_back(p);
  return make_checkpoint(m.config(), params, std::move(meta));
}

/// Epoch records appended to a JSONL file as they are produced.
class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw FormatError("cannot open log " + path.string());
  }
  void operator()(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

template <typename Scalar>
void train_teacher_cmd(const RunConfig& c) {
  snapshot(c, "train-teacher");
  const Dataset train = read_dataset(require_path(c.paths.dataset, "dataset"));
  std::optional<Dataset> eval;
  if (!c.paths.eval_dataset.empty()) eval = read_dataset(c.paths.eval_dataset);
  Rng rng(c.pretrain.seed);
  VisionTransformer<Scalar> teacher(c.model.teacher(), rng);
  JsonlLog log(output_dir(c) / "train-teacher.log.jsonl");
  const auto result = sit::train_teacher(
      c.pretrain, teacher, train, eval ? &*eval : nullptr,
      [&](const EpochRecord& r) {
        json j = r;
        log(j);
        std::cerr << "epoch " << r.epoch << " loss " << r.loss << " train_acc " << r.train_accuracy << " eval_acc "
                  << r.eval_accuracy << "\n";
      },
      c.threads);
  const double acc = result.epochs.empty() ? -1.0 : result.epochs.back().eval_accuracy;
  const auto path = output_dir(c) / "teacher.sitc";
  save_checkpoint(path, checkpoint_of<Scalar>(teacher, nullptr, {{"command", "train-teacher"}, {"eval_accuracy", acc}}));
  std::cout << json{{"checkpoint", path.string()}, {"eval_accuracy", acc}}.dump() << "\n";
}

template <typename Scalar>
void distill_cmd(const RunConfig& c) {
  snapshot(c, "distill");
  const Dataset train = read_dataset(require_path(c.paths.dataset, "dataset"));
  std::optional<Dataset> eval;
  if (!c.paths.eval_dataset.empty()) eval = read_dataset(c.paths.eval_dataset);
  const Checkpoint teacher_ckpt = load_checkpoint(require_path(c.paths.teacher, "teacher"));
  if (!teacher_ckpt.config.is_teacher()) throw ConfigError("paths.teacher holds a slimmed model, expected a teacher");
  const auto teacher = model_from<Scalar>(teacher_ckpt);
  std::optional<VisionTransformer<Scalar>> hard_teacher;
  if (!c.paths.hard_teacher.empty()) hard_teacher.emplace(model_from<Scalar>(load_checkpoint(c.paths.hard_teacher)));

  Rng rng(c.train.seed);
  VisionTransformer<Scalar> student(c.model, rng);
  RecalibrationBranch<Scalar> branch(c.model, rng);
  const auto inherited = inherit_weights(teacher_ckpt, student);
  JsonlLog log(output_dir(c) / "distill.log.jsonl");
  const auto result = sit::distill(
      c.train, c.distill, teacher, student, branch, train, eval ? &*eval : nullptr,
      hard_teacher ? &*hard_teacher : nullptr,
      [&](const EpochRecord& r) {
        json j = r;
        log(j);
        std::cerr << "epoch " << r.epoch << " loss " << r.loss << " token " << r.token << " logits " << r.logits
                  << " eval_acc " << r.eval_accuracy << "\n";
      },
      c.threads);
  const double acc = result.epochs.empty() ? -1.0 : result.epochs.back().eval_accuracy;
  const auto path = output_dir(c) / "student.sitc";
  save_checkpoint(path, checkpoint_of<Scalar>(student, &branch,
                                              {{"command", "distill"},
                                               {"eval_accuracy", acc},
                                               {"inherited", inherited.size()},
                                               {"distill", c.distill}}));
  std::cout << json{{"checkpoint", path.string()}, {"eval_accuracy", acc}}.dump() << "\n";
}

template <typename Scalar>
void eval_cmd(const RunConfig& c) {
  snapshot(c, "eval");
  const auto model = model_from<Scalar>(load_checkpoint(require_path(c.paths.checkpoint, "checkpoint")));
  const Dataset ds = eval_set(c);
  const double acc = evaluate(model, ds, c.threads);
  const json out{{"checkpoint", c.paths.checkpoint}, {"samples", ds.size()}, {"accuracy", acc}};
  write_json(output_dir(c) / "eval.json", out);
  std::cout << out.dump() << "\n";
}

template <typename Scalar>
void bench_cmd(const RunConfig& c) {
  snapshot(c, "bench");
  // Throughput does not depend on weight values, so configs alone suffice
  // unless a checkpoint is given.
  Rng rng(c.train.seed);
  std::optional<VisionTransformer<Scalar>> loaded;
  if (!c.paths.checkpoint.empty()) loaded.emplace(model_from<Scalar>(load_checkpoint(c.paths.checkpoint)));
  const ModelConfig config = loaded ? loaded->config() : c.model;
  VisionTransformer<Scalar> student = loaded ? *loaded : VisionTransformer<Scalar>(config, rng);
  VisionTransformer<Scalar> teacher(config.teacher(), rng);
  std::vector<Mat<Scalar>> inputs;
  for (int i = 0; i < c.bench.batch; ++i)
    inputs.push_back(rng.uniform_matrix<Scalar>(config.num_patches(), config.patch_dim(), -1.0, 1.0));
  const auto s = bench(student, inputs, c.bench.batch, c.bench.warmup, c.bench.iters, c.threads);
  const auto t = bench(teacher, inputs, c.bench.batch, c.bench.warmup, c.bench.iters, c.threads);
  const json out{{"model", s}, {"teacher", t}, {"speedup", s.images_per_sec / t.images_per_sec}};
  write_json(output_dir(c) / "bench.json", out);
  std::cout << out.dump() << "\n";
}

void flops_cmd(const RunConfig& c) {
  snapshot(c, "flops");
  const json out{{"model", flops(c.model)}, {"teacher", flops(c.model.teacher())}};
  write_json(output_dir(c) / "flops.json", out);
  std::cout << out.dump(2) << "\n";
}

/// Mean token of every block output, one row per sample.
template <typename Scalar>
std::vector<Eigen::MatrixXd> pooled_blocks(const VisionTransformer<Scalar>& m, const Dataset& ds, std::size_t n) {
  std::vector<Eigen::MatrixXd> out(static_cast<std::size_t>(m.config().depth),
                                   Eigen::MatrixXd(static_cast<Index>(n), m.config().embed_dim));
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = m.forward(sample_patches<Scalar>(ds, i, m.config().patch_size));
    for (std::size_t l = 0; l < out.size(); ++l)
      out[l].row(static_cast<Index>(i)) = r.block_tokens[l].value().colwise().mean().template cast<double>();
  }
  return out;
}

template <typename Scalar>
void diagnose_cmd(const RunConfig& c) {
  snapshot(c, "diagnose");
  const auto model = model_from<Scalar>(load_checkpoint(require_path(c.paths.checkpoint, "checkpoint")));
  const Dataset ds = eval_set(c);
  const auto& d = c.diagnostics;
  const std::size_t n = std::min<std::size_t>(ds.size(), static_cast<std::size_t>(d.samples));
  if (n < 2) throw ConfigError("diagnose needs at least two samples");
  const auto measure = d.measure == "cosine" ? SimilarityMeasure::kCosine : SimilarityMeasure::kPearson;
  const std::size_t depth = static_cast<std::size_t>(model.config().depth);
  json out{{"checkpoint", c.paths.checkpoint}, {"samples", n}};

  if (d.similarity || d.attention) {
    NoGradGuard no_grad;
    std::vector<std::vector<double>> sim(depth, std::vector<double>(d.k_list.size(), 0.0));
    json focus = json::array();
    const std::size_t focus_layer = std::min<std::size_t>(9, depth - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = model.forward(sample_patches<Scalar>(ds, i, model.config().patch_size),
                                   {.keep_attention = d.attention});
      if (d.similarity)
        for (std::size_t l = 0; l < depth; ++l) {
          const auto& t = r.block_tokens[l].value();
          const auto stats = token_similarity_stats(t.bottomRows(t.rows() - 1), d.threshold, d.k_list, measure);
          for (std::size_t k = 0; k < stats.size(); ++k) sim[l][k] += stats[k] / static_cast<double>(n);
        }
      if (d.attention && i == 0) {
        const auto& heads = r.attention[focus_layer];
        std::vector<Index> ids;
        for (int id : d.attention_tokens) {
          if (id < 0 || id >= heads.front().rows())
            throw ConfigError("diagnostics.attention_tokens: index " + std::to_string(id) + " out of range");
          ids.push_back(id);
        }
        const auto rows = attention_focus(heads, ids);
        for (Index k = 0; k < rows.rows(); ++k)
          focus.push_back({{"layer", focus_layer},
                           {"token", ids[static_cast<std::size_t>(k)]},
                           {"row", std::vector<double>(rows.row(k).begin(), rows.row(k).end())}});
      }
    }
    if (d.similarity) out["similarity"] = {{"threshold", d.threshold}, {"k_list", d.k_list}, {"measure", d.measure},
                                           {"per_layer", sim}};
    if (d.attention) out["attention"] = focus;
  }

  if (d.cka && !c.paths.teacher.empty()) {
    const auto teacher = model_from<Scalar>(load_checkpoint(c.paths.teacher));
    const auto a = pooled_blocks(model, ds, n);
    const auto b = pooled_blocks(teacher, ds, n);
    std::vector<std::vector<double>> grid(a.size(), std::vector<double>(b.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < b.size(); ++j) grid[i][j] = cka(a[i], b[j]);
    out["cka"] = {{"rows", "model layers"}, {"cols", "teacher layers"}, {"values", grid}};
  }
  write_json(output_dir(c) / "diagnostics.json", out);
  std::cout << json{{"diagnostics", (output_dir(c) / "diagnostics.json").string()}}.dump() << "\n";
}

template <typename Scalar>
void vis_cmd(const RunConfig& c) {
  snapshot(c, "vis");
  const auto model = model_from<Scalar>(load_checkpoint(require_path(c.paths.checkpoint, "checkpoint")));
  if (model.config().is_teacher()) throw ConfigError("vis needs a slimmed model checkpoint");
  const Dataset ds = eval_set(c);
  const fs::path dir = output_dir(c) / "vis";
  fs::create_directories(dir);
  const std::size_t n = std::min<std::size_t>(ds.size(), static_cast<std::size_t>(c.diagnostics.samples));
  const int grid = model.config().grid_size();
  json index = json::array();
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = model.forward(sample_patches<Scalar>(ds, i, model.config().patch_size));
    std::vector<Mat<Scalar>> chain;
    for (const auto& a : r.slim_matrices) chain.push_back(a.weights.value());
    for (const auto& map : score_map(chain, grid, grid)) {
      const auto name = "sample" + std::to_string(i) + "_stage" + std::to_string(map.stage) + ".pgm";
      write_text_atomic(dir / name, to_pgm(map));
      index.push_back({{"sample", i}, {"label", ds.label(i)}, {"file", name}, {"map", map}});
    }
  }
  write_json(dir / "score_maps.json", index);
  std::cout << json{{"maps", index.size()}, {"dir", dir.string()}}.dump() << "\n";
}

template <typename F32, typename F64>
void dispatch(const RunConfig& c, F32 f32, F64 f64) {
  if (c.f64) {
    f64(c);
  } else {
    f32(c);
  }
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const FormatError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const ShapeError*>(&e) != nullptr) return 4;
  if (dynamic_cast<const TrainingDiverged*>(&e) != nullptr || dynamic_cast<const NumericError*>(&e) != nullptr)
    return 5;
  return 1;
}

std::string kind_of(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return "config";
  if (dynamic_cast<const FormatError*>(&e) != nullptr) return "format";
  if (dynamic_cast<const ShapeError*>(&e) != nullptr) return "shape";
  if (dynamic_cast<const TrainingDiverged*>(&e) != nullptr) return "diverged";
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return "numeric";
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e) != nullptr) return "filesystem";
  return "runtime";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token slimming vision transformers: training, distillation and analysis"};
  app.require_subcommand(1);
  Overrides o;

  struct Command {
    const char* name;
    const char* help;
    std::function<void(const RunConfig&)> run;
  };
  const std::vector<Command> commands{
      {"train-teacher", "train the unslimmed teacher with cross-entropy",
       [](const RunConfig& c) { dispatch(c, train_teacher_cmd<float>, train_teacher_cmd<double>); }},
      {"distill", "distill a slimmed student from paths.teacher",
       [](const RunConfig& c) { dispatch(c, distill_cmd<float>, distill_cmd<double>); }},
      {"eval", "accuracy of paths.checkpoint on the evaluation set",
       [](const RunConfig& c) { dispatch(c, eval_cmd<float>, eval_cmd<double>); }},
      {"bench", "inference throughput of the model and its teacher",
       [](const RunConfig& c) { dispatch(c, bench_cmd<float>, bench_cmd<double>); }},
      {"flops", "analytic cost report of the model and its teacher", [](const RunConfig& c) { flops_cmd(c); }},
      {"diagnose", "token similarity, attention focus and CKA",
       [](const RunConfig& c) { dispatch(c, diagnose_cmd<float>, diagnose_cmd<double>); }},
      {"vis", "slimming score maps as PGM images",
       [](const RunConfig& c) { dispatch(c, vis_cmd<float>, vis_cmd<double>); }},
  };
  std::function<void()> action;
  for (const auto& cmd : commands) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    add_overrides(sub, o);
    sub->callback([&, run = cmd.run] { action = [&, run] { run(resolve(o)); }; });
  }

  SynthSpec spec;
  std::string data_out;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset file");
  gen->add_option("--classes", spec.classes);
  gen->add_option("--per-class", spec.samples_per_class);
  gen->add_option("--size", spec.size);
  gen->add_option("--channels", spec.channels);
  gen->add_option("--noise", spec.noise);
  gen->add_option("--seed", spec.seed);
  gen->add_option("-o,--out", data_out)->required();
  gen->callback([&] {
    action = [&] {
      const Dataset ds = gen_synth(spec);
      write_dataset(data_out, ds);
      std::cout << json{{"dataset", data_out}, {"samples", ds.size()}, {"bytes", ds.file_bytes()}}.dump() << "\n";
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    action();
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << json{{"error", kind_of(e)}, {"message", msg}}.dump() << std::endl;
    return exit_code_for(e);
  }
  return 0;
}
