#include "sit/run_config.hpp"

#include "sit/io.hpp"

namespace sit {

void RunConfig::validate() const {
  model.validate();
  pretrain.validate();
  train.validate();
  distill.validate(!paths.hard_teacher.empty());
  if (distill.lambda_hard > 0 && !model.use_distill_head)
    throw ConfigError("distill.lambda_hard > 0 requires model.use_distill_head");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (diagnostics.measure != "pearson" && diagnostics.measure != "cosine")
    throw ConfigError("diagnostics.measure must be pearson or cosine");
  if (diagnostics.samples < 2) throw ConfigError("diagnostics.samples must be at least 2");
  for (int k : diagnostics.k_list)
    if (k < 1) throw ConfigError("diagnostics.k_list entries must be positive");
  if (bench.batch < 1 || bench.iters < 1 || bench.warmup < 0) throw ConfigError("bench: batch and iters must be positive");
}

void to_json(nlohmann::json& j, const RunPaths& p) {
  j = {{"dataset", p.dataset},       {"eval_dataset", p.eval_dataset}, {"teacher", p.teacher},
       {"hard_teacher", p.hard_teacher}, {"checkpoint", p.checkpoint}, {"output_dir", p.output_dir}};
}

void from_json(const nlohmann::json& j, RunPaths& p) {
  reject_unknown_fields(j, {"dataset", "eval_dataset", "teacher", "hard_teacher", "checkpoint", "output_dir"}, "paths");
  RunPaths d;
  p.dataset = j.value("dataset", d.dataset);
  p.eval_dataset = j.value("eval_dataset", d.eval_dataset);
  p.teacher = j.value("teacher", d.teacher);
  p.hard_teacher = j.value("hard_teacher", d.hard_teacher);
  p.checkpoint = j.value("checkpoint", d.checkpoint);
  p.output_dir = j.value("output_dir", d.output_dir);
}

void to_json(nlohmann::json& j, const DiagnosticsOptions& d) {
  j = {{"similarity", d.similarity}, {"attention", d.attention},     {"cka", d.cka},
       {"score_maps", d.score_maps}, {"threshold", d.threshold},     {"k_list", d.k_list},
       {"measure", d.measure},       {"attention_tokens", d.attention_tokens}, {"samples", d.samples}};
}

void from_json(const nlohmann::json& j, DiagnosticsOptions& d) {
  reject_unknown_fields(j,
                        {"similarity", "attention", "cka", "score_maps", "threshold", "k_list", "measure",
                         "attention_tokens", "samples"},
                        "diagnostics");
  DiagnosticsOptions x;
  d.similarity = j.value("similarity", x.similarity);
  d.attention = j.value("attention", x.attention);
  d.cka = j.value("cka", x.cka);
  d.score_maps = j.value("score_maps", x.score_maps);
  d.threshold = j.value("threshold", x.threshold);
  d.k_list = j.value("k_list", x.k_list);
  d.measure = j.value("measure", x.measure);
  d.attention_tokens = j.value("attention_tokens", x.attention_tokens);
  d.samples = j.value("samples", x.samples);
}

void to_json(nlohmann::json& j, const BenchOptions& b) {
  j = {{"batch", b.batch}, {"warmup", b.warmup}, {"iters", b.iters}};
}

void from_json(const nlohmann::json& j, BenchOptions& b) {
  reject_unknown_fields(j, {"batch", "warmup", "iters"}, "bench");
  BenchOptions d;
  b.batch = j.value("batch", d.batch);
  b.warmup = j.value("warmup", d.warmup);
  b.iters = j.value("iters", d.iters);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model},       {"pretrain", c.pretrain}, {"train", c.train},
       {"distill", c.distill},   {"paths", c.paths},       {"diagnostics", c.diagnostics},
       {"bench", c.bench},       {"threads", c.threads},   {"f64", c.f64}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown_fields(j, {"model", "pretrain", "train", "distill", "paths", "diagnostics", "bench", "threads", "f64"},
                        "");
  RunConfig d;
  c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  c.pretrain = j.contains("pretrain") ? j.at("pretrain").get<TrainPlan>() : d.pretrain;
  c.train = j.contains("train") ? j.at("train").get<TrainPlan>() : d.train;
  c.distill = j.contains("distill") ? j.at("distill").get<DistillWeights>() : d.distill;
  c.paths = j.contains("paths") ? j.at("paths").get<RunPaths>() : d.paths;
  c.diagnostics = j.contains("diagnostics") ? j.at("diagnostics").get<DiagnosticsOptions>() : d.diagnostics;
  c.bench = j.contains("bench") ? j.at("bench").get<BenchOptions>() : d.bench;
  c.threads = j.value("threads", d.threads);
  c.f64 = j.value("f64", d.f64);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

}  // namespace sit
