#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sit/config.hpp"
#include "sit/plan.hpp"

namespace sit {

/// Input and output locations. Empty means unset; each subcommand checks
/// the ones it needs.
struct RunPaths {
  std::string dataset;
  std::string eval_dataset;
  std::string teacher;
  std::string hard_teacher;
  std::string checkpoint;
  std::string output_dir = "out";
};

struct DiagnosticsOptions {
  bool similarity = true;
  bool attention = true;
  bool cka = true;
  bool score_maps = true;
  double threshold = 0.7;
  std::vector<int> k_list{4, 8, 16};
  std::string measure = "pearson";
  std::vector<int> attention_tokens{1, 2};
  int samples = 32;
};

struct BenchOptions {
  int batch = 32;
  int warmup = 2;
  int iters = 7;
};

/// One document drives every subcommand. `model` is the student; the
/// teacher is model.teacher(). `pretrain` schedules teacher training and
/// `train` schedules distillation.
struct RunConfig {
  ModelConfig model;
  TrainPlan pretrain;
  TrainPlan train;
  DistillWeights distill;
  RunPaths paths;
  DiagnosticsOptions diagnostics;
  BenchOptions bench;
  int threads = 1;
  bool f64 = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const RunPaths& p);
void from_json(const nlohmann::json& j, RunPaths& p);
void to_json(nlohmann::json& j, const DiagnosticsOptions& d);
void from_json(const nlohmann::json& j, DiagnosticsOptions& d);
void to_json(nlohmann::json& j, const BenchOptions& b);
void from_json(const nlohmann::json& j, BenchOptions& b);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Parses and validates a RunConfig document.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace sit
