#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace sit {

/// Raised by validation of configs and run parameters.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Softmax direction of the slimming matrix. kOutput normalizes every column
/// over the N_hat outputs, so each input token distributes unit mass.
enum class SlimAxis { kOutput, kInput };

/// Architecture of a teacher or a slimmed student.
///
/// A teacher has stages collapsed to {depth, 0, 0, 0} and keep_ratio 1. A
/// student has four non-empty stages with a token slimming module before
/// stages 1, 2 and 3.
struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 1;
  int embed_dim = 128;
  int heads = 4;
  int depth = 8;
  std::array<int, 4> stages{8, 0, 0, 0};
  double keep_ratio = 1.0;
  int num_classes = 10;
  int mlp_ratio = 4;
  bool use_distill_head = false;
  SlimAxis slim_axis = SlimAxis::kOutput;

  int grid_size() const { return image_size / patch_size; }
  int num_patches() const { return grid_size() * grid_size(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int head_dim() const { return embed_dim / heads; }
  bool is_teacher() const { return stages[1] == 0 && stages[2] == 0 && stages[3] == 0; }

  /// Stage index (0..3) of every block.
  std::vector<int> block_stages() const;

  /// The teacher this student distills from: same backbone, no slimming.
  ModelConfig teacher() const;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
};

/// Content-token count of each of the four stages; the class token is not
/// included.
using StageSchedule = std::array<int, 4>;

/// N_{s+1} = ceil(r * N_s) at each of the three slimming boundaries.
StageSchedule schedule(int num_tokens, const std::array<int, 4>& stages, double keep_ratio);

StageSchedule schedule(const ModelConfig& config);

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Rejects unknown fields.
void from_json(const nlohmann::json& j, ModelConfig& c);

bool operator==(const ModelConfig& a, const ModelConfig& b);

/// Rejects any key of `j` not in `known`, naming it in the error.
void reject_unknown_fields(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where);

}  // namespace sit
