#include "sit/config.hpp"

#include <algorithm>
#include <cmath>

namespace sit {

std::vector<int> ModelConfig::block_stages() const {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(depth));
  for (int s = 0; s < 4; ++s)
    for (int b = 0; b < stages[static_cast<std::size_t>(s)]; ++b) out.push_back(s);
  return out;
}

ModelConfig ModelConfig::teacher() const {
  ModelConfig t = *this;
  t.stages = {depth, 0, 0, 0};
  t.keep_ratio = 1.0;
  return t;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (image_size <= 0 || patch_size <= 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0)
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " + std::to_string(patch_size));
  if (channels <= 0) fail("channels must be positive");
  if (embed_dim <= 0 || heads <= 0) fail("embed_dim and heads must be positive");
  if (embed_dim % heads != 0)
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " + std::to_string(heads));
  if (embed_dim % 2 != 0) fail("embed_dim must be even (slimming keys use C/2 channels)");
  if (depth <= 0) fail("depth must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
  int total = 0;
  for (int s : stages) {
    if (s < 0) fail("stage block counts must be non-negative");
    total += s;
  }
  if (total != depth) fail("stages sum to " + std::to_string(total) + " but depth is " + std::to_string(depth));
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) fail("keep_ratio must be in (0, 1]");
  if (is_teacher()) {
    if (keep_ratio != 1.0) fail("a teacher (collapsed stages) must have keep_ratio 1");
  } else {
    if (std::any_of(stages.begin(), stages.end(), [](int s) { return s == 0; }))
      fail("a slimmed model needs four non-empty stages");
    (void)schedule(num_patches(), stages, keep_ratio);
  }
}

StageSchedule schedule(int num_tokens, const std::array<int, 4>& stages, double keep_ratio) {
  if (num_tokens < 1) throw ConfigError("schedule: token count must be positive");
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ConfigError("schedule: keep_ratio must be in (0, 1]");
  StageSchedule out{num_tokens, num_tokens, num_tokens, num_tokens};
  const bool collapsed = stages[1] == 0 && stages[2] == 0 && stages[3] == 0;
  if (collapsed) return out;
  for (std::size_t s = 1; s < 4; ++s) {
    // The epsilon keeps products like 0.7 * 10 from rounding up past the
    // exact integer.
    const double target = keep_ratio * static_cast<double>(out[s - 1]);
    const int next = static_cast<int>(std::ceil(target - 1e-9));
    if (next < 1) throw ConfigError("schedule: stage " + std::to_string(s) + " would keep fewer than one token");
    out[s] = next;
  }
  return out;
}

StageSchedule schedule(const ModelConfig& config) {
  return schedule(config.num_patches(), config.stages, config.keep_ratio);
}

void reject_unknown_fields(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown field '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"channels", c.channels},
                     {"embed_dim", c.embed_dim},
                     {"heads", c.heads},
                     {"depth", c.depth},
                     {"stages", c.stages},
                     {"keep_ratio", c.keep_ratio},
                     {"num_classes", c.num_classes},
                     {"mlp_ratio", c.mlp_ratio},
                     {"use_distill_head", c.use_distill_head},
                     {"slim_axis", c.slim_axis == SlimAxis::kOutput ? "output" : "input"}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  reject_unknown_fields(j,
                        {"image_size", "patch_size", "channels", "embed_dim", "heads", "depth", "stages", "keep_ratio",
                         "num_classes", "mlp_ratio", "use_distill_head", "slim_axis"},
                        "model");
  ModelConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.channels = j.value("channels", d.channels);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.heads = j.value("heads", d.heads);
  c.depth = j.value("depth", d.depth);
  if (j.contains("stages")) {
    const auto stages = j.at("stages").get<std::vector<int>>();
    if (stages.size() != 4) throw ConfigError("model.stages must list exactly 4 block counts");
    std::copy(stages.begin(), stages.end(), c.stages.begin());
  } else {
    c.stages = {c.depth, 0, 0, 0};
  }
  c.keep_ratio = j.value("keep_ratio", d.keep_ratio);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.use_distill_head = j.value("use_distill_head", d.use_distill_head);
  const std::string axis = j.value("slim_axis", std::string("output"));
  if (axis == "output") {
    c.slim_axis = SlimAxis::kOutput;
  } else if (axis == "input") {
    c.slim_axis = SlimAxis::kInput;
  } else {
    throw ConfigError("model.slim_axis must be 'output' or 'input', got '" + axis + "'");
  }
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.image_size == b.image_size && a.patch_size == b.patch_size && a.channels == b.channels &&
         a.embed_dim == b.embed_dim && a.heads == b.heads && a.depth == b.depth && a.stages == b.stages &&
         a.keep_ratio == b.keep_ratio && a.num_classes == b.num_classes && a.mlp_ratio == b.mlp_ratio &&
         a.use_distill_head == b.use_distill_head && a.slim_axis == b.slim_axis;
}

}  // namespace sit
