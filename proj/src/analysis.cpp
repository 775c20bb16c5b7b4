#include "sit/analysis.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace sit {

double CostReport::total_macs() const {
  double total = stem + head + recalibration;
  for (const auto& b : blocks) total += b.total();
  for (double t : tsm) total += t;
  return total;
}

CostReport flops(const ModelConfig& config) {
  config.validate();
  CostReport r;
  const double c = config.embed_dim;
  const double hidden = static_cast<double>(config.mlp_ratio) * c;
  const auto sched = schedule(config);
  r.stem = static_cast<double>(config.num_patches()) * config.patch_dim() * c;
  const auto stages = config.block_stages();
  for (int s : stages) {
    BlockCost b;
    b.stage = s;
    b.tokens = sched[static_cast<std::size_t>(s)] + 1;
    const double t = static_cast<double>(b.tokens);
    b.msa_linear = 4.0 * t * c * c;
    b.msa_attention = 2.0 * t * t * c;
    b.mlp = 2.0 * t * c * hidden;
    r.blocks.push_back(b);
  }
  if (!config.is_teacher()) {
    for (std::size_t s = 1; s < 4; ++s) {
      const double n = sched[s - 1];
      const double n_hat = sched[s];
      const double keys = n * c * (c / 2.0);
      const double logits = n_hat * (c / 2.0) * n;
      const double aggregate = n_hat * n * c;
      r.tsm.push_back(keys + logits + aggregate);
    }
  }
  const int heads = config.use_distill_head ? 2 : 1;
  r.head = heads * c * config.num_classes;
  r.recalibration = 0.0;
  r.parameters = parameter_count(config);
  return r;
}

long parameter_count(const ModelConfig& config) {
  const long c = config.embed_dim;
  const long hidden = static_cast<long>(config.mlp_ratio) * c;
  const long n = config.num_patches();
  long total = static_cast<long>(config.patch_dim()) * c + c;  // stem
  total += c + (n + 1) * c;                                      // class token, positions
  const long block = 4 * c                                      // two layer norms
                     + c * 3 * c + 3 * c + c * c + c            // attention
                     + c * hidden + hidden + hidden * c + c;    // mlp
  total += config.depth * block;
  total += 2 * c;                                                // final norm
  const int heads = config.use_distill_head ? 2 : 1;
  total += heads * (c * config.num_classes + config.num_classes);
  if (!config.is_teacher()) {
    const auto sched = schedule(config);
    for (std::size_t s = 1; s < 4; ++s) total += c * (c / 2) + static_cast<long>(sched[s]) * (c / 2) + 1;
  }
  return total;
}

void to_json(nlohmann::json& j, const BlockCost& b) {
  j = {{"stage", b.stage},
       {"tokens", b.tokens},
       {"msa_linear_macs", b.msa_linear},
       {"msa_attention_macs", b.msa_attention},
       {"mlp_macs", b.mlp}};
}

void to_json(nlohmann::json& j, const CostReport& r) {
  j = {{"stem_macs", r.stem},
       {"blocks", r.blocks},
       {"tsm_macs", r.tsm},
       {"head_macs", r.head},
       {"recalibration_macs", r.recalibration},
       {"total_macs", r.total_macs()},
       {"total_flops", r.total_flops()},
       {"gmacs", r.total_macs() / 1e9},
       {"parameters", r.parameters}};
}

void to_json(nlohmann::json& j, const BenchResult& b) {
  j = {{"images_per_sec", b.images_per_sec},
       {"batch", b.batch},
       {"warmup", b.warmup},
       {"iters", b.iters},
       {"threads", b.threads},
       {"seconds_per_iter", b.seconds_per_iter}};
}

void to_json(nlohmann::json& j, const ScoreMap& m) {
  j = {{"stage", m.stage}, {"grid_height", m.grid_height}, {"grid_width", m.grid_width}, {"values", m.values}};
}

std::string to_pgm(const ScoreMap& map) {
  std::ostringstream out;
  out << "P2\n" << map.grid_width << ' ' << map.grid_height << "\n255\n";
  for (int y = 0; y < map.grid_height; ++y) {
    for (int x = 0; x < map.grid_width; ++x) {
      const double v = std::clamp(map.values[static_cast<std::size_t>(y * map.grid_width + x)], 0.0, 1.0);
      out << (x == 0 ? "" : " ") << std::lround(v * 255.0);
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace sit
