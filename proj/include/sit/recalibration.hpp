#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "sit/config.hpp"
#include "sit/layers.hpp"

namespace sit {

/// Parameters of one reverse slimming module. expand (A_1, 4N x N_hat) and
/// compress (A_2, N x 4N) act on the token axis; the MLP acts on channels.
template <typename Scalar>
struct RtsmParams {
  Tensor<Scalar> expand;
  Tensor<Scalar> compress;
  Mlp<Scalar> mlp;

  Index input_tokens() const { return expand.cols(); }
  Index output_tokens() const { return compress.rows(); }
};

/// Restores N tokens from N_hat slimmed ones:
///   X_hat' = A_2 gelu(A_1 X_hat),  X' = X_hat' + MLP(X_hat').
template <typename Scalar>
Tensor<Scalar> recalibrate(const Tensor<Scalar>& slimmed, const RtsmParams<Scalar>& params) {
  if (slimmed.rows() != params.input_tokens())
    throw ShapeError("recalibrate: expected " + std::to_string(params.input_tokens()) + " tokens, got " +
                     std::to_string(slimmed.rows()));
  const auto restored = matmul(params.compress, gelu(matmul(params.expand, slimmed)));
  return restored + params.mlp(restored);
}

/// The module for `stage`; stage 0 has not been slimmed and gets none.
template <typename Scalar>
std::optional<RtsmParams<Scalar>> rtsm_for_stage(int stage, const StageSchedule& schedule, Index channels,
                                                 int mlp_ratio, Rng& rng) {
  if (stage < 0 || stage > 3) throw std::out_of_range("rtsm_for_stage: stage " + std::to_string(stage));
  if (stage == 0) return std::nullopt;
  const Index full = schedule[0];
  const Index slimmed = schedule[static_cast<std::size_t>(stage)];
  RtsmParams<Scalar> p;
  p.expand = Tensor<Scalar>::parameter(rng.xavier<Scalar>(4 * full, slimmed));
  p.compress = Tensor<Scalar>::parameter(rng.xavier<Scalar>(full, 4 * full));
  p.mlp = Mlp<Scalar>(channels, channels * mlp_ratio, rng);
  return p;
}

/// Training-only branch holding one reverse module per slimmed stage. Every
/// block of a stage shares that stage's module.
template <typename Scalar>
class RecalibrationBranch {
 public:
  RecalibrationBranch() = default;
  RecalibrationBranch(const ModelConfig& config, Rng& rng) {
    config.validate();
    const auto sched = schedule(config);
    if (config.is_teacher()) return;
    for (int s = 0; s < 4; ++s)
      modules_[static_cast<std::size_t>(s)] = rtsm_for_stage<Scalar>(s, sched, config.embed_dim, config.mlp_ratio, rng);
  }

  bool has_stage(int stage) const { return modules_.at(static_cast<std::size_t>(stage)).has_value(); }
  const RtsmParams<Scalar>& stage(int s) const { return *modules_.at(static_cast<std::size_t>(s)); }
  RtsmParams<Scalar>& stage(int s) { return *modules_.at(static_cast<std::size_t>(s)); }

  /// Maps a (1 + N_s) x C block output to (1 + N) x C. The class token is
  /// passed through; stage-0 outputs are returned unchanged.
  Tensor<Scalar> restore(int s, const Tensor<Scalar>& block_tokens) const {
    if (!has_stage(s)) return block_tokens;
    const auto cls = slice_rows(block_tokens, 0, 1);
    const auto content = slice_rows(block_tokens, 1, block_tokens.rows() - 1);
    return concat_rows<Scalar>({cls, recalibrate(content, stage(s))});
  }

  ParamList<Scalar> parameters() const {
    ParamList<Scalar> out;
    for (int s = 0; s < 4; ++s) {
      if (!has_stage(s)) continue;
      const auto& m = *modules_[static_cast<std::size_t>(s)];
      const std::string prefix = "recal." + std::to_string(s);
      out.push_back({prefix + ".expand", m.expand, true});
      out.push_back({prefix + ".compress", m.compress, true});
      m.mlp.collect(prefix + ".mlp", out, true);
    }
    return out;
  }

 private:
  std::array<std::optional<RtsmParams<Scalar>>, 4> modules_;
};

}  // namespace sit
