#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sit/config.hpp"
#include "sit/layers.hpp"
#include "sit/token_slimming.hpp"

namespace sit {

/// Splits an H x W x ch image (interleaved channels, row-major) into
/// non-overlapping patches: one row per patch in raster order, each row
/// laid out as (dy, dx, channel).
template <typename Scalar, typename Pixel>
Mat<Scalar> patchify(std::span<const Pixel> pixels, int height, int width, int channels, int patch,
                     Scalar pixel_scale = Scalar(1), Scalar pixel_offset = Scalar(0)) {
  if (patch <= 0 || height % patch != 0 || width % patch != 0)
    throw ShapeError("patchify: image " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by patch size " + std::to_string(patch));
  if (static_cast<std::size_t>(height) * width * channels != pixels.size())
    throw ShapeError("patchify: pixel buffer has " + std::to_string(pixels.size()) + " values, expected " +
                     std::to_string(static_cast<std::size_t>(height) * width * channels));
  const int gh = height / patch, gw = width / patch;
  Mat<Scalar> out(gh * gw, patch * patch * channels);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const Index row = gy * gw + gx;
      Index col = 0;
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx)
          for (int c = 0; c < channels; ++c) {
            const std::size_t src = (static_cast<std::size_t>(gy * patch + dy) * width + (gx * patch + dx)) * channels + c;
            out(row, col++) = static_cast<Scalar>(pixels[src]) * pixel_scale + pixel_offset;
          }
    }
  return out;
}

/// u8 pixels mapped to [-1, 1].
template <typename Scalar>
Mat<Scalar> patchify_u8(std::span<const std::uint8_t> pixels, int height, int width, int channels, int patch) {
  return patchify<Scalar, std::uint8_t>(pixels, height, width, channels, patch, Scalar(1.0 / 127.5), Scalar(-1));
}

template <typename Scalar>
struct ForwardOptions {
  bool keep_attention = false;
};

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> logits;
  /// Defined only when the model has a distillation head.
  Tensor<Scalar> distill_logits;
  /// Output of every block, (1 + N_s) x C with the class token in row 0.
  std::vector<Tensor<Scalar>> block_tokens;
  /// Per block, per head attention; empty unless requested.
  std::vector<std::vector<Mat<Scalar>>> attention;
  /// One aggregation matrix per slimming boundary, in order.
  std::vector<SlimMatrix<Scalar>> slim_matrices;
};

/// Vision transformer with optional token slimming between stages. With a
/// teacher config it is a plain ViT.
template <typename Scalar>
class VisionTransformer {
 public:
  VisionTransformer(const ModelConfig& config, Rng& rng, TsmInit tsm_init = TsmInit::kXavier) : config_(config) {
    config_.validate();
    const Index dim = config_.embed_dim;
    const Index n = config_.num_patches();
    schedule_ = schedule(config_);
    patch_embed_ = Linear<Scalar>(config_.patch_dim(), dim, rng);
    cls_token_ = Tensor<Scalar>::parameter(rng.normal_matrix<Scalar>(1, dim, 0.02));
    pos_embed_ = Tensor<Scalar>::parameter(rng.normal_matrix<Scalar>(n + 1, dim, 0.02));
    blocks_.reserve(static_cast<std::size_t>(config_.depth));
    for (int i = 0; i < config_.depth; ++i) blocks_.emplace_back(dim, config_.heads, config_.mlp_ratio, rng);
    norm_ = LayerNorm<Scalar>(dim);
    head_ = Linear<Scalar>(dim, config_.num_classes, rng);
    if (config_.use_distill_head) head_dist_ = Linear<Scalar>(dim, config_.num_classes, rng);
    if (!config_.is_teacher()) {
      for (std::size_t s = 1; s < 4; ++s)
        slimmers_.emplace_back(dim, schedule_[s - 1], schedule_[s], config_.slim_axis, tsm_init, rng);
    }
  }

  const ModelConfig& config() const { return config_; }
  const StageSchedule& stage_schedule() const { return schedule_; }
  const std::vector<TransformerBlock<Scalar>>& blocks() const { return blocks_; }
  const std::vector<TokenSlimmer<Scalar>>& slimmers() const { return slimmers_; }
  std::vector<TokenSlimmer<Scalar>>& slimmers() { return slimmers_; }
  const Tensor<Scalar>& pos_embed() const { return pos_embed_; }

  /// Linear patch projection, N x patch_dim -> N x C. No positional term.
  Tensor<Scalar> patch_embed(const Mat<Scalar>& patches) const {
    if (patches.cols() != config_.patch_dim())
      throw ShapeError("patch_embed: expected patch dim " + std::to_string(config_.patch_dim()) + ", got " +
                       std::to_string(patches.cols()));
    return patch_embed_(Tensor<Scalar>::constant(patches));
  }

  /// Tokens entering the first block: [cls; patches] + positional embedding.
  Tensor<Scalar> embed(const Mat<Scalar>& patches) const {
    if (patches.rows() != config_.num_patches())
      throw ShapeError("embed: expected " + std::to_string(config_.num_patches()) + " patches, got " +
                       std::to_string(patches.rows()));
    return concat_rows<Scalar>({cls_token_, patch_embed(patches)}) + pos_embed_;
  }

  ForwardResult<Scalar> forward(const Mat<Scalar>& patches, ForwardOptions<Scalar> options = {}) const {
    ForwardResult<Scalar> result;
    result.block_tokens.reserve(blocks_.size());
    Tensor<Scalar> tokens = embed(patches);
    int stage = 0;
    const auto block_stage = config_.block_stages();
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      while (stage < block_stage[i]) {
        const auto& slimmer = slimmers_[static_cast<std::size_t>(stage)];
        const auto cls = slice_rows(tokens, 0, 1);
        auto [slimmed, a_hat] = slimmer(slice_rows(tokens, 1, tokens.rows() - 1));
        tokens = concat_rows<Scalar>({cls, slimmed});
        result.slim_matrices.push_back(std::move(a_hat));
        ++stage;
      }
      auto out = blocks_[i](tokens, options.keep_attention);
      tokens = out.tokens;
      result.block_tokens.push_back(tokens);
      if (options.keep_attention) result.attention.push_back(std::move(out.attention));
    }
    const auto cls = slice_rows(norm_(tokens), 0, 1);
    result.logits = head_(cls);
    if (config_.use_distill_head) result.distill_logits = head_dist_(cls);
    return result;
  }

  /// Backbone and slimming parameters in a fixed order.
  ParamList<Scalar> parameters() const {
    ParamList<Scalar> out;
    patch_embed_.collect("patch_embed", out);
    out.push_back({"cls_token", cls_token_, false});
    out.push_back({"pos_embed", pos_embed_, false});
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("blocks." + std::to_string(i), out);
    norm_.collect("norm", out);
    head_.collect("head", out);
    if (config_.use_distill_head) head_dist_.collect("head_dist", out);
    for (std::size_t s = 0; s < slimmers_.size(); ++s) slimmers_[s].collect("slim." + std::to_string(s + 1), out);
    return out;
  }

  Index parameter_count() const {
    Index total = 0;
    for (const auto& p : parameters()) total += p.tensor.size();
    return total;
  }

 private:
  ModelConfig config_;
  StageSchedule schedule_{};
  Linear<Scalar> patch_embed_;
  Tensor<Scalar> cls_token_;
  Tensor<Scalar> pos_embed_;
  std::vector<TransformerBlock<Scalar>> blocks_;
  LayerNorm<Scalar> norm_;
  Linear<Scalar> head_;
  Linear<Scalar> head_dist_;
  std::vector<TokenSlimmer<Scalar>> slimmers_;
};

}  // namespace sit
