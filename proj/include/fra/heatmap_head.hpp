#pragma once

#include <cstdint>

#include "fra/common.hpp"
#include "fra/config.hpp"

namespace fra {

/// Multi-head scaled dot-product attention with separate q/k/v/out maps.
class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int64_t dim, int64_t heads);

  /// query [B, Lq, dim], key/value [B, Lk, dim] -> [B, Lq, dim]
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key,
                        const torch::Tensor& value);

 private:
  int64_t heads_;
  torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, out_{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

/// Pre-norm decoder layer: self-attention over queries, cross-attention from
/// queries to feature-map tokens, then a feed-forward block.
class DecoderLayerImpl : public torch::nn::Module {
 public:
  DecoderLayerImpl(int64_t dim, int64_t heads, int64_t ffn_dim);

  torch::Tensor forward(torch::Tensor queries, const torch::Tensor& memory,
                        const torch::Tensor& memory_pos);

 private:
  torch::nn::LayerNorm norm_self_{nullptr}, norm_cross_{nullptr}, norm_ffn_{nullptr};
  MultiHeadAttention self_attn_{nullptr}, cross_attn_{nullptr};
  torch::nn::Sequential ffn_{nullptr};
};
TORCH_MODULE(DecoderLayer);

/// Fixed 2-D sinusoidal encoding of an H x W grid, returned as [H*W, dim].
/// Half of the channels encode the row, half the column.
torch::Tensor sinusoidal_position_2d(int64_t height, int64_t width, int64_t dim,
                                     const torch::TensorOptions& options);

/// Facial queries + Transformer decoder + MLP. Turns an encoder feature map
/// into N mask embeddings that act as region cluster centres.
class HeatmapHeadImpl : public torch::nn::Module {
 public:
  HeatmapHeadImpl(int64_t in_channels, const ModelConfig& cfg);

  /// feature_map [B, C, H, W] -> mask embeddings Q [B, N, D]
  torch::Tensor forward(const torch::Tensor& feature_map);

  /// Same as forward but with an explicit query matrix [N, D_dec]. Used to
  /// probe equivariance properties.
  torch::Tensor forward_with_queries(const torch::Tensor& feature_map,
                                     const torch::Tensor& queries);

  torch::Tensor& queries() { return queries_; }
  int64_t num_regions() const { return queries_.size(0); }

 private:
  torch::nn::Linear input_proj_{nullptr};
  torch::nn::LayerNorm memory_norm_{nullptr};
  torch::Tensor queries_;
  torch::nn::ModuleList layers_{nullptr};
  torch::nn::LayerNorm output_norm_{nullptr};
  torch::nn::Sequential mlp_{nullptr};
};
TORCH_MODULE(HeatmapHead);

/// Cosine similarities S and softmax-normalized heatmaps M.
struct AssignmentField {
  torch::Tensor similarity;  // S [B, N, H, W], in [-1, 1]
  torch::Tensor heatmaps;    // M [B, N, H, W], sums to 1 over N
};

inline constexpr double kNormEps = 1e-8;

/// S[b,m,u,v] = cos(dense[b,:,u,v], Q[b,m,:]); M = softmax_m(S / temperature).
/// Norms are offset by 1e-8 so zero vectors give S = 0 rather than NaN.
AssignmentField compute_assignments(const torch::Tensor& dense, const torch::Tensor& mask_embeddings,
                                    double temperature);

/// Heatmap-weighted average pooling of a feature map:
/// out[b,m,:] = sum_uv M[b,m,u,v] F[b,:,u,v] / (sum_uv M[b,m,u,v] + 1e-8).
/// Returns [B, N, C].
torch::Tensor pool_regions(const torch::Tensor& feature_map, const torch::Tensor& heatmaps);

}  // namespace fra
