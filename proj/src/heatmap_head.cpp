#include "fra/heatmap_head.hpp"

#include <cmath>

namespace fra {

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int64_t dim, int64_t heads) : heads_(heads) {
  if (dim % heads != 0) throw ConfigError("attention width must be divisible by the head count");
  q_ = register_module("q", torch::nn::Linear(dim, dim));
  k_ = register_module("k", torch::nn::Linear(dim, dim));
  v_ = register_module("v", torch::nn::Linear(dim, dim));
  out_ = register_module("out", torch::nn::Linear(dim, dim));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key,
                                              const torch::Tensor& value) {
  const auto batch = query.size(0);
  const auto dim = query.size(2);
  const auto head_dim = dim / heads_;
  auto split = [&](const torch::Tensor& t) {
    return t.view({batch, t.size(1), heads_, head_dim}).transpose(1, 2);
  };
  auto q = split(q_(query));
  auto k = split(k_(key));
  auto v = split(v_(value));
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  auto attended = torch::matmul(scores.softmax(-1), v);
  return out_(attended.transpose(1, 2).reshape({batch, query.size(1), dim}));
}

DecoderLayerImpl::DecoderLayerImpl(int64_t dim, int64_t heads, int64_t ffn_dim) {
  norm_self_ = register_module("norm_self", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm_cross_ =
      register_module("norm_cross", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm_ffn_ = register_module("norm_ffn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  self_attn_ = register_module("self_attn", MultiHeadAttention(dim, heads));
  cross_attn_ = register_module("cross_attn", MultiHeadAttention(dim, heads));
  ffn_ = register_module("ffn", torch::nn::Sequential(torch::nn::Linear(dim, ffn_dim),
                                                      torch::nn::ReLU(),
                                                      torch::nn::Linear(ffn_dim, dim)));
}

torch::Tensor DecoderLayerImpl::forward(torch::Tensor queries, const torch::Tensor& memory,
                                        const torch::Tensor& memory_pos) {
  auto x = norm_self_(queries);
  queries = queries + self_attn_(x, x, x);
  x = norm_cross_(queries);
  queries = queries + cross_attn_(x, memory + memory_pos, memory);
  return queries + ffn_->forward(norm_ffn_(queries));
}

torch::Tensor sinusoidal_position_2d(int64_t height, int64_t width, int64_t dim,
                                     const torch::TensorOptions& options) {
  if (dim % 2 != 0) throw ConfigError("positional encoding width must be even");
  const int64_t half = dim / 2;
  const double two_pi = 2.0 * M_PI;
  auto encode = [&](int64_t extent) {
    // normalized coordinate in (0, 2pi]
    auto coord = (torch::arange(extent, options) + 1.0) / static_cast<double>(extent) * two_pi;
    auto i = torch::arange(half, options);
    auto freq = torch::pow(10000.0, 2.0 * torch::floor(i / 2.0) / static_cast<double>(half));
    auto phase = coord.unsqueeze(1) / freq.unsqueeze(0);  // [extent, half]
    auto even = (torch::remainder(i, 2.0) == 0).unsqueeze(0);
    return torch::where(even, phase.sin(), phase.cos());
  };
  auto rows = encode(height).unsqueeze(1).expand({height, width, half});
  auto cols = encode(width).unsqueeze(0).expand({height, width, half});
  return torch::cat({rows, cols}, 2).reshape({height * width, dim});
}

HeatmapHeadImpl::HeatmapHeadImpl(int64_t in_channels, const ModelConfig& cfg) {
  const int64_t dim = cfg.resolved_decoder_dim();
  input_proj_ = register_module("input_proj", torch::nn::Linear(in_channels, dim));
  memory_norm_ =
      register_module("memory_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  queries_ = register_parameter("queries", torch::randn({cfg.num_regions, dim}));
  layers_ = register_module("layers", torch::nn::ModuleList());
  for (int64_t i = 0; i < cfg.decoder_depth; ++i) {
    layers_->push_back(DecoderLayer(dim, cfg.decoder_heads, cfg.decoder_ffn));
  }
  output_norm_ =
      register_module("output_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  mlp_ = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(dim, dim), torch::nn::ReLU(),
                                                      torch::nn::Linear(dim, cfg.embedding_dim)));
}

torch::Tensor HeatmapHeadImpl::forward(const torch::Tensor& feature_map) {
  return forward_with_queries(feature_map, queries_);
}

torch::Tensor HeatmapHeadImpl::forward_with_queries(const torch::Tensor& feature_map,
                                                    const torch::Tensor& queries) {
  require_rank(feature_map, 4, "heatmap head");
  const auto batch = feature_map.size(0);
  const auto height = feature_map.size(2);
  const auto width = feature_map.size(3);
  if (height * width == 0) throw DomainError("heatmap head: empty feature map");
  auto tokens = feature_map.flatten(2).transpose(1, 2);  // [B, HW, C]
  auto memory = memory_norm_(input_proj_(tokens));
  auto pos = sinusoidal_position_2d(height, width, memory.size(2), memory.options()).unsqueeze(0);
  auto x = queries.unsqueeze(0).expand({batch, queries.size(0), queries.size(1)});
  for (const auto& layer : *layers_) {
    x = layer->as<DecoderLayer>()->forward(x, memory, pos);
  }
  return mlp_->forward(output_norm_(x));
}

AssignmentField compute_assignments(const torch::Tensor& dense,
                                    const torch::Tensor& mask_embeddings, double temperature) {
  require_rank(dense, 4, "compute_assignments(dense)");
  require_rank(mask_embeddings, 3, "compute_assignments(mask embeddings)");
  if (dense.size(0) != mask_embeddings.size(0) || dense.size(1) != mask_embeddings.size(2)) {
    throw DomainError("compute_assignments: batch or embedding width mismatch");
  }
  if (!(temperature > 0.0)) throw DomainError("compute_assignments: temperature must be positive");
  auto pixels = dense / (dense.norm(2, 1, true) + kNormEps);
  auto centres = mask_embeddings / (mask_embeddings.norm(2, 2, true) + kNormEps);
  auto similarity = torch::einsum("bnd,bdhw->bnhw", {centres, pixels});
  return {similarity, (similarity / temperature).softmax(1)};
}

torch::Tensor pool_regions(const torch::Tensor& feature_map, const torch::Tensor& heatmaps) {
  require_rank(feature_map, 4, "pool_regions(feature map)");
  require_rank(heatmaps, 4, "pool_regions(heatmaps)");
  if (feature_map.size(0) != heatmaps.size(0) || feature_map.size(2) != heatmaps.size(2) ||
      feature_map.size(3) != heatmaps.size(3)) {
    throw DomainError("pool_regions: feature map and heatmaps disagree in batch or grid size");
  }
  auto weights = heatmaps.flatten(2);                                   // [B, N, HW]
  auto weighted = torch::bmm(weights, feature_map.flatten(2).transpose(1, 2));  // [B, N, C]
  return weighted / (weights.sum(2, true) + kNormEps);
}

}  // namespace fra
