#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fra/common.hpp"
#include "fra/config.hpp"
#include "fra/heatmap_head.hpp"

namespace fra {

struct ProjectorSpec {
  int64_t input_dim = 0;
  // 0 gives a single linear layer
  int64_t hidden_dim = 0;
  int64_t output_dim = 0;
  bool batch_norm = true;
  bool bias = true;
};

/// Linear -> BatchNorm -> ReLU -> Linear, or a single Linear when
/// hidden_dim == 0. Used for projectors and predictors.
class MlpImpl : public torch::nn::Module {
 public:
  explicit MlpImpl(const ProjectorSpec& spec);

  /// [..., input_dim] -> [..., output_dim]; leading dims are flattened for
  /// batch normalization.
  torch::Tensor forward(const torch::Tensor& x);

  /// Only valid for a square single-layer map. Sets weight = I, bias = 0.
  void set_identity();

  const ProjectorSpec& spec() const { return spec_; }

 private:
  ProjectorSpec spec_;
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(Mlp);

struct EncoderOutput {
  torch::Tensor feature_map;  // [B, C, H, W], before pooling
  torch::Tensor pooled;       // [B, C], spatial mean of feature_map
};

class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int64_t in_channels, int64_t width, int64_t stride, bool bottleneck);
  torch::Tensor forward(const torch::Tensor& x);
  int64_t out_channels() const { return out_channels_; }

 private:
  int64_t out_channels_;
  torch::nn::Sequential body_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Residual encoder with total stride 32. `resnet_desk` is one basic block
/// per stage with a 3x3 stem; `resnet18`/`resnet50` follow the standard
/// layouts scaled by encoder_width.
class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const ModelConfig& cfg);

  EncoderOutput forward(const torch::Tensor& images);
  int64_t out_channels() const { return out_channels_; }

 private:
  int64_t out_channels_ = 0;
  torch::nn::Sequential stem_{nullptr};
  torch::nn::Sequential stages_{nullptr};
};
TORCH_MODULE(Encoder);

/// Everything one branch produces for one view.
struct BranchOutput {
  EncoderOutput encoded;
  torch::Tensor global_embedding;   // z   [B, D]
  torch::Tensor dense;              // F_dense [B, D, H, W]
  torch::Tensor mask_embeddings;    // Q   [B, N, D]
  AssignmentField assignments;      // S, M [B, N, H, W]
  torch::Tensor region_features;    // h^m [B, N, C]
  torch::Tensor local_embeddings;   // z^m [B, N, D]
};

/// Encoder, global projector, local projector and heatmap head. The online
/// and momentum networks are both Branches with identical topology.
class BranchImpl : public torch::nn::Module {
 public:
  explicit BranchImpl(const ModelConfig& cfg);

  BranchOutput forward(const torch::Tensor& view, double assign_temperature);

  EncoderOutput encode(const torch::Tensor& view);
  torch::Tensor project_global(const torch::Tensor& pooled);
  /// Applies the local projector at every spatial position: [B,C,H,W] -> [B,D,H,W].
  torch::Tensor project_dense(const torch::Tensor& feature_map);
  /// Applies the local projector to pooled region vectors: [..., C] -> [..., D].
  torch::Tensor project_local(const torch::Tensor& features);

  Encoder encoder{nullptr};
  Mlp global_projector{nullptr};
  Mlp local_projector{nullptr};
  HeatmapHead head{nullptr};
};
TORCH_MODULE(Branch);

/// Online parameters (branch + predictors) and the EMA-linked momentum
/// branch. The momentum branch never has requires_grad set.
class ModelPair {
 public:
  explicit ModelPair(const ModelConfig& cfg);

  Branch online{nullptr};
  Branch momentum{nullptr};
  Mlp global_predictor{nullptr};
  Mlp local_predictor{nullptr};

  /// All gradient-trained parameters: online branch plus predictors.
  std::vector<torch::Tensor> online_parameters() const;
  std::vector<torch::Tensor> momentum_parameters() const;

  /// Stable names for every parameter and buffer, prefixed by owner.
  std::vector<std::pair<std::string, torch::Tensor>> named_state() const;

  /// xi <- tau * xi + (1 - tau) * theta for every shared parameter. Buffers
  /// (batch-norm statistics) are copied from the online branch.
  void ema_update(double tau);

  /// Copies online weights into the momentum branch (tau = 0).
  void sync_momentum() { ema_update(0.0); }

  void train(bool on = true);
  void to(torch::Dtype dtype);

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
};

/// xi <- tau * xi + (1 - tau) * theta over two modules with identical
/// topology. Throws TopologyError on name or shape mismatch.
void ema_update(torch::nn::Module& online, torch::nn::Module& momentum, double tau);

}  // namespace fra
