#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "fra/augmentation.hpp"
#include "fra/config.hpp"
#include "fra/data.hpp"
#include "fra/losses.hpp"
#include "fra/networks.hpp"

namespace fra {

/// Every scalar and differentiable term of one objective evaluation.
struct LossTerms {
  torch::Tensor total;        // L = L_c + lambda_r * L_r
  torch::Tensor consistency;  // L_c
  torch::Tensor relation;     // L_r = CE term + lambda_memax * ME-MAX
  torch::Tensor relation_ce;
  torch::Tensor memax;
  double cluster_entropy = 0.0;
  double global_cos = 0.0;
  double local_cos = 0.0;
};

/// Teacher targets: Sinkhorn over all B*H*W pixels of S / temperature.
/// [B, N, H, W] -> [B, N, H, W], per-pixel sums 1.
torch::Tensor relation_targets(const torch::Tensor& teacher_similarity, const LossConfig& cfg);

/// Runs both views through both branches and assembles the full objective.
/// The momentum branch is evaluated without autograd.
LossTerms compute_objective(ModelPair& model, const torch::Tensor& view1, const torch::Tensor& view2,
                            const LossConfig& cfg);

double learning_rate_at(const TrainConfig& cfg, int64_t step);
double tau_at(const TrainConfig& cfg, int64_t step);

struct StepReport {
  int64_t step = 0;
  double loss = 0, consistency = 0, relation = 0, relation_ce = 0, memax = 0;
  double cluster_entropy = 0, global_cos = 0, local_cos = 0;
  double tau = 0, lr = 0, wall_ms = 0;

  std::string to_json() const;
};

/// Owns the model pair, optimizer and step counter of one training run.
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg);

  /// Augments `batch`, evaluates the objective, steps the online parameters
  /// and EMA-updates the momentum branch. Throws NumericError with a
  /// diagnostic if the loss is not finite.
  StepReport train_step(const ImageBatch& batch);

  /// Runs the remaining steps up to train.total_steps over `data`, logging to
  /// <out_dir>/train_log.jsonl and checkpointing periodically. Returns the
  /// final checkpoint path.
  std::filesystem::path fit(const ImageDataset& data);

  void save_checkpoint(const std::filesystem::path& path) const;

  /// Restores a run. Throws TopologyError if `expected_model` (when given)
  /// disagrees with the checkpoint's model section.
  static std::unique_ptr<Trainer> resume(const std::filesystem::path& path,
                                         const std::optional<RunConfig>& override_cfg = std::nullopt);

  int64_t step() const { return step_; }
  const RunConfig& config() const { return cfg_; }
  ModelPair& model() { return *model_; }
  const ModelPair& model() const { return *model_; }
  torch::optim::Optimizer& optimizer() { return *optimizer_; }

 private:
  RunConfig cfg_;
  std::unique_ptr<ModelPair> model_;
  std::unique_ptr<torch::optim::Optimizer> optimizer_;
  int64_t step_ = 0;
};

struct LoadedCheckpoint {
  RunConfig config;
  std::unique_ptr<ModelPair> model;
  int64_t step = 0;
};

/// Reads the config and weights of a checkpoint (no optimizer state).
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Raw config text stored in a checkpoint.
std::string checkpoint_config_text(const std::filesystem::path& path);

}  // namespace fra
