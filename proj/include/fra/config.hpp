#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace fra {

struct AugmentationConfig {
  int64_t crop_size = 96;
  std::array<double, 2> crop_scale_range{0.08, 1.0};
  std::array<double, 2> crop_ratio_range{3.0 / 4.0, 4.0 / 3.0};
  double flip_prob = 0.5;
  // brightness, contrast, saturation, hue
  std::array<double, 4> jitter_strengths{0.4, 0.4, 0.2, 0.1};
  double jitter_prob = 0.8;
  double grayscale_prob = 0.2;
  std::array<double, 2> blur_probs{1.0, 0.1};
  std::array<double, 2> solarize_probs{0.0, 0.2};
  std::array<double, 3> normalization_mean{0.485, 0.456, 0.406};
  std::array<double, 3> normalization_std{0.229, 0.224, 0.225};

  /// Throws ConfigError when a probability or range is invalid.
  void validate() const;
};

struct ModelConfig {
  // resnet_desk | resnet18 | resnet50
  std::string encoder = "resnet_desk";
  int64_t encoder_width = 32;
  int64_t embedding_dim = 256;
  int64_t projector_hidden = 512;
  int64_t predictor_hidden = 512;
  int64_t num_regions = 8;
  int64_t decoder_depth = 1;
  int64_t decoder_heads = 4;
  int64_t decoder_ffn = 512;
  // 0 means "same as embedding_dim"
  int64_t decoder_dim = 0;

  int64_t resolved_decoder_dim() const { return decoder_dim > 0 ? decoder_dim : embedding_dim; }
  void validate() const;
  /// Identifies the parameter topology; equal keys mean loadable weights.
  std::string topology_key() const;
};

struct LossConfig {
  double lambda_c = 0.5;
  double lambda_r = 0.1;
  double lambda_memax = 1.0;
  double assign_temperature = 0.1;
  int64_t sinkhorn_iters = 3;
  double sinkhorn_eps = 0.05;

  void validate() const;
};

struct TrainConfig {
  int64_t total_steps = 2000;
  int64_t batch_size = 32;
  std::string optimizer = "adamw";  // adamw | sgd
  double base_lr = 1e-3;
  double weight_decay = 1e-4;
  int64_t warmup_steps = 100;
  std::string tau_schedule = "cosine";  // cosine | constant
  double tau_base = 0.996;
  double tau_final = 1.0;
  int64_t checkpoint_every = 500;
  int64_t prefetch = 2;
  int64_t threads = 0;  // 0 leaves the torch default
  std::string out_dir = "runs/fra";

  void validate() const;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | folder
  std::string folder;
  int64_t image_size = 96;
  int64_t synthetic_count = 2048;
  int64_t n_parts = 7;
  double position_jitter = 0.04;
  double scale_jitter = 0.15;
  int64_t palette_seed = 0;
  double mouth_open_prob = 0.5;

  void validate() const;
};

struct EvalConfig {
  int64_t probe_epochs = 100;
  double probe_lr = 0.01;
  int64_t probe_batch = 64;
  double probe_train_fraction = 0.8;
  int64_t probe_count = 512;
  double discovery_quantile = 0.5;
  int64_t discovery_count = 64;

  void validate() const;
};

/// The full resolved configuration of a run.
struct RunConfig {
  AugmentationConfig augmentation;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  int64_t seed = 0;

  void validate() const;

  /// Canonical YAML text. resolve(serialize()) reproduces this config exactly.
  std::string serialize() const;

  /// Sets one dotted key from its textual value. Throws ConfigError on
  /// unknown keys (listing the nearest valid keys) or type mismatches.
  void set(const std::string& dotted_key, const std::string& value);
  std::string get(const std::string& dotted_key) const;

  static const std::vector<std::string>& keys();
  /// "paper" or "chosen" for each key.
  static std::string provenance(const std::string& dotted_key);
};

/// Applies precedence defaults < YAML text < overrides ("a.b=value").
RunConfig resolve_config_text(const std::string& yaml_text,
                              const std::vector<std::string>& overrides = {});

/// As resolve_config_text, reading the YAML from `path`. An empty path means
/// no file.
RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides = {});

/// Keys at minimal edit distance from `key`.
std::vector<std::string> nearest_keys(const std::string& key);

}  // namespace fra
