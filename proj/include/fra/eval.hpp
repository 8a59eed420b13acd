#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fra/augmentation.hpp"
#include "fra/config.hpp"
#include "fra/data.hpp"
#include "fra/networks.hpp"

namespace fra {

struct LabeledImages {
  std::string task;
  ImageBatch images;     // [n, 3, H, W] in [0, 1]
  torch::Tensor labels;  // [n] int64
};

/// Synthetic mouth-open (1) vs mouth-closed (0) classification set.
LabeledImages synthetic_probe_set(const SyntheticFaceSpec& spec, int64_t count, uint64_t seed);

/// Flat folder with a labels.csv of "file,label" rows (header optional).
LabeledImages load_labeled_folder(const std::filesystem::path& dir, int64_t image_size);

/// Order-sensitive hash of every parameter and buffer of `module`.
uint64_t parameter_checksum(const torch::nn::Module& module);

/// Pooled encoder features [n, C] of deterministically resized, normalized
/// images. The encoder is put in eval mode and never receives gradients.
torch::Tensor extract_features(Encoder& encoder, const ImageBatch& images,
                               const AugmentationConfig& aug, int64_t chunk = 64);

struct ProbeReport {
  std::string task;
  double accuracy = 0.0;
  double train_accuracy = 0.0;
  int64_t n_train = 0;
  int64_t n_test = 0;
  bool frozen_encoder = true;
  int64_t epochs = 0;
  double lr = 0.0;
  uint64_t seed = 0;
  uint64_t encoder_checksum_before = 0;
  uint64_t encoder_checksum_after = 0;

  std::string to_json() const;
};

/// Trains a single linear layer (softmax regression, Adam, cosine learning
/// rate, zero initialization) on standardized pooled features of a frozen
/// encoder. The split and minibatch order depend only on `seed`.
ProbeReport linear_probe(Encoder& encoder, const LabeledImages& data, const AugmentationConfig& aug,
                         const EvalConfig& cfg, uint64_t seed);

/// Probe of the online encoder stored in a checkpoint.
ProbeReport linear_probe(const std::filesystem::path& checkpoint, const LabeledImages& data,
                         uint64_t seed);

/// Heatmaps of one image through a branch (eval mode), bilinearly upsampled
/// to the image resolution. image [3, H, W] -> [N, H, W].
torch::Tensor predict_heatmaps(BranchImpl& branch, const torch::Tensor& image,
                               const AugmentationConfig& aug, double temperature);

struct HeatmapExport {
  std::vector<std::filesystem::path> files;
  std::vector<torch::Tensor> heatmaps;  // one [N, H, W] per image
};

/// Writes, per named image: N grayscale heatmap PNGs (each min-max scaled to
/// [0, 1]), one overlay PNG, and a raw tensor archive "<name>_heatmaps.pt".
HeatmapExport export_heatmaps(BranchImpl& branch,
                              const std::vector<std::pair<std::string, torch::Tensor>>& images,
                              const std::filesystem::path& out_dir, const AugmentationConfig& aug,
                              double temperature);

HeatmapExport export_heatmaps(const std::filesystem::path& checkpoint,
                              const std::vector<std::filesystem::path>& image_paths,
                              const std::filesystem::path& out_dir);

/// Reads a "<name>_heatmaps.pt" archive back.
torch::Tensor load_heatmap_archive(const std::filesystem::path& path);

/// Min-max scaling of each [H, W] channel to [0, 1]; constant channels map to 0.
torch::Tensor minmax_channels(const torch::Tensor& heatmaps);

/// Pixels at or above the value where the descending cumulative mass first
/// reaches `quantile` of the total. Ties at the threshold are all kept, so a
/// binary heatmap selects exactly its support. Returns bool [H, W].
torch::Tensor mass_quantile_mask(const torch::Tensor& heatmap, double quantile);

/// Max-score assignment of rows to columns (rectangular allowed). Returns,
/// for each row, its column or -1.
std::vector<int64_t> hungarian_maximize(const std::vector<std::vector<double>>& score);

struct DiscoveryReport {
  int64_t n_images = 0;
  double quantile = 0.5;
  std::vector<std::string> part_names;
  std::vector<std::vector<double>> iou;   // [N heatmaps][n_parts], mean over images
  std::vector<int64_t> part_to_heatmap;   // -1 when unmatched
  std::vector<double> part_iou;           // 0 for unmatched parts
  double mean_iou = 0.0;
  double uniform_baseline_iou = 0.0;

  std::string to_json() const;
};

/// IoU of thresholded heatmaps against binary part masks, Hungarian-matched
/// on the image-averaged IoU matrix. heatmaps[i] is [N, S, S], masks[i] is
/// [P, S, S].
DiscoveryReport score_discovery(const std::vector<torch::Tensor>& heatmaps,
                                const std::vector<torch::Tensor>& masks, double quantile);

/// Generates `count` synthetic faces, predicts heatmaps and scores them.
DiscoveryReport score_discovery(BranchImpl& branch, const SyntheticFaceSpec& spec, int64_t count,
                                uint64_t seed, const AugmentationConfig& aug, double temperature,
                                double quantile);

DiscoveryReport score_discovery(const std::filesystem::path& checkpoint, const SyntheticFaceSpec& spec,
                                int64_t count, uint64_t seed, double quantile);

/// IoU of a uniform heatmap against each part: every pixel ties at the
/// threshold, so the region is the whole S x S canvas and a part of area a
/// scores a / (S * S) for any quantile. Averaged over parts and images.
double uniform_baseline_iou(const std::vector<torch::Tensor>& masks, double quantile);

}  // namespace fra
