#pragma once

#include <cstdint>
#include <random>
#include <utility>

#include "fra/common.hpp"
#include "fra/config.hpp"

namespace fra {

/// Two independently augmented views of the same batch.
struct ViewPair {
  ImageBatch first;
  ImageBatch second;
};

/// BYOL-style asymmetric two-view augmentation. View v of image b draws from
/// its own stream seeded by (seed, v, b), so the result depends only on the
/// inputs, the config and the seed.
ViewPair generate_views(const ImageBatch& batch, const AugmentationConfig& cfg, uint64_t seed);

/// Augments a single view; `view_index` selects the per-view blur/solarize
/// probabilities (0 or 1).
ImageBatch augment_view(const ImageBatch& batch, const AugmentationConfig& cfg, uint64_t seed,
                        int view_index);

/// Deterministic resize to crop_size followed by normalization. This is the
/// evaluation-time transform.
ImageBatch resize_normalize(const ImageBatch& batch, const AugmentationConfig& cfg);

namespace aug {

// Primitive transforms on a single [3, H, W] image in [0, 1].

struct CropBox {
  int64_t top = 0;
  int64_t left = 0;
  int64_t height = 0;
  int64_t width = 0;
};

CropBox sample_resized_crop(int64_t height, int64_t width, const AugmentationConfig& cfg,
                            std::mt19937_64& rng);
torch::Tensor crop_resize(const torch::Tensor& img, const CropBox& box, int64_t size);
torch::Tensor adjust_brightness(const torch::Tensor& img, double factor);
torch::Tensor adjust_contrast(const torch::Tensor& img, double factor);
torch::Tensor adjust_saturation(const torch::Tensor& img, double factor);
torch::Tensor adjust_hue(const torch::Tensor& img, double shift);
torch::Tensor to_grayscale(const torch::Tensor& img);
torch::Tensor gaussian_blur(const torch::Tensor& img, int64_t kernel_size, double sigma);
torch::Tensor solarize(const torch::Tensor& img, double threshold = 0.5);
torch::Tensor normalize(const torch::Tensor& img, const std::array<double, 3>& mean,
                        const std::array<double, 3>& std);

}  // namespace aug
}  // namespace fra
