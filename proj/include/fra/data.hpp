#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "fra/common.hpp"
#include "fra/config.hpp"

namespace fra {

/// Parameters of the synthetic face generator: Gaussian-soft part blobs
/// (eyes, nose, mouth, brows, chin accent) on a shaded oval.
struct SyntheticFaceSpec {
  int64_t canvas_size = 96;
  int64_t n_parts = 7;
  double part_position_jitter = 0.04;  // fraction of canvas
  double part_scale_jitter = 0.15;     // relative radius change
  int64_t color_palette_seed = 0;
  double mouth_open_prob = 0.5;

  static SyntheticFaceSpec from_config(const DataConfig& cfg);
  void validate() const;
};

inline constexpr int64_t kMaxParts = 7;
const char* part_name(int64_t index);

struct SyntheticSample {
  torch::Tensor image;       // [3, S, S] in [0, 1]
  torch::Tensor part_masks;  // [n_parts, S, S], uint8 0/1
  bool mouth_open = false;
  std::vector<std::array<double, 4>> parts;  // centre x, centre y, radius x, radius y (pixels)
};

/// Sample `index` of the synthetic stream defined by (spec, seed).
SyntheticSample synth_sample(const SyntheticFaceSpec& spec, int64_t index, uint64_t seed);

struct SyntheticBatch {
  ImageBatch images;
  torch::Tensor part_masks;  // [B, n_parts, S, S], uint8
  torch::Tensor labels;      // [B], int64; 1 = mouth open
};

/// Samples 0..batch_size-1 of the stream (spec, seed).
SyntheticBatch synth_batch(const SyntheticFaceSpec& spec, int64_t batch_size, uint64_t seed);

struct DatasetManifest {
  std::string source_kind;  // synthetic | folder
  int64_t item_count = 0;
  int64_t skipped_count = 0;
  int64_t image_size = 0;
  std::string checksum;  // file-list checksum, or the generator seed
  std::vector<std::string> warnings;

  std::string to_json() const;
};

/// Random-access image source. image(i) returns [3, S, S] float in [0, 1].
class ImageDataset {
 public:
  virtual ~ImageDataset() = default;
  virtual int64_t size() const = 0;
  virtual torch::Tensor image(int64_t index) const = 0;
  virtual const DatasetManifest& manifest() const = 0;
};

/// Synthetic faces rendered on first access and kept as 8-bit images, so
/// image(i) matches what materialize_synthetic writes to disk.
class SyntheticDataset : public ImageDataset {
 public:
  SyntheticDataset(SyntheticFaceSpec spec, int64_t count, uint64_t seed);
  int64_t size() const override { return count_; }
  torch::Tensor image(int64_t index) const override;
  const DatasetManifest& manifest() const override { return manifest_; }
  SyntheticSample sample(int64_t index) const;

 private:
  SyntheticFaceSpec spec_;
  int64_t count_;
  uint64_t seed_;
  DatasetManifest manifest_;
  mutable std::mutex cache_mu_;
  mutable std::vector<torch::Tensor> cache_;  // uint8 [3, S, S]
};

/// Decoded, resized images from a flat directory. Files that fail to decode
/// are skipped, counted, and reported as warnings.
class FolderDataset : public ImageDataset {
 public:
  FolderDataset(const std::filesystem::path& dir, int64_t image_size);
  int64_t size() const override { return static_cast<int64_t>(images_.size()); }
  torch::Tensor image(int64_t index) const override;
  const DatasetManifest& manifest() const override { return manifest_; }
  const std::vector<std::filesystem::path>& files() const { return files_; }

 private:
  std::vector<torch::Tensor> images_;  // uint8 [3, S, S]
  std::vector<std::filesystem::path> files_;
  DatasetManifest manifest_;
};

std::shared_ptr<FolderDataset> load_folder(const std::filesystem::path& dir, int64_t image_size);

/// Builds the dataset selected by `cfg.data`.
std::shared_ptr<ImageDataset> make_dataset(const RunConfig& cfg);

/// Deterministic epoch-wise shuffling into batches; the last batch of an
/// epoch may be partial. Step k maps to a fixed batch for a given seed, so
/// iteration can resume anywhere.
class BatchSampler {
 public:
  BatchSampler(int64_t dataset_size, int64_t batch_size, uint64_t seed);

  int64_t batches_per_epoch() const;
  std::vector<int64_t> epoch_order(int64_t epoch) const;
  std::vector<std::vector<int64_t>> epoch_batches(int64_t epoch) const;
  std::vector<int64_t> indices_for_step(int64_t step) const;

 private:
  int64_t size_;
  int64_t batch_;
  uint64_t seed_;
};

ImageBatch gather_batch(const ImageDataset& data, const std::vector<int64_t>& indices);

/// Rounds a [3, H, W] float image in [0, 1] to 8 bits and back.
torch::Tensor quantize_8bit(const torch::Tensor& image);

/// Converts a [3, H, W] float image in [0, 1] to an 8-bit RGB PNG/JPEG/...
void write_image(const std::filesystem::path& path, const torch::Tensor& image);
/// Writes a single-channel [H, W] float image in [0, 1].
void write_gray(const std::filesystem::path& path, const torch::Tensor& image);
/// Decodes an image file to [3, H, W] float in [0, 1]; throws IoError.
torch::Tensor read_image(const std::filesystem::path& path);

bool has_image_extension(const std::filesystem::path& path);

/// Writes images, part masks, labels.csv and manifest.json for `count`
/// synthetic samples. Returns the number of images written.
int64_t materialize_synthetic(const SyntheticFaceSpec& spec, int64_t count, uint64_t seed,
                              const std::filesystem::path& out_dir);

}  // namespace fra
