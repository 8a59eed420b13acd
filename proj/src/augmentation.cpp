#include "fra/augmentation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace fra {
namespace aug {
namespace F = torch::nn::functional;

CropBox sample_resized_crop(int64_t height, int64_t width, const AugmentationConfig& cfg,
                            std::mt19937_64& rng) {
  const double area = static_cast<double>(height * width);
  std::uniform_real_distribution<double> scale_dist(cfg.crop_scale_range[0],
                                                    cfg.crop_scale_range[1]);
  std::uniform_real_distribution<double> log_ratio_dist(std::log(cfg.crop_ratio_range[0]),
                                                        std::log(cfg.crop_ratio_range[1]));
  for (int attempt = 0; attempt < 10; ++attempt) {
    double target = area * scale_dist(rng);
    double ratio = std::exp(log_ratio_dist(rng));
    auto w = static_cast<int64_t>(std::lround(std::sqrt(target * ratio)));
    auto h = static_cast<int64_t>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      std::uniform_int_distribution<int64_t> top(0, height - h);
      std::uniform_int_distribution<int64_t> left(0, width - w);
      int64_t t = top(rng);
      return {t, left(rng), h, w};
    }
  }
  // Fallback: central crop with the aspect ratio clamped into range.
  double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  int64_t w = width, h = height;
  if (in_ratio < cfg.crop_ratio_range[0]) {
    h = std::lround(static_cast<double>(w) / cfg.crop_ratio_range[0]);
  } else if (in_ratio > cfg.crop_ratio_range[1]) {
    w = std::lround(static_cast<double>(h) * cfg.crop_ratio_range[1]);
  }
  h = std::min(h, height);
  w = std::min(w, width);
  return {(height - h) / 2, (width - w) / 2, h, w};
}

torch::Tensor crop_resize(const torch::Tensor& img, const CropBox& box, int64_t size) {
  auto patch = img.slice(1, box.top, box.top + box.height).slice(2, box.left, box.left + box.width);
  if (box.height == size && box.width == size) return patch.contiguous();
  return F::interpolate(patch.unsqueeze(0), F::InterpolateFuncOptions()
                                                .size(std::vector<int64_t>{size, size})
                                                .mode(torch::kBilinear)
                                                .align_corners(false))
      .squeeze(0);
}

torch::Tensor to_grayscale(const torch::Tensor& img) {
  auto g = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2];
  return g.unsqueeze(0).expand({3, -1, -1}).contiguous();
}

torch::Tensor adjust_brightness(const torch::Tensor& img, double factor) {
  return (img * factor).clamp(0.0, 1.0);
}

torch::Tensor adjust_contrast(const torch::Tensor& img, double factor) {
  auto mean = to_grayscale(img)[0].mean();
  return (img * factor + mean * (1.0 - factor)).clamp(0.0, 1.0);
}

torch::Tensor adjust_saturation(const torch::Tensor& img, double factor) {
  return (img * factor + to_grayscale(img) * (1.0 - factor)).clamp(0.0, 1.0);
}

namespace {

// Scalar HSV round trip, all channels in [0, 1].
void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float maxc = std::max({r, g, b});
  const float minc = std::min({r, g, b});
  v = maxc;
  const float range = maxc - minc;
  if (range <= 0.0f) {
    h = 0.0f;
    s = 0.0f;
    return;
  }
  s = range / maxc;
  const float rc = (maxc - r) / range;
  const float gc = (maxc - g) / range;
  const float bc = (maxc - b) / range;
  float hue;
  if (maxc == r) {
    hue = bc - gc;
  } else if (maxc == g) {
    hue = 2.0f + rc - bc;
  } else {
    hue = 4.0f + gc - rc;
  }
  h = std::fmod(hue / 6.0f + 1.0f, 1.0f);
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float scaled = h * 6.0f;
  const float sector = std::floor(scaled);
  const float f = scaled - sector;
  const int i = static_cast<int>(sector) % 6;
  const float p = std::clamp(v * (1.0f - s), 0.0f, 1.0f);
  const float q = std::clamp(v * (1.0f - s * f), 0.0f, 1.0f);
  const float t = std::clamp(v * (1.0f - s * (1.0f - f)), 0.0f, 1.0f);
  switch (i < 0 ? i + 6 : i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

}  // namespace

torch::Tensor adjust_hue(const torch::Tensor& img, double shift) {
  auto src = img.to(torch::kFloat32).contiguous();
  auto out = torch::empty_like(src);
  const int64_t plane = src.size(1) * src.size(2);
  const float* in = src.data_ptr<float>();
  float* dst = out.data_ptr<float>();
  const auto delta = static_cast<float>(shift);
  for (int64_t i = 0; i < plane; ++i) {
    float h, s, v;
    rgb_to_hsv(in[i], in[plane + i], in[2 * plane + i], h, s, v);
    h = h + delta;
    h -= std::floor(h);
    hsv_to_rgb(h, s, v, dst[i], dst[plane + i], dst[2 * plane + i]);
  }
  return out.to(img.dtype());
}

torch::Tensor gaussian_blur(const torch::Tensor& img, int64_t kernel_size, double sigma) {
  if (kernel_size < 1 || kernel_size % 2 == 0) throw DomainError("blur kernel size must be odd");
  const int64_t radius = kernel_size / 2;
  std::vector<float> kernel(static_cast<size_t>(kernel_size));
  float total = 0.0f;
  for (int64_t i = 0; i < kernel_size; ++i) {
    const double x = static_cast<double>(i - radius);
    kernel[static_cast<size_t>(i)] = static_cast<float>(std::exp(-(x * x) / (2.0 * sigma * sigma)));
    total += kernel[static_cast<size_t>(i)];
  }
  for (auto& k : kernel) k /= total;

  auto src = img.to(torch::kFloat32).contiguous();
  const int64_t channels = src.size(0), height = src.size(1), width = src.size(2);
  // reflect padding, falling back to clamping for tiny images
  auto reflect = [](int64_t i, int64_t n) {
    if (n == 1) return int64_t{0};
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  std::vector<int64_t> col_index(static_cast<size_t>(width + 2 * radius));
  std::vector<int64_t> row_index(static_cast<size_t>(height + 2 * radius));
  for (int64_t i = 0; i < width + 2 * radius; ++i) col_index[static_cast<size_t>(i)] = reflect(i - radius, width);
  for (int64_t i = 0; i < height + 2 * radius; ++i) row_index[static_cast<size_t>(i)] = reflect(i - radius, height);
  auto out = torch::empty_like(src);
  const float* in = src.data_ptr<float>();
  float* dst = out.data_ptr<float>();
  std::vector<float> padded(static_cast<size_t>(width + 2 * radius));
  std::vector<float> mid(static_cast<size_t>(height * width));
  for (int64_t c = 0; c < channels; ++c) {
    const float* plane = in + c * height * width;
    for (int64_t y = 0; y < height; ++y) {
      const float* row = plane + y * width;
      for (size_t i = 0; i < padded.size(); ++i) padded[i] = row[col_index[i]];
      for (int64_t x = 0; x < width; ++x) {
        float acc = 0.0f;
        for (int64_t k = 0; k < kernel_size; ++k) acc += kernel[static_cast<size_t>(k)] * padded[static_cast<size_t>(x + k)];
        mid[static_cast<size_t>(y * width + x)] = acc;
      }
    }
    float* oplane = dst + c * height * width;
    for (int64_t y = 0; y < height; ++y) {
      float* orow = oplane + y * width;
      std::fill(orow, orow + width, 0.0f);
      for (int64_t k = 0; k < kernel_size; ++k) {
        const float w = kernel[static_cast<size_t>(k)];
        const float* srow = mid.data() + row_index[static_cast<size_t>(y + k)] * width;
        for (int64_t x = 0; x < width; ++x) orow[x] += w * srow[x];
      }
    }
  }
  return out.to(img.dtype());
}

torch::Tensor solarize(const torch::Tensor& img, double threshold) {
  return torch::where(img >= threshold, 1.0 - img, img);
}

torch::Tensor normalize(const torch::Tensor& img, const std::array<double, 3>& mean,
                        const std::array<double, 3>& std) {
  auto m = torch::tensor({mean[0], mean[1], mean[2]}, img.options()).view({3, 1, 1});
  auto s = torch::tensor({std[0], std[1], std[2]}, img.options()).view({3, 1, 1});
  return (img - m) / s;
}

}  // namespace aug

namespace {

void check_batch(const ImageBatch& batch) {
  if (batch.empty()) throw DomainError("generate_views: empty batch");
  require_rank(batch.pixels, 4, "generate_views");
  if (batch.pixels.size(1) != 3) throw DomainError("generate_views: expected 3 channels");
}

torch::Tensor augment_one(torch::Tensor img, const AugmentationConfig& cfg, std::mt19937_64& rng,
                          int view_index) {
  using namespace aug;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto box = sample_resized_crop(img.size(1), img.size(2), cfg, rng);
  img = crop_resize(img, box, cfg.crop_size);

  if (unit(rng) < cfg.flip_prob) img = img.flip({2});

  if (unit(rng) < cfg.jitter_prob) {
    std::array<int, 4> order{0, 1, 2, 3};
    std::shuffle(order.begin(), order.end(), rng);
    const auto& js = cfg.jitter_strengths;
    for (int op : order) {
      if (js[op] <= 0.0) continue;
      if (op == 3) {
        img = adjust_hue(img, std::uniform_real_distribution<double>(-js[3], js[3])(rng));
        continue;
      }
      double factor = std::uniform_real_distribution<double>(std::max(0.0, 1.0 - js[op]),
                                                             1.0 + js[op])(rng);
      if (op == 0) img = adjust_brightness(img, factor);
      if (op == 1) img = adjust_contrast(img, factor);
      if (op == 2) img = adjust_saturation(img, factor);
    }
  }

  if (unit(rng) < cfg.grayscale_prob) img = to_grayscale(img);

  if (unit(rng) < cfg.blur_probs[view_index]) {
    int64_t k = std::max<int64_t>(3, static_cast<int64_t>(0.1 * cfg.crop_size) | 1);
    img = gaussian_blur(img, k, std::uniform_real_distribution<double>(0.1, 2.0)(rng));
  }

  if (unit(rng) < cfg.solarize_probs[view_index]) img = solarize(img);

  return normalize(img, cfg.normalization_mean, cfg.normalization_std);
}

}  // namespace

ImageBatch augment_view(const ImageBatch& batch, const AugmentationConfig& cfg, uint64_t seed,
                        int view_index) {
  check_batch(batch);
  cfg.validate();
  if (view_index != 0 && view_index != 1) throw DomainError("augment_view: view index 0 or 1");
  torch::NoGradGuard no_grad;
  auto src = batch.pixels.to(torch::kFloat32);
  std::vector<torch::Tensor> out;
  out.reserve(batch.size());
  for (int64_t b = 0; b < batch.size(); ++b) {
    std::mt19937_64 rng(derive_seed(seed, {static_cast<uint64_t>(view_index),
                                           static_cast<uint64_t>(b)}));
    out.push_back(augment_one(src[b], cfg, rng, view_index));
  }
  return {torch::stack(out)};
}

ViewPair generate_views(const ImageBatch& batch, const AugmentationConfig& cfg, uint64_t seed) {
  return {augment_view(batch, cfg, seed, 0), augment_view(batch, cfg, seed, 1)};
}

ImageBatch resize_normalize(const ImageBatch& batch, const AugmentationConfig& cfg) {
  check_batch(batch);
  torch::NoGradGuard no_grad;
  auto x = batch.pixels.to(torch::kFloat32);
  if (x.size(2) != cfg.crop_size || x.size(3) != cfg.crop_size) {
    x = torch::nn::functional::interpolate(
        x, torch::nn::functional::InterpolateFuncOptions()
               .size(std::vector<int64_t>{cfg.crop_size, cfg.crop_size})
               .mode(torch::kBilinear)
               .align_corners(false));
  }
  auto m = torch::tensor({cfg.normalization_mean[0], cfg.normalization_mean[1],
                          cfg.normalization_mean[2]})
               .view({1, 3, 1, 1});
  auto s = torch::tensor({cfg.normalization_std[0], cfg.normalization_std[1],
                          cfg.normalization_std[2]})
               .view({1, 3, 1, 1});
  return {(x - m) / s};
}

}  // namespace fra
