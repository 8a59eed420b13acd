#include "fra/data.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

namespace fra {
namespace fs = std::filesystem;

namespace {

struct PartTemplate {
  const char* name;
  double cx, cy;   // fraction of canvas
  double rx, ry;   // fraction of canvas
};

// Order: 2 eyes, nose, mouth, 2 brows, chin accent.
constexpr std::array<PartTemplate, kMaxParts> kParts = {{
    {"left_eye", 0.36, 0.43, 0.070, 0.040},
    {"right_eye", 0.64, 0.43, 0.070, 0.040},
    {"nose", 0.50, 0.57, 0.045, 0.085},
    {"mouth", 0.50, 0.74, 0.130, 0.028},
    {"left_brow", 0.36, 0.33, 0.090, 0.022},
    {"right_brow", 0.64, 0.33, 0.090, 0.022},
    {"chin", 0.50, 0.89, 0.110, 0.035},
}};

constexpr double kMouthOpenRx = 0.095;
constexpr double kMouthOpenRy = 0.065;

std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

torch::Tensor rgb(double r, double g, double b) {
  return torch::tensor({r, g, b}, torch::kFloat32).view({3, 1, 1});
}

}  // namespace

const char* part_name(int64_t index) {
  if (index < 0 || index >= kMaxParts) throw DomainError("part index out of range");
  return kParts[static_cast<size_t>(index)].name;
}

SyntheticFaceSpec SyntheticFaceSpec::from_config(const DataConfig& cfg) {
  SyntheticFaceSpec spec;
  spec.canvas_size = cfg.image_size;
  spec.n_parts = cfg.n_parts;
  spec.part_position_jitter = cfg.position_jitter;
  spec.part_scale_jitter = cfg.scale_jitter;
  spec.color_palette_seed = cfg.palette_seed;
  spec.mouth_open_prob = cfg.mouth_open_prob;
  return spec;
}

void SyntheticFaceSpec::validate() const {
  if (canvas_size < 16) throw ConfigError("synthetic canvas must be at least 16 pixels");
  if (n_parts < 1 || n_parts > kMaxParts) throw ConfigError("synthetic n_parts must lie in [1,7]");
  if (part_position_jitter < 0 || part_scale_jitter < 0 || part_scale_jitter >= 1) {
    throw ConfigError("synthetic jitter out of range");
  }
  if (!(mouth_open_prob >= 0 && mouth_open_prob <= 1)) {
    throw ConfigError("synthetic mouth_open_prob must lie in [0,1]");
  }
}

SyntheticSample synth_sample(const SyntheticFaceSpec& spec, int64_t index, uint64_t seed) {
  spec.validate();
  torch::NoGradGuard no_grad;
  const int64_t s = spec.canvas_size;
  const double size = static_cast<double>(s);
  std::mt19937_64 geo(derive_seed(seed, {static_cast<uint64_t>(index), 1}));
  std::mt19937_64 pal(derive_seed(static_cast<uint64_t>(spec.color_palette_seed),
                                  {seed, static_cast<uint64_t>(index), 2}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SyntheticSample out;
  out.mouth_open = unit(geo) < spec.mouth_open_prob;

  auto coords = (torch::arange(s, torch::kFloat32) + 0.5f);
  auto ys = coords.view({s, 1}).expand({s, s});
  auto xs = coords.view({1, s}).expand({s, s});

  // background with a vertical gradient
  auto bg_top = rgb(unit(pal) * 0.6 + 0.2, unit(pal) * 0.6 + 0.2, unit(pal) * 0.6 + 0.2);
  auto bg_bottom = bg_top * (0.7 + 0.3 * unit(pal));
  auto t = (ys / size).unsqueeze(0);
  auto img = bg_top * (1 - t) + bg_bottom * t;

  // face oval with soft edge and left-right shading
  const double skin_tone = 0.45 + 0.45 * unit(pal);
  auto skin = rgb(skin_tone, skin_tone * (0.75 + 0.15 * unit(pal)), skin_tone * (0.6 + 0.2 * unit(pal)));
  auto fx = (xs - 0.5 * size) / (0.34 * size);
  auto fy = (ys - 0.55 * size) / (0.44 * size);
  auto radial = torch::sqrt(fx * fx + fy * fy);
  auto face_alpha = torch::sigmoid((1.0 - radial) * 25.0).unsqueeze(0);
  auto shade = (1.0 - 0.2 * fx.clamp(-1, 1)).unsqueeze(0);
  img = img * (1 - face_alpha) + (skin * shade).clamp(0, 1) * face_alpha;

  const double dark = 0.05 + 0.2 * unit(pal);
  std::array<torch::Tensor, kMaxParts> colors = {
      rgb(dark, dark * 0.8, dark * 0.7),
      rgb(dark, dark * 0.8, dark * 0.7),
      skin * 0.7,
      rgb(0.55 + 0.3 * unit(pal), 0.1 + 0.15 * unit(pal), 0.15 + 0.15 * unit(pal)),
      rgb(dark * 1.5, dark * 1.1, dark * 0.8),
      rgb(dark * 1.5, dark * 1.1, dark * 0.8),
      skin * 0.75,
  };

  std::vector<torch::Tensor> masks;
  for (int64_t p = 0; p < spec.n_parts; ++p) {
    const auto& tpl = kParts[static_cast<size_t>(p)];
    double rx = tpl.rx, ry = tpl.ry;
    if (p == 3 && out.mouth_open) {
      rx = kMouthOpenRx;
      ry = kMouthOpenRy;
    }
    double scale = 1.0 + spec.part_scale_jitter * (2.0 * unit(geo) - 1.0);
    rx *= scale * size;
    ry *= scale * size;
    double cx = tpl.cx * size + spec.part_position_jitter * size * gauss(geo);
    double cy = tpl.cy * size + spec.part_position_jitter * size * gauss(geo);
    cx = std::clamp(cx, rx + 1.0, size - rx - 1.0);
    cy = std::clamp(cy, ry + 1.0, size - ry - 1.0);
    out.parts.push_back({cx, cy, rx, ry});
    auto dx = (xs - cx) / rx;
    auto dy = (ys - cy) / ry;
    auto d2 = dx * dx + dy * dy;
    // alpha = 0.5 exactly on the ellipse with radii (rx, ry)
    auto alpha = torch::exp(-d2 * std::log(2.0));
    img = img * (1 - alpha.unsqueeze(0)) + colors[static_cast<size_t>(p)] * alpha.unsqueeze(0);
    masks.push_back((d2 <= 1.0).to(torch::kUInt8));
  }
  out.image = img.clamp(0.0, 1.0).contiguous();
  out.part_masks = torch::stack(masks);
  return out;
}

SyntheticBatch synth_batch(const SyntheticFaceSpec& spec, int64_t batch_size, uint64_t seed) {
  if (batch_size < 1) throw DomainError("synth_batch: batch size must be positive");
  std::vector<torch::Tensor> images, masks;
  std::vector<int64_t> labels;
  for (int64_t i = 0; i < batch_size; ++i) {
    auto sample = synth_sample(spec, i, seed);
    images.push_back(sample.image);
    masks.push_back(sample.part_masks);
    labels.push_back(sample.mouth_open ? 1 : 0);
  }
  return {{torch::stack(images)}, torch::stack(masks), torch::tensor(labels, torch::kInt64)};
}

std::string DatasetManifest::to_json() const {
  nlohmann::json j = {{"source_kind", source_kind}, {"item_count", item_count},
                      {"skipped_count", skipped_count}, {"image_size", image_size},
                      {"checksum", checksum},         {"warnings", warnings}};
  return j.dump(2);
}

SyntheticDataset::SyntheticDataset(SyntheticFaceSpec spec, int64_t count, uint64_t seed)
    : spec_(spec), count_(count), seed_(seed) {
  spec_.validate();
  if (count < 1) throw DatasetError("synthetic dataset needs at least one item");
  manifest_.source_kind = "synthetic";
  manifest_.item_count = count;
  manifest_.image_size = spec.canvas_size;
  manifest_.checksum = "seed:" + std::to_string(seed);
}

torch::Tensor quantize_8bit(const torch::Tensor& image) {
  return (image.clamp(0, 1) * 255.0).round().div(255.0).to(torch::kFloat32);
}

torch::Tensor SyntheticDataset::image(int64_t index) const {
  if (index < 0 || index >= count_) throw DomainError("synthetic dataset index out of range");
  {
    std::lock_guard lock(cache_mu_);
    if (cache_.empty()) cache_.resize(static_cast<size_t>(count_));
    const auto& cached = cache_[static_cast<size_t>(index)];
    if (cached.defined()) return cached.to(torch::kFloat32).div(255.0);
  }
  auto u8 = (sample(index).image * 255.0).round().to(torch::kUInt8);
  std::lock_guard lock(cache_mu_);
  cache_[static_cast<size_t>(index)] = u8;
  return u8.to(torch::kFloat32).div(255.0);
}

SyntheticSample SyntheticDataset::sample(int64_t index) const {
  if (index < 0 || index >= count_) throw DomainError("synthetic dataset index out of range");
  return synth_sample(spec_, index, seed_);
}

bool has_image_extension(const fs::path& path) {
  static const std::array<std::string, 11> exts = {".png", ".jpg",  ".jpeg", ".bmp",
                                                   ".ppm", ".pgm",  ".pnm",  ".tif",
                                                   ".tiff", ".webp", ".gif"};
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return std::find(exts.begin(), exts.end(), ext) != exts.end();
}

torch::Tensor read_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot decode image '" + path.string() + "'");
  cv::Mat rgb_mat;
  cv::cvtColor(bgr, rgb_mat, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb_mat.data, {rgb_mat.rows, rgb_mat.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

void write_image(const fs::path& path, const torch::Tensor& image) {
  auto u8 = (image.detach().to(torch::kFloat32).clamp(0, 1) * 255.0)
                .round()
                .to(torch::kUInt8)
                .permute({1, 2, 0})
                .contiguous();
  cv::Mat rgb_mat(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC3, u8.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(rgb_mat, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image '" + path.string() + "'");
}

void write_gray(const fs::path& path, const torch::Tensor& image) {
  auto u8 = (image.detach().to(torch::kFloat32).clamp(0, 1) * 255.0).round().to(torch::kUInt8).contiguous();
  cv::Mat m(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1, u8.data_ptr());
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write image '" + path.string() + "'");
}

FolderDataset::FolderDataset(const fs::path& dir, int64_t image_size) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("dataset folder '" + dir.string() + "' is not readable");
  std::vector<fs::path> candidates;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (entry.is_regular_file() && has_image_extension(entry.path())) {
      candidates.push_back(entry.path());
    }
  }
  if (ec) throw IoError("cannot list '" + dir.string() + "': " + ec.message());
  std::sort(candidates.begin(), candidates.end());

  manifest_.source_kind = "folder";
  manifest_.image_size = image_size;
  uint64_t h = fnv1a(nullptr, 0);
  for (const auto& path : candidates) {
    auto name = path.filename().string();
    h = fnv1a(name.data(), name.size(), h);
    auto bytes = static_cast<uint64_t>(fs::file_size(path, ec));
    h = fnv1a(&bytes, sizeof bytes, h);

    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
      auto msg = "skipping undecodable image '" + path.string() + "'";
      std::cerr << "[warn] " << msg << "\n";
      manifest_.warnings.push_back(msg);
      ++manifest_.skipped_count;
      continue;
    }
    cv::Mat resized, rgb_mat;
    cv::resize(bgr, resized, cv::Size(static_cast<int>(image_size), static_cast<int>(image_size)), 0,
               0, cv::INTER_LINEAR);
    cv::cvtColor(resized, rgb_mat, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(rgb_mat.data, {image_size, image_size, 3}, torch::kUInt8).clone();
    images_.push_back(t.permute({2, 0, 1}).contiguous());
    files_.push_back(path);
  }
  manifest_.item_count = static_cast<int64_t>(images_.size());
  manifest_.checksum = hex64(h);
  if (images_.empty()) throw DatasetError("no decodable images in '" + dir.string() + "'");
}

torch::Tensor FolderDataset::image(int64_t index) const {
  if (index < 0 || index >= size()) throw DomainError("folder dataset index out of range");
  return images_[static_cast<size_t>(index)].to(torch::kFloat32).div(255.0);
}

std::shared_ptr<FolderDataset> load_folder(const fs::path& dir, int64_t image_size) {
  return std::make_shared<FolderDataset>(dir, image_size);
}

std::shared_ptr<ImageDataset> make_dataset(const RunConfig& cfg) {
  if (cfg.data.source == "folder") return load_folder(cfg.data.folder, cfg.data.image_size);
  return std::make_shared<SyntheticDataset>(SyntheticFaceSpec::from_config(cfg.data),
                                            cfg.data.synthetic_count,
                                            static_cast<uint64_t>(cfg.seed));
}

BatchSampler::BatchSampler(int64_t dataset_size, int64_t batch_size, uint64_t seed)
    : size_(dataset_size), batch_(batch_size), seed_(seed) {
  if (dataset_size < 1) throw DatasetError("batch sampler: empty dataset");
  if (batch_size < 1) throw DomainError("batch sampler: batch size must be positive");
}

int64_t BatchSampler::batches_per_epoch() const { return (size_ + batch_ - 1) / batch_; }

std::vector<int64_t> BatchSampler::epoch_order(int64_t epoch) const {
  std::vector<int64_t> order(static_cast<size_t>(size_));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed_, {static_cast<uint64_t>(epoch), 0x5eedULL}));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<std::vector<int64_t>> BatchSampler::epoch_batches(int64_t epoch) const {
  auto order = epoch_order(epoch);
  std::vector<std::vector<int64_t>> out;
  for (int64_t start = 0; start < size_; start += batch_) {
    auto end = std::min(size_, start + batch_);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

std::vector<int64_t> BatchSampler::indices_for_step(int64_t step) const {
  const int64_t per_epoch = batches_per_epoch();
  const int64_t epoch = step / per_epoch;
  const int64_t within = step % per_epoch;
  auto order = epoch_order(epoch);
  const int64_t start = within * batch_;
  const int64_t end = std::min(size_, start + batch_);
  return {order.begin() + start, order.begin() + end};
}

ImageBatch gather_batch(const ImageDataset& data, const std::vector<int64_t>& indices) {
  if (indices.empty()) throw DomainError("gather_batch: no indices");
  std::vector<torch::Tensor> images;
  images.reserve(indices.size());
  for (auto i : indices) images.push_back(data.image(i));
  return {torch::stack(images)};
}

int64_t materialize_synthetic(const SyntheticFaceSpec& spec, int64_t count, uint64_t seed,
                              const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  std::ofstream labels(out_dir / "labels.csv");
  if (!labels) throw IoError("cannot write '" + (out_dir / "labels.csv").string() + "'");
  labels << "file,label\n";
  for (int64_t i = 0; i < count; ++i) {
    auto sample = synth_sample(spec, i, seed);
    std::ostringstream name;
    name << "img_" << std::setw(5) << std::setfill('0') << i;
    write_image(out_dir / (name.str() + ".png"), sample.image);
    for (int64_t p = 0; p < spec.n_parts; ++p) {
      write_gray(out_dir / "masks" / (name.str() + "_" + part_name(p) + ".png"),
                 sample.part_masks[p].to(torch::kFloat32));
    }
    labels << name.str() << ".png," << (sample.mouth_open ? 1 : 0) << "\n";
  }
  DatasetManifest manifest;
  manifest.source_kind = "synthetic";
  manifest.item_count = count;
  manifest.image_size = spec.canvas_size;
  manifest.checksum = "seed:" + std::to_string(seed);
  std::ofstream(out_dir / "manifest.json") << manifest.to_json() << "\n";
  return count;
}

}  // namespace fra
