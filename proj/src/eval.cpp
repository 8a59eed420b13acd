#include "fra/eval.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "fra/trainer.hpp"

namespace fra {
namespace fs = std::filesystem;
namespace F = torch::nn::functional;

LabeledImages synthetic_probe_set(const SyntheticFaceSpec& spec, int64_t count, uint64_t seed) {
  auto batch = synth_batch(spec, count, seed);
  return {"mouth_open", {quantize_8bit(batch.images.pixels)}, batch.labels};
}

LabeledImages load_labeled_folder(const fs::path& dir, int64_t image_size) {
  std::ifstream in(dir / "labels.csv");
  if (!in) throw IoError("cannot read '" + (dir / "labels.csv").string() + "'");
  std::vector<torch::Tensor> images;
  std::vector<int64_t> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto comma = line.find(',');
    if (line.empty() || comma == std::string::npos) continue;
    auto file = line.substr(0, comma);
    auto label_text = line.substr(comma + 1);
    int64_t label = 0;
    try {
      size_t used = 0;
      label = std::stoll(label_text, &used);
      if (used != label_text.size()) continue;
    } catch (const std::exception&) {
      continue;  // header row
    }
    auto img = read_image(dir / file);
    img = F::interpolate(img.unsqueeze(0), F::InterpolateFuncOptions()
                                               .size(std::vector<int64_t>{image_size, image_size})
                                               .mode(torch::kBilinear)
                                               .align_corners(false))
              .squeeze(0);
    images.push_back(img);
    labels.push_back(label);
  }
  if (images.empty()) throw DatasetError("no labeled images in '" + dir.string() + "'");
  return {dir.filename().string(), {torch::stack(images)}, torch::tensor(labels, torch::kInt64)};
}

uint64_t parameter_checksum(const torch::nn::Module& module) {
  uint64_t h = fnv1a(nullptr, 0);
  for (const auto& item : module.named_parameters()) {
    auto t = item.value().detach().contiguous();
    h = fnv1a(item.key().data(), item.key().size(), h);
    h = fnv1a(t.data_ptr(), t.numel() * t.element_size(), h);
  }
  for (const auto& item : module.named_buffers()) {
    auto t = item.value().detach().contiguous();
    h = fnv1a(t.data_ptr(), t.numel() * t.element_size(), h);
  }
  return h;
}

torch::Tensor extract_features(Encoder& encoder, const ImageBatch& images,
                               const AugmentationConfig& aug, int64_t chunk) {
  torch::NoGradGuard no_grad;
  encoder->eval();
  std::vector<torch::Tensor> feats;
  for (int64_t start = 0; start < images.size(); start += chunk) {
    auto end = std::min(images.size(), start + chunk);
    auto x = resize_normalize({images.pixels.slice(0, start, end)}, aug).pixels;
    auto dtype = encoder->parameters().front().scalar_type();
    feats.push_back(encoder->forward(x.to(dtype)).pooled.to(torch::kFloat32));
  }
  return torch::cat(feats);
}

std::string ProbeReport::to_json() const {
  nlohmann::json j = {{"task", task},
                      {"accuracy", accuracy},
                      {"train_accuracy", train_accuracy},
                      {"n_train", n_train},
                      {"n_test", n_test},
                      {"frozen_encoder", frozen_encoder},
                      {"epochs", epochs},
                      {"lr", lr},
                      {"schedule", "cosine"},
                      {"optimizer", "adam"},
                      {"seed", seed},
                      {"encoder_checksum_before", encoder_checksum_before},
                      {"encoder_checksum_after", encoder_checksum_after}};
  return j.dump(2);
}

ProbeReport linear_probe(Encoder& encoder, const LabeledImages& data, const AugmentationConfig& aug,
                         const EvalConfig& cfg, uint64_t seed) {
  const int64_t n = data.images.size();
  if (n == 0) throw DomainError("linear_probe: no examples");
  if (!data.labels.defined() || data.labels.numel() != n) {
    throw DomainError("linear_probe: label count does not match image count");
  }
  ProbeReport report;
  report.task = data.task;
  report.epochs = cfg.probe_epochs;
  report.lr = cfg.probe_lr;
  report.seed = seed;
  report.encoder_checksum_before = parameter_checksum(*encoder);

  auto features = extract_features(encoder, data.images, aug);
  auto labels = data.labels.to(torch::kInt64);

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {0x9b0eULL}));
  std::shuffle(order.begin(), order.end(), rng);
  if (n < 2) throw DomainError("linear_probe: need at least two examples to split");
  auto n_train = static_cast<int64_t>(std::floor(cfg.probe_train_fraction * static_cast<double>(n)));
  n_train = std::clamp<int64_t>(n_train, 1, n - 1);
  auto idx = torch::tensor(order, torch::kInt64);
  auto train_idx = idx.slice(0, 0, n_train);
  auto test_idx = idx.slice(0, n_train, n);
  auto x_train = features.index_select(0, train_idx);
  auto y_train = labels.index_select(0, train_idx);
  auto x_test = features.index_select(0, test_idx);
  auto y_test = labels.index_select(0, test_idx);

  auto mean = x_train.mean(0, true);
  auto stdev = x_train.std(0, true, true) + 1e-6;
  x_train = (x_train - mean) / stdev;
  x_test = (x_test - mean) / stdev;

  const int64_t classes = labels.max().item<int64_t>() + 1;
  torch::nn::Linear head(features.size(1), classes);
  {
    torch::NoGradGuard no_grad;
    head->weight.zero_();
    head->bias.zero_();
  }
  torch::optim::Adam opt(head->parameters(), torch::optim::AdamOptions(cfg.probe_lr));
  const int64_t batches = (n_train + cfg.probe_batch - 1) / cfg.probe_batch;
  const int64_t total_iters = cfg.probe_epochs * batches;
  int64_t iter = 0;
  std::vector<int64_t> perm(static_cast<size_t>(n_train));
  for (int64_t epoch = 0; epoch < cfg.probe_epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto p = torch::tensor(perm, torch::kInt64);
    for (int64_t b = 0; b < batches; ++b, ++iter) {
      const double lr =
          cfg.probe_lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(iter) / total_iters));
      for (auto& group : opt.param_groups()) group.options().set_lr(lr);
      auto sel = p.slice(0, b * cfg.probe_batch, std::min(n_train, (b + 1) * cfg.probe_batch));
      auto loss = F::cross_entropy(head(x_train.index_select(0, sel)), y_train.index_select(0, sel));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  torch::NoGradGuard no_grad;
  auto accuracy = [&](const torch::Tensor& x, const torch::Tensor& y) {
    return head(x).argmax(1).eq(y).to(torch::kFloat64).mean().item<double>();
  };
  report.accuracy = accuracy(x_test, y_test);
  report.train_accuracy = accuracy(x_train, y_train);
  report.n_train = n_train;
  report.n_test = n - n_train;
  report.encoder_checksum_after = parameter_checksum(*encoder);
  report.frozen_encoder = report.encoder_checksum_before == report.encoder_checksum_after;
  return report;
}

ProbeReport linear_probe(const fs::path& checkpoint, const LabeledImages& data, uint64_t seed) {
  auto loaded = load_checkpoint(checkpoint);
  return linear_probe(loaded.model->online->encoder, data, loaded.config.augmentation,
                      loaded.config.eval, seed);
}

torch::Tensor predict_heatmaps(BranchImpl& branch, const torch::Tensor& image,
                               const AugmentationConfig& aug, double temperature) {
  require_rank(image, 3, "predict_heatmaps");
  torch::NoGradGuard no_grad;
  branch.eval();
  auto dtype = branch.parameters().front().scalar_type();
  auto x = resize_normalize({image.unsqueeze(0)}, aug).pixels.to(dtype);
  auto encoded = branch.encode(x);
  auto q = branch.head->forward(encoded.feature_map);
  auto field = compute_assignments(branch.project_dense(encoded.feature_map), q, temperature);
  auto m = F::interpolate(field.heatmaps, F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{image.size(1), image.size(2)})
                                              .mode(torch::kBilinear)
                                              .align_corners(false));
  return m.squeeze(0).to(torch::kFloat32);
}

torch::Tensor minmax_channels(const torch::Tensor& heatmaps) {
  auto flat = heatmaps.flatten(1);
  auto lo = std::get<0>(flat.min(1, true));
  auto hi = std::get<0>(flat.max(1, true));
  auto range = hi - lo;
  auto scaled = torch::where(range > 1e-12, (flat - lo) / range.clamp_min(1e-12), torch::zeros_like(flat));
  return scaled.view(heatmaps.sizes());
}

namespace {

// Distinct colours for overlay composites.
const std::array<std::array<float, 3>, 8> kPalette = {{
    {0.90f, 0.10f, 0.10f}, {0.10f, 0.60f, 0.90f}, {0.10f, 0.80f, 0.20f}, {0.95f, 0.75f, 0.10f},
    {0.70f, 0.20f, 0.90f}, {0.95f, 0.45f, 0.10f}, {0.10f, 0.85f, 0.80f}, {0.90f, 0.30f, 0.70f},
}};

torch::Tensor overlay(const torch::Tensor& image, const torch::Tensor& heatmaps) {
  auto winner = heatmaps.argmax(0);  // [H, W]
  auto colours = torch::zeros_like(image);
  for (int64_t m = 0; m < heatmaps.size(0); ++m) {
    const auto& c = kPalette[static_cast<size_t>(m) % kPalette.size()];
    auto mask = (winner == m).to(image.dtype());
    for (int ch = 0; ch < 3; ++ch) colours[ch] += mask * c[static_cast<size_t>(ch)];
  }
  auto strength = std::get<0>(heatmaps.max(0)).unsqueeze(0);
  auto alpha = 0.25 + 0.5 * strength;
  return image * (1 - alpha) + colours * alpha;
}

}  // namespace

HeatmapExport export_heatmaps(BranchImpl& branch,
                              const std::vector<std::pair<std::string, torch::Tensor>>& images,
                              const fs::path& out_dir, const AugmentationConfig& aug,
                              double temperature) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  HeatmapExport out;
  for (const auto& [name, image] : images) {
    auto heat = predict_heatmaps(branch, image, aug, temperature);
    auto scaled = minmax_channels(heat);
    for (int64_t m = 0; m < heat.size(0); ++m) {
      auto path = out_dir / (name + "_heatmap_" + std::to_string(m) + ".png");
      write_gray(path, scaled[m]);
      out.files.push_back(path);
    }
    auto overlay_path = out_dir / (name + "_overlay.png");
    write_image(overlay_path, overlay(image.to(torch::kFloat32), heat));
    out.files.push_back(overlay_path);
    auto raw_path = out_dir / (name + "_heatmaps.pt");
    try {
      torch::save(heat, raw_path.string());
    } catch (const std::exception& e) {
      throw IoError("cannot write '" + raw_path.string() + "': " + e.what());
    }
    out.files.push_back(raw_path);
    out.heatmaps.push_back(heat);
  }
  return out;
}

HeatmapExport export_heatmaps(const fs::path& checkpoint, const std::vector<fs::path>& image_paths,
                              const fs::path& out_dir) {
  auto loaded = load_checkpoint(checkpoint);
  std::vector<std::pair<std::string, torch::Tensor>> images;
  for (const auto& p : image_paths) images.emplace_back(p.stem().string(), read_image(p));
  return export_heatmaps(*loaded.model->online, images, out_dir, loaded.config.augmentation,
                         loaded.config.loss.assign_temperature);
}

torch::Tensor load_heatmap_archive(const fs::path& path) {
  torch::Tensor t;
  try {
    torch::load(t, path.string());
  } catch (const std::exception& e) {
    throw IoError("cannot read '" + path.string() + "': " + e.what());
  }
  return t;
}

torch::Tensor mass_quantile_mask(const torch::Tensor& heatmap, double quantile) {
  require_rank(heatmap, 2, "mass_quantile_mask");
  if (!(quantile > 0.0 && quantile <= 1.0)) throw DomainError("mass_quantile_mask: quantile must lie in (0,1]");
  auto flat = heatmap.detach().flatten().to(torch::kFloat64);
  auto values = std::get<0>(flat.sort(/*stable=*/true, /*dim=*/0, /*descending=*/true));
  const double total = values.sum().item<double>();
  if (total <= 0.0) return torch::zeros(heatmap.sizes(), torch::kBool);
  auto cumulative = values.cumsum(0);
  auto reached = (cumulative >= quantile * total * (1.0 - 1e-12)).nonzero();
  const int64_t last = reached.numel() ? reached[0][0].item<int64_t>() : flat.size(0) - 1;
  const double threshold = values[last].item<double>();
  return (heatmap.detach().to(torch::kFloat64) >= threshold).view(heatmap.sizes());
}

std::vector<int64_t> hungarian_maximize(const std::vector<std::vector<double>>& score) {
  const size_t rows = score.size();
  const size_t cols = rows ? score[0].size() : 0;
  if (rows == 0 || cols == 0) return std::vector<int64_t>(rows, -1);
  const size_t n = std::max(rows, cols);
  double best = 0.0;
  for (const auto& r : score) {
    if (r.size() != cols) throw DomainError("hungarian: ragged score matrix");
    for (double v : r) best = std::max(best, v);
  }
  // Minimise cost = best - score on the zero-padded square matrix.
  auto cost = [&](size_t i, size_t j) {
    return (i < rows && j < cols) ? best - score[i][j] : best;
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (size_t i = 1; i <= n; ++i) {
    p[0] = i;
    size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const size_t i0 = p[j0];
      double delta = inf;
      size_t j1 = 0;
      for (size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int64_t> assignment(rows, -1);
  for (size_t j = 1; j <= n; ++j) {
    if (p[j] >= 1 && p[j] <= rows && j <= cols) assignment[p[j] - 1] = static_cast<int64_t>(j - 1);
  }
  return assignment;
}

std::string DiscoveryReport::to_json() const {
  nlohmann::json j = {{"n_images", n_images},
                      {"quantile", quantile},
                      {"part_names", part_names},
                      {"iou_matrix", iou},
                      {"part_to_heatmap", part_to_heatmap},
                      {"part_iou", part_iou},
                      {"mean_iou", mean_iou},
                      {"uniform_baseline_iou", uniform_baseline_iou},
                      {"metric_note", "artifact-defined heatmap quality score on synthetic parts"}};
  return j.dump(2);
}

double uniform_baseline_iou(const std::vector<torch::Tensor>& masks, double quantile) {
  if (masks.empty()) throw DomainError("uniform_baseline_iou: no masks");
  if (!(quantile > 0.0 && quantile <= 1.0)) throw DomainError("uniform_baseline_iou: quantile must lie in (0,1]");
  double total = 0.0;
  int64_t count = 0;
  for (const auto& m : masks) {
    require_rank(m, 3, "uniform_baseline_iou");
    // all pixels tie, so the thresholded region is the whole canvas
    const double canvas = static_cast<double>(m.size(1) * m.size(2));
    for (int64_t p = 0; p < m.size(0); ++p) {
      total += (m[p] > 0).sum().item<double>() / canvas;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

DiscoveryReport score_discovery(const std::vector<torch::Tensor>& heatmaps,
                                const std::vector<torch::Tensor>& masks, double quantile) {
  if (heatmaps.empty() || heatmaps.size() != masks.size()) {
    throw DomainError("score_discovery: need one mask stack per heatmap stack");
  }
  const int64_t n = heatmaps[0].size(0);
  const int64_t parts = masks[0].size(0);
  DiscoveryReport report;
  report.n_images = static_cast<int64_t>(heatmaps.size());
  report.quantile = quantile;
  for (int64_t p = 0; p < parts; ++p) report.part_names.push_back(part_name(p));
  auto iou_sum = torch::zeros({n, parts}, torch::kFloat64);
  for (size_t i = 0; i < heatmaps.size(); ++i) {
    require_rank(heatmaps[i], 3, "score_discovery(heatmaps)");
    require_rank(masks[i], 3, "score_discovery(masks)");
    if (heatmaps[i].size(1) != masks[i].size(1) || heatmaps[i].size(2) != masks[i].size(2)) {
      throw DomainError("score_discovery: heatmap and mask resolutions differ");
    }
    std::vector<torch::Tensor> regions;
    for (int64_t m = 0; m < n; ++m) regions.push_back(mass_quantile_mask(heatmaps[i][m], quantile));
    auto region = torch::stack(regions).flatten(1).to(torch::kFloat64);       // [N, HW]
    auto truth = (masks[i] > 0).flatten(1).to(torch::kFloat64);               // [P, HW]
    auto inter = torch::matmul(region, truth.t());                           // [N, P]
    auto uni = region.sum(1, true) + truth.sum(1).unsqueeze(0) - inter;
    iou_sum += inter / uni.clamp_min(1.0);
  }
  auto iou = iou_sum / static_cast<double>(heatmaps.size());
  report.iou.assign(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(parts)));
  for (int64_t m = 0; m < n; ++m) {
    for (int64_t p = 0; p < parts; ++p) report.iou[m][p] = iou[m][p].item<double>();
  }
  auto heat_to_part = hungarian_maximize(report.iou);
  report.part_to_heatmap.assign(static_cast<size_t>(parts), -1);
  report.part_iou.assign(static_cast<size_t>(parts), 0.0);
  for (int64_t m = 0; m < n; ++m) {
    const auto p = heat_to_part[static_cast<size_t>(m)];
    if (p < 0) continue;
    report.part_to_heatmap[static_cast<size_t>(p)] = m;
    report.part_iou[static_cast<size_t>(p)] = report.iou[m][p];
  }
  report.mean_iou = std::accumulate(report.part_iou.begin(), report.part_iou.end(), 0.0) /
                    static_cast<double>(parts);
  report.uniform_baseline_iou = uniform_baseline_iou(masks, quantile);
  return report;
}

DiscoveryReport score_discovery(BranchImpl& branch, const SyntheticFaceSpec& spec, int64_t count,
                                uint64_t seed, const AugmentationConfig& aug, double temperature,
                                double quantile) {
  std::vector<torch::Tensor> heatmaps, masks;
  for (int64_t i = 0; i < count; ++i) {
    auto sample = synth_sample(spec, i, seed);
    heatmaps.push_back(predict_heatmaps(branch, quantize_8bit(sample.image), aug, temperature));
    masks.push_back(sample.part_masks);
  }
  return score_discovery(heatmaps, masks, quantile);
}

DiscoveryReport score_discovery(const fs::path& checkpoint, const SyntheticFaceSpec& spec,
                                int64_t count, uint64_t seed, double quantile) {
  auto loaded = load_checkpoint(checkpoint);
  return score_discovery(*loaded.model->online, spec, count, seed, loaded.config.augmentation,
                         loaded.config.loss.assign_temperature, quantile);
}

}  // namespace fra
