// fra: pre-training, probing, heatmap export and part discovery.
#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fra/config.hpp"
#include "fra/data.hpp"
#include "fra/eval.hpp"
#include "fra/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::optional<int64_t> seed;
  std::vector<std::string> overrides;
};

std::vector<std::string> with_seed(const Globals& g) {
  auto overrides = g.overrides;
  if (g.seed) overrides.push_back("seed=" + std::to_string(*g.seed));
  return overrides;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw fra::IoError("cannot write '" + path.string() + "'");
  out << text << "\n";
  if (!out) throw fra::IoError("write failed for '" + path.string() + "'");
}

// Reports carry the resolved config they were produced under.
std::string wrap_report(const std::string& report_json, const fra::RunConfig& cfg,
                        const std::string& checkpoint) {
  nlohmann::json j;
  j["report"] = nlohmann::json::parse(report_json);
  j["checkpoint"] = checkpoint;
  j["config"] = cfg.serialize();
  return j.dump(2);
}

int run_pretrain(const Globals& g, const std::string& config_path, const std::string& resume) {
  std::unique_ptr<fra::Trainer> trainer;
  if (!resume.empty()) {
    std::optional<fra::RunConfig> cfg;
    if (!config_path.empty() || !g.overrides.empty() || g.seed) {
      // Start from the stored config unless a file replaces it.
      auto base = config_path.empty() ? fra::checkpoint_config_text(resume) : std::string{};
      cfg = config_path.empty() ? fra::resolve_config_text(base, with_seed(g))
                                : fra::resolve_config(config_path, with_seed(g));
    }
    trainer = fra::Trainer::resume(resume, cfg);
    std::cerr << "resumed at step " << trainer->step() << " from " << resume << "\n";
  } else {
    trainer = std::make_unique<fra::Trainer>(fra::resolve_config(config_path, with_seed(g)));
  }
  auto data = fra::make_dataset(trainer->config());
  for (const auto& w : data->manifest().warnings) std::cerr << "warning: " << w << "\n";
  auto final_path = trainer->fit(*data);
  std::cout << final_path.string() << "\n";
  return 0;
}

fra::LabeledImages probe_data(const fra::RunConfig& cfg, const std::string& data, uint64_t seed) {
  if (data == "synthetic") {
    return fra::synthetic_probe_set(fra::SyntheticFaceSpec::from_config(cfg.data),
                                    cfg.eval.probe_count, fra::derive_seed(seed, {0x9a0beULL}));
  }
  return fra::load_labeled_folder(data, cfg.data.image_size);
}

int run_probe(const Globals& g, const std::string& ckpt, const std::string& data,
              const std::string& out, bool compare_random) {
  auto loaded = fra::load_checkpoint(ckpt);
  auto cfg = fra::resolve_config_text(loaded.config.serialize(), with_seed(g));
  const auto seed = static_cast<uint64_t>(cfg.seed);
  auto labeled = probe_data(cfg, data, seed);
  auto report = fra::linear_probe(loaded.model->online->encoder, labeled, cfg.augmentation, cfg.eval, seed);
  auto j = nlohmann::json::parse(wrap_report(report.to_json(), cfg, ckpt));
  if (compare_random) {
    torch::manual_seed(static_cast<uint64_t>(fra::derive_seed(seed, {0x7a4dULL})));
    fra::ModelPair random_model(cfg.model);
    auto baseline = fra::linear_probe(random_model.online->encoder, labeled, cfg.augmentation,
                                      cfg.eval, seed);
    j["random_init_report"] = nlohmann::json::parse(baseline.to_json());
  }
  write_text(out, j.dump(2));
  std::cout << "accuracy " << report.accuracy << " (n_train " << report.n_train << ", n_test "
            << report.n_test << ") -> " << out << "\n";
  return 0;
}

std::vector<fs::path> collect_images(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    fs::path p(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && fra::has_image_extension(e.path())) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.push_back(p);
    }
  }
  if (files.empty()) throw fra::IoError("no input images found");
  return files;
}

int run_heatmaps(const std::string& ckpt, const std::vector<std::string>& images,
                 const std::string& out) {
  auto result = fra::export_heatmaps(ckpt, collect_images(images), out);
  std::cout << result.files.size() << " files written to " << out << "\n";
  return 0;
}

int run_discover(const Globals& g, const std::string& ckpt, const std::string& spec_path,
                 const std::string& out) {
  auto spec_cfg = fra::resolve_config(spec_path, with_seed(g));
  auto loaded = fra::load_checkpoint(ckpt);
  auto spec = fra::SyntheticFaceSpec::from_config(spec_cfg.data);
  auto report = fra::score_discovery(*loaded.model->online, spec, spec_cfg.eval.discovery_count,
                                     static_cast<uint64_t>(spec_cfg.seed),
                                     loaded.config.augmentation,
                                     loaded.config.loss.assign_temperature,
                                     spec_cfg.eval.discovery_quantile);
  write_text(out, wrap_report(report.to_json(), loaded.config, ckpt));
  std::cout << "mean IoU " << report.mean_iou << " (uniform baseline " << report.uniform_baseline_iou
            << ") -> " << out << "\n";
  return 0;
}

int run_synth(const Globals& g, const std::string& spec_path, const std::string& out,
              std::optional<int64_t> count) {
  auto cfg = fra::resolve_config(spec_path, with_seed(g));
  auto spec = fra::SyntheticFaceSpec::from_config(cfg.data);
  auto n = fra::materialize_synthetic(spec, count.value_or(cfg.data.synthetic_count),
                                      static_cast<uint64_t>(cfg.seed), out);
  std::cout << n << " images written to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Facial region awareness pre-training"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Global seed (overrides the config's seed)");
  app.add_option("--set", g.overrides, "Config override key=value (repeatable)")
      ->allow_extra_args(false)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.fallthrough();

  std::string config_path, resume;
  auto* pretrain = app.add_subcommand("pretrain", "Self-supervised pre-training");
  pretrain->add_option("--config", config_path, "YAML run config");
  pretrain->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  std::string ckpt, data, probe_out = "probe_report.json";
  bool compare_random = false;
  auto* probe = app.add_subcommand("probe", "Linear probe on frozen encoder features");
  probe->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  probe->add_option("--data", data, "Folder with labels.csv, or 'synthetic'")->required();
  probe->add_option("--out", probe_out, "Report path")->capture_default_str();
  probe->add_flag("--compare-random", compare_random, "Also probe a randomly initialized encoder");

  std::vector<std::string> images;
  std::string heat_out;
  auto* heatmaps = app.add_subcommand("heatmaps", "Export region heatmaps");
  heatmaps->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  heatmaps->add_option("--images", images, "Image files or directories")->required();
  heatmaps->add_option("--out", heat_out, "Output directory")->required();

  std::string spec_path, discover_out = "discovery_report.json";
  auto* discover = app.add_subcommand("discover", "Score heatmaps against synthetic part masks");
  discover->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  discover->add_option("--spec", spec_path, "YAML config whose data section is the synthetic spec")
      ->required()
      ->check(CLI::ExistingFile);
  discover->add_option("--out", discover_out, "Report path")->capture_default_str();

  std::string synth_out;
  std::optional<int64_t> synth_count;
  auto* synth = app.add_subcommand("synth-data", "Write a synthetic dataset to disk");
  synth->add_option("--spec", spec_path, "YAML config whose data section is the synthetic spec")
      ->required()
      ->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--count", synth_count, "Number of images (default data.synthetic_count)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  try {
    if (pretrain->parsed()) return run_pretrain(g, config_path, resume);
    if (probe->parsed()) return run_probe(g, ckpt, data, probe_out, compare_random);
    if (heatmaps->parsed()) return run_heatmaps(ckpt, images, heat_out);
    if (discover->parsed()) return run_discover(g, ckpt, spec_path, discover_out);
    if (synth->parsed()) return run_synth(g, spec_path, synth_out, synth_count);
  } catch (const fra::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
