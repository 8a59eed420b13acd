#include "fra/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fra/prefetch_queue.hpp"

namespace fra {
namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "fra-checkpoint-v1";

std::string archive_key(const std::string& name) {
  std::string key = name;
  std::replace(key.begin(), key.end(), '.', '/');
  return key;
}

double scalar(const torch::Tensor& t) { return t.detach().item<double>(); }

}  // namespace

torch::Tensor relation_targets(const torch::Tensor& teacher_similarity, const LossConfig& cfg) {
  require_rank(teacher_similarity, 4, "relation_targets");
  torch::NoGradGuard no_grad;
  const auto b = teacher_similarity.size(0), n = teacher_similarity.size(1);
  const auto h = teacher_similarity.size(2), w = teacher_similarity.size(3);
  auto logits = (teacher_similarity.detach() / cfg.assign_temperature).permute({0, 2, 3, 1}).reshape({-1, n});
  auto balanced = sinkhorn_normalize(logits, cfg.sinkhorn_iters, cfg.sinkhorn_eps);
  return balanced.view({b, h, w, n}).permute({0, 3, 1, 2}).contiguous();
}

LossTerms compute_objective(ModelPair& model, const torch::Tensor& view1, const torch::Tensor& view2,
                            const LossConfig& cfg) {
  const double temp = cfg.assign_temperature;
  auto online1 = model.online->forward(view1, temp);
  auto online2 = model.online->forward(view2, temp);
  BranchOutput target1, target2;
  {
    torch::NoGradGuard no_grad;
    target1 = model.momentum->forward(view1, temp);
    target2 = model.momentum->forward(view2, temp);
  }

  LossTerms terms;
  const auto& m1 = online1.assignments.heatmaps;
  const auto& m2 = online2.assignments.heatmaps;
  auto t1 = relation_targets(target1.assignments.similarity, cfg);
  auto t2 = relation_targets(target2.assignments.similarity, cfg);
  terms.relation_ce = semantic_relation_loss(m1, t1, m2, t2);
  auto flat = [](const torch::Tensor& m) { return m.transpose(0, 1).flatten(1).transpose(0, 1); };
  terms.memax = 0.5 * (memax_regularizer(flat(m1)) + memax_regularizer(flat(m2)));
  terms.relation = terms.relation_ce + cfg.lambda_memax * terms.memax;

  EmbeddingMap global_pred = [&](const torch::Tensor& z) { return model.global_predictor->forward(z); };
  EmbeddingMap local_pred = [&](const torch::Tensor& z) { return model.local_predictor->forward(z); };
  auto sim12 = consistency_sim(online1.global_embedding, target2.global_embedding,
                               online1.local_embeddings, target2.local_embeddings, global_pred,
                               local_pred, cfg.lambda_c);
  auto sim21 = consistency_sim(online2.global_embedding, target1.global_embedding,
                               online2.local_embeddings, target1.local_embeddings, global_pred,
                               local_pred, cfg.lambda_c);
  terms.consistency = semantic_consistency_loss(sim12, sim21);
  terms.total = total_loss(terms.consistency, terms.relation, cfg.lambda_r);

  terms.cluster_entropy =
      0.5 * (cluster_usage_entropy(m1) + cluster_usage_entropy(m2));
  terms.global_cos = 0.5 * (scalar(sim12.global_cos) + scalar(sim21.global_cos));
  terms.local_cos = 0.5 * (scalar(sim12.local_cos) + scalar(sim21.local_cos));
  return terms;
}

double learning_rate_at(const TrainConfig& cfg, int64_t step) {
  if (step < cfg.warmup_steps) {
    return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  const double span = static_cast<double>(std::max<int64_t>(1, cfg.total_steps - cfg.warmup_steps));
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

double tau_at(const TrainConfig& cfg, int64_t step) {
  if (cfg.tau_schedule == "constant" || cfg.total_steps == 0) return cfg.tau_base;
  const double progress =
      std::clamp(static_cast<double>(step) / static_cast<double>(cfg.total_steps), 0.0, 1.0);
  return cfg.tau_final - (cfg.tau_final - cfg.tau_base) * (std::cos(M_PI * progress) + 1.0) / 2.0;
}

std::string StepReport::to_json() const {
  nlohmann::json j = {{"step", step},
                      {"loss", loss},
                      {"loss_consistency", consistency},
                      {"loss_relation", relation},
                      {"relation_ce", relation_ce},
                      {"memax", memax},
                      {"cluster_entropy", cluster_entropy},
                      {"global_cos", global_cos},
                      {"local_cos", local_cos},
                      {"tau", tau},
                      {"lr", lr},
                      {"wall_ms", wall_ms}};
  return j.dump();
}

namespace {

std::unique_ptr<torch::optim::Optimizer> make_optimizer(const TrainConfig& cfg,
                                                        std::vector<torch::Tensor> params) {
  if (cfg.optimizer == "sgd") {
    return std::make_unique<torch::optim::SGD>(
        std::move(params),
        torch::optim::SGDOptions(cfg.base_lr).momentum(0.9).weight_decay(cfg.weight_decay));
  }
  return std::make_unique<torch::optim::AdamW>(
      std::move(params), torch::optim::AdamWOptions(cfg.base_lr).weight_decay(cfg.weight_decay));
}

// Optimizer state keyed by parameter position rather than by tensor address,
// so identical states serialize to identical bytes.
void write_optimizer_state(torch::serialize::OutputArchive& out, torch::optim::Optimizer& opt) {
  const auto& params = opt.param_groups().at(0).params();
  auto& state = opt.state();
  int64_t stored = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    auto it = state.find(params[i].unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto key = std::to_string(i) + "/";
    if (auto* adam = dynamic_cast<torch::optim::AdamWParamState*>(it->second.get())) {
      out.write(key + "step", c10::IValue(adam->step()));
      out.write(key + "exp_avg", adam->exp_avg());
      out.write(key + "exp_avg_sq", adam->exp_avg_sq());
      if (adam->max_exp_avg_sq().defined()) out.write(key + "max_exp_avg_sq", adam->max_exp_avg_sq());
    } else if (auto* sgd = dynamic_cast<torch::optim::SGDParamState*>(it->second.get())) {
      out.write(key + "momentum_buffer", sgd->momentum_buffer());
    } else {
      throw TopologyError("unsupported optimizer state");
    }
    ++stored;
  }
  out.write("param_count", c10::IValue(static_cast<int64_t>(params.size())));
  out.write("stored", c10::IValue(stored));
}

void read_optimizer_state(torch::serialize::InputArchive& in, torch::optim::Optimizer& opt) {
  const auto& params = opt.param_groups().at(0).params();
  c10::IValue count;
  in.read("param_count", count);
  if (count.toInt() != static_cast<int64_t>(params.size())) {
    throw TopologyError("optimizer state covers a different number of parameters");
  }
  const bool adam = dynamic_cast<torch::optim::AdamW*>(&opt) != nullptr;
  auto& state = opt.state();
  state.clear();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto key = std::to_string(i) + "/";
    if (adam) {
      c10::IValue step;
      if (!in.try_read(key + "step", step)) continue;
      auto s = std::make_unique<torch::optim::AdamWParamState>();
      torch::Tensor m, v, vmax;
      in.read(key + "exp_avg", m);
      in.read(key + "exp_avg_sq", v);
      s->step(step.toInt());
      s->exp_avg(m);
      s->exp_avg_sq(v);
      if (in.try_read(key + "max_exp_avg_sq", vmax)) s->max_exp_avg_sq(vmax);
      state[params[i].unsafeGetTensorImpl()] = std::move(s);
    } else {
      torch::Tensor buf;
      if (!in.try_read(key + "momentum_buffer", buf)) continue;
      auto s = std::make_unique<torch::optim::SGDParamState>();
      s->momentum_buffer(buf);
      state[params[i].unsafeGetTensorImpl()] = std::move(s);
    }
  }
}

}  // namespace

Trainer::Trainer(const RunConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.train.threads > 0) torch::set_num_threads(static_cast<int>(cfg_.train.threads));
  torch::manual_seed(static_cast<uint64_t>(cfg_.seed));
  model_ = std::make_unique<ModelPair>(cfg_.model);
  optimizer_ = make_optimizer(cfg_.train, model_->online_parameters());
}

StepReport Trainer::train_step(const ImageBatch& batch) {
  const auto start = std::chrono::steady_clock::now();
  if (batch.size() < 2) throw DomainError("train_step: batch needs at least two images");
  auto views = generate_views(batch, cfg_.augmentation,
                              derive_seed(static_cast<uint64_t>(cfg_.seed),
                                          {static_cast<uint64_t>(step_), 0xa06ULL}));
  model_->train(true);
  const double lr = learning_rate_at(cfg_.train, step_);
  for (auto& group : optimizer_->param_groups()) group.options().set_lr(lr);

  auto terms = compute_objective(*model_, views.first.pixels, views.second.pixels, cfg_.loss);

  StepReport report;
  report.step = step_ + 1;
  report.loss = scalar(terms.total);
  report.consistency = scalar(terms.consistency);
  report.relation = scalar(terms.relation);
  report.relation_ce = scalar(terms.relation_ce);
  report.memax = scalar(terms.memax);
  report.cluster_entropy = terms.cluster_entropy;
  report.global_cos = terms.global_cos;
  report.local_cos = terms.local_cos;
  report.lr = lr;
  report.tau = tau_at(cfg_.train, step_);

  if (!std::isfinite(report.loss) || !std::isfinite(report.consistency) ||
      !std::isfinite(report.relation)) {
    std::ostringstream diag;
    diag << "non-finite loss at step " << report.step << " (input hash "
         << tensor_hash(batch.pixels) << "): " << report.to_json();
    std::error_code ec;
    fs::create_directories(cfg_.train.out_dir, ec);
    std::ofstream(fs::path(cfg_.train.out_dir) /
                  ("nonfinite_step_" + std::to_string(report.step) + ".json"))
        << nlohmann::json{{"step", report.step},
                          {"input_hash", tensor_hash(batch.pixels)},
                          {"scalars", nlohmann::json::parse(report.to_json(), nullptr, false)}}
               .dump(2);
    throw NumericError(diag.str());
  }

  optimizer_->zero_grad();
  terms.total.backward();
  optimizer_->step();
  model_->ema_update(report.tau);
  ++step_;

  report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                       .count();
  return report;
}

fs::path Trainer::fit(const ImageDataset& data) {
  const fs::path out_dir = cfg_.train.out_dir;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir.string() + "': " + ec.message());
  std::ofstream(out_dir / "config.yaml") << cfg_.serialize();
  std::ofstream(out_dir / "manifest.json") << data.manifest().to_json() << "\n";
  std::ofstream log(out_dir / "train_log.jsonl", std::ios::app);
  if (!log) throw IoError("cannot open log '" + (out_dir / "train_log.jsonl").string() + "'");

  BatchSampler sampler(data.size(), cfg_.train.batch_size, static_cast<uint64_t>(cfg_.seed));
  Prefetcher<ImageBatch> prefetch(step_, cfg_.train.total_steps,
                                  static_cast<size_t>(cfg_.train.prefetch), [&](int64_t k) {
                                    return gather_batch(data, sampler.indices_for_step(k));
                                  });
  while (auto batch = prefetch.next()) {
    auto report = train_step(*batch);
    log << report.to_json() << "\n";
    log.flush();
    if (cfg_.train.checkpoint_every > 0 && step_ % cfg_.train.checkpoint_every == 0 &&
        step_ < cfg_.train.total_steps) {
      save_checkpoint(out_dir / ("ckpt_step" + std::to_string(step_) + ".pt"));
    }
  }
  auto final_path = out_dir / "ckpt_final.pt";
  save_checkpoint(final_path);
  return final_path;
}

void Trainer::save_checkpoint(const fs::path& path) const {
  torch::serialize::OutputArchive archive;
  archive.write("format", c10::IValue(std::string(kFormat)));
  archive.write("config", c10::IValue(cfg_.serialize()));
  archive.write("step", c10::IValue(step_));
  torch::serialize::OutputArchive weights;
  for (const auto& [name, tensor] : model_->named_state()) {
    weights.write(archive_key(name), tensor.detach());
  }
  archive.write("model", weights);
  torch::serialize::OutputArchive opt;
  write_optimizer_state(opt, *optimizer_);
  archive.write("optimizer", opt);
  try {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    archive.save_to(path.string());
  } catch (const std::exception& e) {
    throw IoError("cannot write checkpoint '" + path.string() + "': " + e.what());
  }
}

namespace {

torch::serialize::InputArchive open_archive(const fs::path& path) {
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const std::exception& e) {
    throw IoError("cannot read checkpoint '" + path.string() + "': " + e.what());
  }
  c10::IValue format;
  if (!archive.try_read("format", format) || !format.isString() ||
      format.toStringRef() != kFormat) {
    throw IoError("'" + path.string() + "' is not a checkpoint of this project");
  }
  return archive;
}

void read_weights(torch::serialize::InputArchive& archive, ModelPair& model) {
  torch::serialize::InputArchive weights;
  if (!archive.try_read("model", weights)) throw TopologyError("checkpoint has no model section");
  torch::NoGradGuard no_grad;
  for (auto& [name, tensor] : model.named_state()) {
    torch::Tensor stored;
    if (!weights.try_read(archive_key(name), stored)) {
      throw TopologyError("checkpoint lacks tensor '" + name + "'");
    }
    if (!stored.sizes().equals(tensor.sizes())) {
      throw TopologyError("checkpoint tensor '" + name + "' has a different shape");
    }
    tensor.copy_(stored);
  }
}

}  // namespace

std::string checkpoint_config_text(const fs::path& path) {
  auto archive = open_archive(path);
  c10::IValue text;
  archive.read("config", text);
  return text.toStringRef();
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  auto archive = open_archive(path);
  c10::IValue text, step;
  archive.read("config", text);
  archive.read("step", step);
  LoadedCheckpoint out;
  out.config = resolve_config_text(text.toStringRef());
  out.step = step.toInt();
  out.model = std::make_unique<ModelPair>(out.config.model);
  read_weights(archive, *out.model);
  return out;
}

std::unique_ptr<Trainer> Trainer::resume(const fs::path& path,
                                         const std::optional<RunConfig>& override_cfg) {
  auto archive = open_archive(path);
  c10::IValue text, step;
  archive.read("config", text);
  archive.read("step", step);
  auto stored = resolve_config_text(text.toStringRef());
  RunConfig cfg = stored;
  if (override_cfg) {
    if (override_cfg->model.topology_key() != stored.model.topology_key()) {
      throw TopologyError("resume: model configuration differs from checkpoint '" + path.string() + "'");
    }
    cfg = *override_cfg;
  }
  auto trainer = std::make_unique<Trainer>(cfg);
  read_weights(archive, *trainer->model_);
  torch::serialize::InputArchive opt;
  if (!archive.try_read("optimizer", opt)) throw TopologyError("checkpoint has no optimizer state");
  read_optimizer_state(opt, *trainer->optimizer_);
  trainer->step_ = step.toInt();
  return trainer;
}

}  // namespace fra
