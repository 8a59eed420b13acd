#include "fra/networks.hpp"

#include <map>

namespace fra {
namespace nn = torch::nn;

MlpImpl::MlpImpl(const ProjectorSpec& spec) : spec_(spec) {
  net_ = nn::Sequential();
  if (spec.hidden_dim == 0) {
    net_->push_back(nn::Linear(nn::LinearOptions(spec.input_dim, spec.output_dim).bias(spec.bias)));
  } else {
    net_->push_back(nn::Linear(nn::LinearOptions(spec.input_dim, spec.hidden_dim).bias(spec.bias)));
    if (spec.batch_norm) net_->push_back(nn::BatchNorm1d(spec.hidden_dim));
    net_->push_back(nn::ReLU());
    net_->push_back(nn::Linear(nn::LinearOptions(spec.hidden_dim, spec.output_dim).bias(spec.bias)));
  }
  register_module("net", net_);
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) {
  if (x.size(-1) != spec_.input_dim) {
    throw DomainError("mlp: expected trailing dim " + std::to_string(spec_.input_dim) + ", got " +
                      std::to_string(x.size(-1)));
  }
  auto lead = x.sizes().vec();
  lead.pop_back();
  auto y = net_->forward(x.reshape({-1, spec_.input_dim}));
  lead.push_back(spec_.output_dim);
  return y.view(lead);
}

void MlpImpl::set_identity() {
  if (spec_.hidden_dim != 0 || spec_.input_dim != spec_.output_dim) {
    throw DomainError("mlp: identity needs a square single-layer map");
  }
  torch::NoGradGuard no_grad;
  auto linear = net_[0]->as<nn::Linear>();
  linear->weight.copy_(torch::eye(spec_.input_dim, linear->weight.options()));
  if (linear->bias.defined()) linear->bias.zero_();
}

ResidualBlockImpl::ResidualBlockImpl(int64_t in_channels, int64_t width, int64_t stride,
                                     bool bottleneck) {
  auto conv = [](int64_t in, int64_t out, int64_t k, int64_t s) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(s).padding(k / 2).bias(false));
  };
  body_ = nn::Sequential();
  if (bottleneck) {
    out_channels_ = width * 4;
    body_->push_back(conv(in_channels, width, 1, 1));
    body_->push_back(nn::BatchNorm2d(width));
    body_->push_back(nn::ReLU());
    body_->push_back(conv(width, width, 3, stride));
    body_->push_back(nn::BatchNorm2d(width));
    body_->push_back(nn::ReLU());
    body_->push_back(conv(width, out_channels_, 1, 1));
    body_->push_back(nn::BatchNorm2d(out_channels_));
  } else {
    out_channels_ = width;
    body_->push_back(conv(in_channels, width, 3, stride));
    body_->push_back(nn::BatchNorm2d(width));
    body_->push_back(nn::ReLU());
    body_->push_back(conv(width, width, 3, 1));
    body_->push_back(nn::BatchNorm2d(width));
  }
  register_module("body", body_);
  if (stride != 1 || in_channels != out_channels_) {
    shortcut_ = register_module(
        "shortcut", nn::Sequential(conv(in_channels, out_channels_, 1, stride),
                                   nn::BatchNorm2d(out_channels_)));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto identity = shortcut_ ? shortcut_->forward(x) : x;
  return torch::relu(body_->forward(x) + identity);
}

EncoderImpl::EncoderImpl(const ModelConfig& cfg) {
  const int64_t w = cfg.encoder_width;
  std::vector<int64_t> blocks;
  bool bottleneck = false;
  stem_ = nn::Sequential();
  if (cfg.encoder == "resnet_desk") {
    blocks = {1, 1, 1, 1};
    stem_->push_back(nn::Conv2d(nn::Conv2dOptions(3, w, 3).stride(2).padding(1).bias(false)));
  } else {
    blocks = cfg.encoder == "resnet50" ? std::vector<int64_t>{3, 4, 6, 3}
                                       : std::vector<int64_t>{2, 2, 2, 2};
    bottleneck = cfg.encoder == "resnet50";
    stem_->push_back(nn::Conv2d(nn::Conv2dOptions(3, w, 7).stride(2).padding(3).bias(false)));
  }
  stem_->push_back(nn::BatchNorm2d(w));
  stem_->push_back(nn::ReLU());
  stem_->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
  register_module("stem", stem_);

  stages_ = nn::Sequential();
  int64_t channels = w;
  for (size_t stage = 0; stage < blocks.size(); ++stage) {
    const int64_t width = w << stage;
    for (int64_t b = 0; b < blocks[stage]; ++b) {
      const int64_t stride = (stage > 0 && b == 0) ? 2 : 1;
      ResidualBlock block(channels, width, stride, bottleneck);
      channels = block->out_channels();
      stages_->push_back(block);
    }
  }
  register_module("stages", stages_);
  out_channels_ = channels;
}

EncoderOutput EncoderImpl::forward(const torch::Tensor& images) {
  require_rank(images, 4, "encode");
  if (images.size(1) != 3) throw DomainError("encode: expected 3 input channels");
  if (images.size(2) < 32 || images.size(3) < 32) {
    throw DomainError("encode: input smaller than the encoder stride (32)");
  }
  auto fmap = stages_->forward(stem_->forward(images));
  return {fmap, fmap.mean({2, 3})};
}

BranchImpl::BranchImpl(const ModelConfig& cfg) {
  encoder = register_module("encoder", Encoder(cfg));
  const int64_t c = encoder->out_channels();
  global_projector = register_module(
      "global_projector", Mlp(ProjectorSpec{c, cfg.projector_hidden, cfg.embedding_dim}));
  local_projector = register_module(
      "local_projector", Mlp(ProjectorSpec{c, cfg.projector_hidden, cfg.embedding_dim}));
  head = register_module("head", HeatmapHead(c, cfg));
}

EncoderOutput BranchImpl::encode(const torch::Tensor& view) { return encoder->forward(view); }

torch::Tensor BranchImpl::project_global(const torch::Tensor& pooled) {
  require_finite(pooled, "project_global");
  return global_projector->forward(pooled);
}

torch::Tensor BranchImpl::project_dense(const torch::Tensor& feature_map) {
  require_rank(feature_map, 4, "project_dense");
  require_finite(feature_map, "project_dense");
  auto pixels = feature_map.permute({0, 2, 3, 1});  // [B, H, W, C]
  return local_projector->forward(pixels).permute({0, 3, 1, 2});
}

torch::Tensor BranchImpl::project_local(const torch::Tensor& features) {
  return local_projector->forward(features);
}

BranchOutput BranchImpl::forward(const torch::Tensor& view, double assign_temperature) {
  BranchOutput out;
  out.encoded = encode(view);
  out.global_embedding = project_global(out.encoded.pooled);
  out.dense = project_dense(out.encoded.feature_map);
  out.mask_embeddings = head->forward(out.encoded.feature_map);
  out.assignments = compute_assignments(out.dense, out.mask_embeddings, assign_temperature);
  out.region_features = pool_regions(out.encoded.feature_map, out.assignments.heatmaps);
  out.local_embeddings = project_local(out.region_features);
  return out;
}

ModelPair::ModelPair(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  online = Branch(cfg);
  momentum = Branch(cfg);
  const int64_t d = cfg.embedding_dim;
  global_predictor = Mlp(ProjectorSpec{d, cfg.predictor_hidden, d});
  local_predictor = Mlp(ProjectorSpec{d, cfg.predictor_hidden, d});
  sync_momentum();
  for (auto& p : momentum->parameters()) p.set_requires_grad(false);
}

std::vector<torch::Tensor> ModelPair::online_parameters() const {
  auto params = online->parameters();
  for (const auto& p : global_predictor->parameters()) params.push_back(p);
  for (const auto& p : local_predictor->parameters()) params.push_back(p);
  return params;
}

std::vector<torch::Tensor> ModelPair::momentum_parameters() const {
  return momentum->parameters();
}

std::vector<std::pair<std::string, torch::Tensor>> ModelPair::named_state() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  auto add = [&](const std::string& prefix, const torch::nn::Module& m) {
    for (const auto& item : m.named_parameters()) out.emplace_back(prefix + item.key(), item.value());
    for (const auto& item : m.named_buffers()) out.emplace_back(prefix + item.key(), item.value());
  };
  add("online.", *online);
  add("momentum.", *momentum);
  add("global_predictor.", *global_predictor);
  add("local_predictor.", *local_predictor);
  return out;
}

void ema_update(torch::nn::Module& online, torch::nn::Module& momentum, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw DomainError("ema_update: tau must lie in [0,1]");
  torch::NoGradGuard no_grad;
  auto src = online.named_parameters();
  auto dst = momentum.named_parameters();
  if (src.size() != dst.size()) throw TopologyError("ema_update: parameter count mismatch");
  for (const auto& item : src) {
    auto* target = dst.find(item.key());
    if (!target || !target->sizes().equals(item.value().sizes())) {
      throw TopologyError("ema_update: no matching momentum parameter for '" + item.key() + "'");
    }
    if (tau == 0.0) {
      target->copy_(item.value());
    } else if (tau != 1.0) {
      target->mul_(tau).add_(item.value(), 1.0 - tau);
    }
  }
  auto src_buf = online.named_buffers();
  auto dst_buf = momentum.named_buffers();
  for (const auto& item : src_buf) {
    auto* target = dst_buf.find(item.key());
    if (!target) throw TopologyError("ema_update: no matching momentum buffer for '" + item.key() + "'");
    target->copy_(item.value());
  }
}

void ModelPair::ema_update(double tau) { fra::ema_update(*online, *momentum, tau); }

void ModelPair::train(bool on) {
  online->train(on);
  momentum->train(on);
  global_predictor->train(on);
  local_predictor->train(on);
}

void ModelPair::to(torch::Dtype dtype) {
  online->to(dtype);
  momentum->to(dtype);
  global_predictor->to(dtype);
  local_predictor->to(dtype);
}

}  // namespace fra
