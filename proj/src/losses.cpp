#include "fra/losses.hpp"

#include <cmath>

namespace fra {

torch::Tensor sinkhorn_normalize(const torch::Tensor& logits, int64_t iterations, double eps) {
  require_rank(logits, 2, "sinkhorn_normalize");
  if (iterations < 1) throw DomainError("sinkhorn_normalize: need at least one iteration");
  if (!(eps > 0.0)) throw DomainError("sinkhorn_normalize: eps must be positive");
  require_finite(logits, "sinkhorn_normalize");
  const auto rows = static_cast<double>(logits.size(0));
  const auto cols = static_cast<double>(logits.size(1));
  auto log_q = logits / eps;
  log_q = log_q - log_q.max();
  log_q = log_q - log_q.logsumexp({0, 1});
  for (int64_t it = 0; it < iterations; ++it) {
    // each cluster receives total mass 1/N
    log_q = log_q - log_q.logsumexp(0, true) - std::log(cols);
    // each pixel carries total mass 1/P
    log_q = log_q - log_q.logsumexp(1, true) - std::log(rows);
  }
  return (log_q + std::log(rows)).exp();
}

torch::Tensor relation_ce(const torch::Tensor& pred, const torch::Tensor& target, int64_t dim) {
  if (!pred.sizes().equals(target.sizes())) throw DomainError("relation_ce: shape mismatch");
  return -(target.detach() * pred.clamp_min(1e-12).log()).sum(dim);
}

torch::Tensor semantic_relation_loss(const torch::Tensor& student_1, const torch::Tensor& target_1,
                                     const torch::Tensor& student_2, const torch::Tensor& target_2) {
  for (const auto* t : {&student_1, &target_1, &student_2, &target_2}) {
    require_rank(*t, 4, "semantic_relation_loss");
    if (!t->sizes().equals(student_1.sizes())) {
      throw DomainError("semantic_relation_loss: all assignment fields must share one shape");
    }
  }
  auto ce = relation_ce(student_1, target_1, 1) + relation_ce(student_2, target_2, 1);  // [B,H,W]
  return ce.mean({1, 2}).mean();
}

torch::Tensor memax_regularizer(const torch::Tensor& probs) {
  require_rank(probs, 2, "memax_regularizer");
  auto mean = probs.mean(0);
  return (mean * mean.clamp_min(1e-12).log()).sum();
}

double cluster_usage_entropy(const torch::Tensor& heatmaps) {
  require_rank(heatmaps, 4, "cluster_usage_entropy");
  torch::NoGradGuard no_grad;
  auto probs = heatmaps.detach().transpose(0, 1).flatten(1).transpose(0, 1);
  return -memax_regularizer(probs).item<double>();
}

torch::Tensor embedding_cosine(const torch::Tensor& a, const torch::Tensor& b) {
  auto an = a / (a.norm(2, -1, true) + 1e-8);
  auto bn = b / (b.norm(2, -1, true) + 1e-8);
  return (an * bn).sum(-1);
}

ConsistencyTerms consistency_sim(const torch::Tensor& z1_global, const torch::Tensor& z2_global,
                                 const torch::Tensor& z1_locals, const torch::Tensor& z2_locals,
                                 const EmbeddingMap& global_predictor,
                                 const EmbeddingMap& local_predictor, double lambda_c) {
  require_rank(z1_global, 2, "consistency_sim(global)");
  require_rank(z1_locals, 3, "consistency_sim(locals)");
  if (!z1_global.sizes().equals(z2_global.sizes()) || !z1_locals.sizes().equals(z2_locals.sizes())) {
    throw DomainError("consistency_sim: online and target embeddings differ in shape");
  }
  ConsistencyTerms out;
  auto global = embedding_cosine(global_predictor(z1_global), z2_global.detach());      // [B]
  auto local = embedding_cosine(local_predictor(z1_locals), z2_locals.detach()).mean(1);  // [B]
  out.global_cos = global.mean();
  out.local_cos = local.mean();
  out.loss = -(lambda_c * global + (1.0 - lambda_c) * local).mean();
  return out;
}

torch::Tensor semantic_consistency_loss(const ConsistencyTerms& forward,
                                        const ConsistencyTerms& backward) {
  return forward.loss + backward.loss;
}

torch::Tensor total_loss(const torch::Tensor& consistency, const torch::Tensor& relation,
                         double lambda_r) {
  return consistency + lambda_r * relation;
}

torch::Tensor byol_loss(const torch::Tensor& p1, const torch::Tensor& z2, const torch::Tensor& p2,
                        const torch::Tensor& z1) {
  auto one = [](const torch::Tensor& p, const torch::Tensor& z) {
    return -torch::nn::functional::cosine_similarity(
                p, z.detach(), torch::nn::functional::CosineSimilarityFuncOptions().dim(1).eps(1e-8))
                .mean();
  };
  return one(p1, z2) + one(p2, z1);
}

}  // namespace fra
