#pragma once

#include <functional>

#include "fra/common.hpp"

namespace fra {

struct LossWeights {
  double lambda_c = 0.5;
  double lambda_r = 0.1;
  double lambda_memax = 1.0;
};

/// Balanced soft assignment of P rows (pixels) over N columns (clusters).
/// Computes exp(logits / eps) and alternately rescales cluster and pixel
/// marginals to 1/N and 1/P; the result is rescaled so each row sums to 1.
/// Runs in the log domain so peaked logits do not overflow. Input [P, N].
torch::Tensor sinkhorn_normalize(const torch::Tensor& logits, int64_t iterations, double eps);

/// Per-distribution cross entropy -sum_m target[m] log(pred[m]) along `dim`.
/// Predictions are clamped at 1e-12 before the log; gradients flow only into
/// `pred`.
torch::Tensor relation_ce(const torch::Tensor& pred, const torch::Tensor& target, int64_t dim = -1);

/// Symmetrized pixel-level relation loss over two views. Inputs are
/// [B, N, H, W] student distributions and teacher targets; the result is the
/// spatial mean of CE_1 + CE_2, averaged over the batch.
torch::Tensor semantic_relation_loss(const torch::Tensor& student_1, const torch::Tensor& target_1,
                                     const torch::Tensor& student_2, const torch::Tensor& target_2);

/// Negative entropy of the mean row of `probs` [P, N]. Lies in [-log N, 0].
torch::Tensor memax_regularizer(const torch::Tensor& probs);

/// Entropy of the batch-mean assignment, the cluster-usage diagnostic.
double cluster_usage_entropy(const torch::Tensor& heatmaps);

/// Row-wise cosine similarity along the last dim with 1e-8-offset norms.
torch::Tensor embedding_cosine(const torch::Tensor& a, const torch::Tensor& b);

using EmbeddingMap = std::function<torch::Tensor(const torch::Tensor&)>;

struct ConsistencyTerms {
  torch::Tensor loss;          // L_sim, batch mean
  torch::Tensor global_cos;    // batch mean of f_s(G^g(z1), z2)
  torch::Tensor local_cos;     // batch mean of the N-averaged local cosines
};

/// One direction of the consistency loss:
/// -(lambda_c f(G^g(z1), z2) + (1 - lambda_c) mean_m f(G^l(z1^m), z2^m)).
/// Globals are [B, D], locals [B, N, D]. Targets are detached.
ConsistencyTerms consistency_sim(const torch::Tensor& z1_global, const torch::Tensor& z2_global,
                                 const torch::Tensor& z1_locals, const torch::Tensor& z2_locals,
                                 const EmbeddingMap& global_predictor,
                                 const EmbeddingMap& local_predictor, double lambda_c);

/// L_c = L_sim(1 -> 2) + L_sim(2 -> 1).
torch::Tensor semantic_consistency_loss(const ConsistencyTerms& forward,
                                        const ConsistencyTerms& backward);

/// L = L_c + lambda_r * L_r.
torch::Tensor total_loss(const torch::Tensor& consistency, const torch::Tensor& relation,
                         double lambda_r);

/// Plain symmetrized BYOL loss on global embeddings only. Independent of the
/// region machinery; used to cross-check the lambda_c = 1, lambda_r = 0 case.
torch::Tensor byol_loss(const torch::Tensor& p1, const torch::Tensor& z2, const torch::Tensor& p2,
                        const torch::Tensor& z1);

}  // namespace fra
