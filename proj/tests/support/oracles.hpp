#pragma once

// Independent reference computations for tests: plain loops in double
// precision, sharing no code with the library.

#include <torch/torch.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace fra::oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  Matrix m(static_cast<size_t>(c.size(0)), std::vector<double>(static_cast<size_t>(c.size(1))));
  auto a = c.accessor<double, 2>();
  for (int64_t i = 0; i < c.size(0); ++i) {
    for (int64_t j = 0; j < c.size(1); ++j) m[i][j] = a[i][j];
  }
  return m;
}

/// Textbook Sinkhorn-Knopp on K = exp(logits / eps): alternately scale
/// cluster (column) totals to P/N and pixel (row) totals to 1.
inline Matrix sinkhorn(const Matrix& logits, int iterations, double eps) {
  const size_t p = logits.size(), n = logits[0].size();
  double top = -INFINITY;
  for (const auto& row : logits) {
    for (double v : row) top = std::max(top, v);
  }
  Matrix k(p, std::vector<double>(n));
  for (size_t i = 0; i < p; ++i) {
    for (size_t j = 0; j < n; ++j) k[i][j] = std::exp((logits[i][j] - top) / eps);
  }
  for (int it = 0; it < iterations; ++it) {
    for (size_t j = 0; j < n; ++j) {
      double col = 0;
      for (size_t i = 0; i < p; ++i) col += k[i][j];
      for (size_t i = 0; i < p; ++i) k[i][j] *= static_cast<double>(p) / static_cast<double>(n) / col;
    }
    for (size_t i = 0; i < p; ++i) {
      double row = 0;
      for (size_t j = 0; j < n; ++j) row += k[i][j];
      for (size_t j = 0; j < n; ++j) k[i][j] /= row;
    }
  }
  return k;
}

/// out[b][m][c] = sum_uv M F / sum_uv M, by explicit loops.
inline std::vector<Matrix> pool_regions(const torch::Tensor& feature_map, const torch::Tensor& heatmaps) {
  auto f = feature_map.detach().to(torch::kFloat64).contiguous();
  auto m = heatmaps.detach().to(torch::kFloat64).contiguous();
  auto fa = f.accessor<double, 4>();
  auto ma = m.accessor<double, 4>();
  const int64_t b = f.size(0), c = f.size(1), h = f.size(2), w = f.size(3), n = m.size(1);
  std::vector<Matrix> out(static_cast<size_t>(b), Matrix(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(c))));
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t mi = 0; mi < n; ++mi) {
      double mass = 0;
      for (int64_t u = 0; u < h; ++u) {
        for (int64_t v = 0; v < w; ++v) mass += ma[bi][mi][u][v];
      }
      for (int64_t ci = 0; ci < c; ++ci) {
        double acc = 0;
        for (int64_t u = 0; u < h; ++u) {
          for (int64_t v = 0; v < w; ++v) acc += ma[bi][mi][u][v] * fa[bi][ci][u][v];
        }
        out[bi][mi][ci] = acc / mass;
      }
    }
  }
  return out;
}

inline double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double x : p) {
    if (x > 0) h -= x * std::log(x);
  }
  return h;
}

struct GradientCheck {
  double analytic = 0;
  double numeric = 0;
  double relative_error = 0;
};

/// Central difference of `loss` with respect to one element of `param`.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradientCheck central_difference(const std::function<double()>& loss, torch::Tensor param,
                                        int64_t flat_index, double analytic, double step = 1e-5,
                                        double floor = 1e-6) {
  auto flat = param.detach().view({-1});
  const double original = flat[flat_index].item<double>();
  {
    torch::NoGradGuard g;
    flat[flat_index] = original + step;
  }
  const double up = loss();
  {
    torch::NoGradGuard g;
    flat[flat_index] = original - step;
  }
  const double down = loss();
  {
    torch::NoGradGuard g;
    flat[flat_index] = original;
  }
  GradientCheck out;
  out.analytic = analytic;
  out.numeric = (up - down) / (2 * step);
  const double scale = std::max({std::abs(out.analytic), std::abs(out.numeric), floor});
  out.relative_error = std::abs(out.analytic - out.numeric) / scale;
  return out;
}

}  // namespace fra::oracle
