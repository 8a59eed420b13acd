#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fra {

// Error taxonomy shared by every module. The CLI maps ConfigError to exit
// code 1 and everything else to exit code 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct DatasetError : Error {
  using Error::Error;
};
struct TopologyError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

/// A batch of RGB images shaped [B, 3, H, W]. Values live in [0, 1] before
/// normalization.
struct ImageBatch {
  torch::Tensor pixels;

  int64_t size() const { return pixels.defined() ? pixels.size(0) : 0; }
  int64_t height() const { return pixels.size(2); }
  int64_t width() const { return pixels.size(3); }
  bool empty() const { return size() == 0; }
};

/// Throws DomainError unless `t` has exactly `dims` dimensions.
inline void require_rank(const torch::Tensor& t, int64_t dims, const char* what) {
  if (!t.defined() || t.dim() != dims) {
    throw DomainError(std::string(what) + ": expected a " + std::to_string(dims) +
                      "-d tensor, got " +
                      (t.defined() ? std::to_string(t.dim()) + "-d" : std::string("undefined")));
  }
}

inline void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw NumericError(std::string(what) + ": non-finite values");
  }
}

/// FNV-1a, used for stable checksums of file lists and input batches.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline uint64_t tensor_hash(const torch::Tensor& t) {
  auto c = t.detach().cpu().contiguous();
  return fnv1a(c.data_ptr(), c.numel() * c.element_size());
}

/// Derives an independent 64-bit stream seed from a base seed and a tag list.
inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> tags) {
  uint64_t h = fnv1a(&base, sizeof base);
  for (uint64_t t : tags) h = fnv1a(&t, sizeof t, h);
  // splitmix64 finalizer
  h += 0x9e3779b97f4a7c15ULL;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  return h ^ (h >> 31);
}

}  // namespace fra
