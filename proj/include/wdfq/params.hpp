#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "wdfq/tensor.hpp"

namespace wdfq {

enum class Init {
  FanScaledUniform,  // U(-b, b) with b = sqrt(6 / (fan_in + fan_out))
  Zeros,
};

// Fills `t` from the counter stream keyed by (seed, name). Fans follow the
// tensor rank: rank-4 conv weights [Cout, Cin/g, kh, kw] use
// fan_in = Cin/g*kh*kw, fan_out = Cout*kh*kw; rank-2 [out, in] uses in/out;
// rank-1 uses the length for both.
void fan_scaled_uniform_fill(Tensor& t, std::uint64_t seed, const std::string& name);

// Named parameter set. std::map keeps iteration in sorted name order, which
// every reduction and update loop relies on for reproducibility.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

  Tensor& create(const std::string& name, Shape shape, Init init);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) != 0; }

  std::map<std::string, Tensor>& all() { return params_; }
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::map<std::string, Tensor> params_;
};

// Gradient accumulator keyed like the ParamStore it mirrors.
class GradStore {
 public:
  void accumulate(const std::string& name, const Tensor& g);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;

  std::map<std::string, Tensor>& all() { return grads_; }
  const std::map<std::string, Tensor>& all() const { return grads_; }
  void clear() { grads_.clear(); }

  // Merges `other` in-place; used to reduce per-sample buffers in a fixed order.
  void add(const GradStore& other);

  double global_norm() const;

 private:
  std::map<std::string, Tensor> grads_;
};

// Scales all gradients by max_norm/norm when the global norm exceeds max_norm.
void clip_global_norm(GradStore& grads, double max_norm);

// params -= lr * grads; names missing from `grads` are left untouched.
void sgd_step(ParamStore& params, const GradStore& grads, double lr);

}  // namespace wdfq
