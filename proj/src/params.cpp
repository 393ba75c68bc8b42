#include "wdfq/params.hpp"

#include <cmath>

#include "wdfq/rng.hpp"

namespace wdfq {

void fan_scaled_uniform_fill(Tensor& t, std::uint64_t seed, const std::string& name) {
  std::int64_t fan_in = 0;
  std::int64_t fan_out = 0;
  switch (t.rank()) {
    case 1:
      fan_in = fan_out = t.extent(0);
      break;
    case 2:
      fan_out = t.extent(0);
      fan_in = t.extent(1);
      break;
    case 4: {
      const std::int64_t rf = t.extent(2) * t.extent(3);
      fan_out = t.extent(0) * rf;
      fan_in = t.extent(1) * rf;
      break;
    }
    default:
      raise(ErrorCode::Shape, "no fan convention for rank-" + std::to_string(t.rank()) +
                                  " parameter '" + name + "'");
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  CounterRng rng(seed, name);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_signed(i, bound);
}

Tensor& ParamStore::create(const std::string& name, Shape shape, Init init) {
  if (params_.count(name))
    raise(ErrorCode::Registry, "parameter '" + name + "' registered twice");
  Tensor t(std::move(shape));
  if (init == Init::FanScaledUniform) fan_scaled_uniform_fill(t, seed_, name);
  return params_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) raise(ErrorCode::Registry, "unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) raise(ErrorCode::Registry, "unknown parameter '" + name + "'");
  return it->second;
}

void GradStore::accumulate(const std::string& name, const Tensor& g) {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    grads_.emplace(name, g);
    return;
  }
  require_same_shape(it->second, g, "gradient accumulation");
  it->second.as_vector() += g.as_vector();
}

Tensor* GradStore::find(const std::string& name) {
  auto it = grads_.find(name);
  return it == grads_.end() ? nullptr : &it->second;
}

const Tensor* GradStore::find(const std::string& name) const {
  auto it = grads_.find(name);
  return it == grads_.end() ? nullptr : &it->second;
}

void GradStore::add(const GradStore& other) {
  for (const auto& [name, g] : other.grads_) accumulate(name, g);
}

double GradStore::global_norm() const {
  double sq = 0.0;
  for (const auto& [name, g] : grads_) sq += g.as_vector().squaredNorm();
  return std::sqrt(sq);
}

void clip_global_norm(GradStore& grads, double max_norm) {
  const double norm = grads.global_norm();
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  for (auto& [name, g] : grads.all()) g.as_vector() *= scale;
}

void sgd_step(ParamStore& params, const GradStore& grads, double lr) {
  for (auto& [name, p] : params.all()) {
    const Tensor* g = grads.find(name);
    if (!g) continue;
    require_same_shape(p, *g, "sgd step");
    p.as_vector() -= lr * g->as_vector();
  }
}

}  // namespace wdfq
