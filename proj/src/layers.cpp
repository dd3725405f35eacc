#include "clipvs/layers.hpp"

#include <cmath>

#include "clipvs/errors.hpp"

namespace clipvs::nn {

Var ParameterSet::add(const std::string& name, Tensor init, bool trainable) {
  if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
  index_[name] = entries_.size();
  entries_.emplace_back(name, Var(std::move(init), trainable));
  return entries_.back().second;
}

const Var& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::vector<Var> ParameterSet::trainable() const {
  std::vector<Var> out;
  for (const auto& [name, v] : entries_)
    if (v.requires_grad()) out.push_back(v);
  return out;
}

std::vector<std::pair<std::string, Var>> ParameterSet::with_prefix(const std::string& prefix) const {
  std::vector<std::pair<std::string, Var>> out;
  for (const auto& e : entries_)
    if (e.first.starts_with(prefix)) out.push_back(e);
  return out;
}

std::size_t ParameterSet::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [name, v] : entries_) n += v.value().size();
  return n;
}

std::uint64_t ParameterSet::hash() const { return hash(""); }

std::uint64_t ParameterSet::hash(const std::string& prefix) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, v] : entries_) {
    if (!name.starts_with(prefix)) continue;
    h = fnv1a(name.data(), name.size(), h);
    const auto th = v.value().hash();
    h = fnv1a(&th, sizeof th, h);
  }
  return h;
}

void ParameterSet::zero_grad() const {
  for (const auto& [name, v] : entries_) v.zero_grad();
}

void ParameterSet::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& [name, v] : entries_)
    if (name.starts_with(prefix)) v.node()->requires_grad = trainable;
}

Conv2d Conv2d::create(ParameterSet& params, const std::string& name, int in, int out, int kernel,
                      int stride, Rng& rng) {
  Conv2d c;
  const int fan_in = kernel * kernel * in;
  c.weight = params.add(name + ".weight", Tensor::randn({fan_in, out}, std::sqrt(2.0 / fan_in), rng));
  c.bias = params.add(name + ".bias", Tensor({out}));
  c.kernel = kernel;
  c.stride = stride;
  c.pad = kernel / 2;
  return c;
}

Linear Linear::create(ParameterSet& params, const std::string& name, int in, int out, Rng& rng,
                      double stddev) {
  Linear l;
  const double s = stddev > 0 ? stddev : 1.0 / std::sqrt(static_cast<double>(in));
  l.weight = params.add(name + ".weight", Tensor::randn({in, out}, s, rng));
  l.bias = params.add(name + ".bias", Tensor({out}));
  return l;
}

Sgd::Sgd(std::vector<std::pair<std::string, Var>> params, SgdOptions options)
    : params_(std::move(params)), options_(options) {
  velocity_.reserve(params_.size());
  for (const auto& [name, p] : params_) velocity_.emplace_back(p.shape());
}

double Sgd::step() {
  double sq = 0;
  for (const auto& [name, p] : params_)
    if (p.has_grad())
      for (double g : p.grad().values()) sq += g * g;
  const double norm = std::sqrt(sq);
  const double clip = (options_.clip_grad_norm > 0 && norm > options_.clip_grad_norm)
                          ? options_.clip_grad_norm / norm
                          : 1.0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var p = params_[i].second;
    if (!p.requires_grad()) continue;
    Tensor& w = p.mutable_value();
    Tensor& v = velocity_[i];
    const bool has = p.has_grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = (has ? p.grad()[k] * clip : 0.0) + options_.weight_decay * w[k];
      v[k] = options_.momentum * v[k] + g;
      w[k] -= options_.lr * v[k];
    }
  }
  return norm;
}

void Sgd::zero_grad() {
  for (const auto& [name, p] : params_) p.zero_grad();
}

}  // namespace clipvs::nn
