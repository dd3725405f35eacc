#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "clipvs/autograd.hpp"

namespace clipvs::nn {

/// Ordered, name-addressed collection of parameters ("module.path.weight").
class ParameterSet {
 public:
  Var add(const std::string& name, Tensor init, bool trainable = true);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::vector<Var> trainable() const;
  /// Parameters whose name starts with `prefix`.
  std::vector<std::pair<std::string, Var>> with_prefix(const std::string& prefix) const;
  std::size_t num_scalars() const;

  std::uint64_t hash() const;
  std::uint64_t hash(const std::string& prefix) const;
  void zero_grad() const;
  void set_trainable(const std::string& prefix, bool trainable);

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

struct Conv2d {
  Var weight;  // [k*k*in, out]
  Var bias;    // [out]
  int kernel = 1, stride = 1, pad = 0;

  static Conv2d create(ParameterSet& params, const std::string& name, int in, int out, int kernel,
                       int stride, Rng& rng);
  Var operator()(const Var& x) const { return conv2d(x, weight, bias, kernel, stride, pad); }
};

struct Linear {
  Var weight;  // [in, out]
  Var bias;    // [out]

  /// stddev <= 0 selects 1/sqrt(in).
  static Linear create(ParameterSet& params, const std::string& name, int in, int out, Rng& rng,
                       double stddev = 0.0);
  Var operator()(const Var& x) const { return linear(x, weight, bias); }
};

struct SgdOptions {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double clip_grad_norm = 0.0;  // 0 disables
};

/// SGD with heavy-ball momentum and L2 weight decay.
class Sgd {
 public:
  Sgd(std::vector<std::pair<std::string, Var>> params, SgdOptions options);

  /// Returns the global gradient norm before clipping.
  double step();
  void zero_grad();
  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }

  const std::vector<std::pair<std::string, Var>>& params() const { return params_; }
  std::vector<Tensor>& velocity() { return velocity_; }
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  std::vector<std::pair<std::string, Var>> params_;
  std::vector<Tensor> velocity_;
  SgdOptions options_;
};

}  // namespace clipvs::nn
