#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <string>

#include "reltr/tensor.hpp"

namespace reltr {

/// Called once per named parameter tensor, in a fixed traversal order.
using ParamVisitor = std::function<void(const std::string& name, Tensor& tensor)>;

/// Forward-pass switches shared by every layer.
struct ForwardContext {
  bool training = false;
  /// Dropout randomness; required when training with a nonzero rate.
  std::mt19937_64* rng = nullptr;
};

/// Weight drawn from U(-sqrt(3/fan_in), sqrt(3/fan_in)).
Tensor init_weight(Shape shape, std::size_t fan_in, std::mt19937_64& rng);
/// Bias drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor init_bias(std::size_t size, std::size_t fan_in, std::mt19937_64& rng);
/// Zero-mean normal with the given standard deviation.
Tensor init_normal(Shape shape, double stddev, std::mt19937_64& rng);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear make(std::size_t in, std::size_t out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct Norm {
  Tensor gain;
  Tensor bias;

  static Norm make(std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

/// Stack of linear layers with ReLU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  static Mlp make(std::size_t in, std::size_t hidden, std::size_t out, std::size_t depth, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

/// Two linear maps with ReLU, then residual add and layer norm.
struct FeedForward {
  Linear expand;
  Linear contract;
  Norm norm;

  static FeedForward make(std::size_t dim, std::size_t hidden, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct Conv {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                   std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

}  // namespace reltr
