#include "reltr/params.hpp"

#include <cmath>

namespace reltr {

Tensor init_weight(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), true);
}

Tensor init_bias(std::size_t size, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(size);
  for (double& v : values) v = dist(rng);
  return Tensor({size}, std::move(values), true);
}

Tensor init_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), true);
}

Linear Linear::make(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  Tensor weight = init_weight({in, out}, in, rng);
  return {weight, init_bias(out, in, rng)};
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".weight", weight);
  fn(prefix + ".bias", bias);
}

Norm Norm::make(std::size_t dim) { return {Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)}; }

void Norm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".gain", gain);
  fn(prefix + ".bias", bias);
}

Mlp Mlp::make(std::size_t in, std::size_t hidden, std::size_t out, std::size_t depth, std::mt19937_64& rng) {
  Mlp mlp;
  for (std::size_t i = 0; i < depth; ++i) {
    const std::size_t a = i == 0 ? in : hidden;
    const std::size_t b = i + 1 == depth ? out : hidden;
    mlp.layers.push_back(Linear::make(a, b, rng));
  }
  return mlp;
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

void Mlp::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + "." + std::to_string(i), fn);
}

FeedForward FeedForward::make(std::size_t dim, std::size_t hidden, std::mt19937_64& rng) {
  return {Linear::make(dim, hidden, rng), Linear::make(hidden, dim, rng), Norm::make(dim)};
}

Tensor FeedForward::operator()(const Tensor& x) const { return norm(add(x, contract(relu(expand(x))))); }

void FeedForward::visit(const std::string& prefix, const ParamVisitor& fn) {
  expand.visit(prefix + ".expand", fn);
  contract.visit(prefix + ".contract", fn);
  norm.visit(prefix + ".norm", fn);
}

Conv Conv::make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                std::mt19937_64& rng) {
  const std::size_t fan_in = in * kernel * kernel;
  Tensor weight = init_weight({out, in, kernel, kernel}, fan_in, rng);
  return {weight, init_bias(out, fan_in, rng), stride, padding};
}

void Conv::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".weight", weight);
  fn(prefix + ".bias", bias);
}

}  // namespace reltr
