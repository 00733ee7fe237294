#include "reltr/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace reltr {

AttentionParams AttentionParams::make(std::size_t model_dim, std::size_t heads, double dropout_rate,
                                      std::mt19937_64& rng) {
  AttentionParams p;
  p.model_dim = model_dim;
  p.heads = heads;
  p.dropout_rate = dropout_rate;
  p.validate();
  p.query = Linear::make(model_dim, model_dim, rng);
  p.key = Linear::make(model_dim, model_dim, rng);
  p.value = Linear::make(model_dim, model_dim, rng);
  p.output = Linear::make(model_dim, model_dim, rng);
  p.norm = Norm::make(model_dim);
  return p;
}

void AttentionParams::validate() const {
  if (heads == 0 || model_dim % heads != 0)
    throw std::invalid_argument("attention: model_dim " + std::to_string(model_dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw std::invalid_argument("attention: dropout rate out of range");
}

void AttentionParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  query.visit(prefix + ".query", fn);
  key.visit(prefix + ".key", fn);
  value.visit(prefix + ".value", fn);
  output.visit(prefix + ".output", fn);
  norm.visit(prefix + ".norm", fn);
}

AttentionResult scaled_dot_attention(const Tensor& queries, const Tensor& keys, const Tensor& values) {
  if (queries.rank() != 2 || keys.rank() != 2 || values.rank() != 2 || queries.dim(1) != keys.dim(1) ||
      keys.dim(0) != values.dim(0))
    throw std::invalid_argument("scaled_dot_attention: Q " + shape_string(queries.shape()) + ", K " +
                                shape_string(keys.shape()) + ", V " + shape_string(values.shape()));
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(keys.dim(1)));
  Tensor weights = softmax(scale(matmul_nt(queries, keys), inv_sqrt_dk), 1);
  return {matmul(weights, values), weights};
}

MultiHeadResult multi_head_attention(const Tensor& queries_in, const Tensor& key_input, const Tensor& value_input,
                                     const AttentionParams& params) {
  const std::size_t d = params.model_dim;
  if (queries_in.cols() != d || key_input.cols() != d || value_input.cols() != d ||
      key_input.rows() != value_input.rows())
    throw std::invalid_argument("multi_head_attention: inputs " + shape_string(queries_in.shape()) + ", " +
                                shape_string(key_input.shape()) + ", " + shape_string(value_input.shape()) +
                                " for model_dim " + std::to_string(d));
  const Tensor q = params.query(queries_in);
  const Tensor k = params.key(key_input);
  const Tensor v = params.value(value_input);

  MultiHeadResult result;
  std::vector<Tensor> outputs;
  const std::size_t dh = params.head_dim();
  for (std::size_t h = 0; h < params.heads; ++h) {
    if (params.heads == 1) {
      auto head = scaled_dot_attention(q, k, v);
      outputs.push_back(head.output);
      result.head_weights.push_back(head.weights);
      break;
    }
    const std::size_t lo = h * dh, hi = lo + dh;
    auto head = scaled_dot_attention(slice(q, 1, lo, hi), slice(k, 1, lo, hi), slice(v, 1, lo, hi));
    outputs.push_back(head.output);
    result.head_weights.push_back(head.weights);
  }
  const Tensor merged = outputs.size() == 1 ? outputs.front() : concat(outputs, 1);
  result.output = params.output(merged);

  Tensor total = result.head_weights.front();
  for (std::size_t h = 1; h < result.head_weights.size(); ++h) total = add(total, result.head_weights[h]);
  result.mean_weights = params.heads == 1 ? total : scale(total, 1.0 / static_cast<double>(params.heads));
  return result;
}

AttBlockResult att_block(const Tensor& queries_in, const Tensor& key_input, const Tensor& value_input,
                         const Tensor& residual_source, const AttentionParams& params, const ForwardContext& ctx) {
  if (residual_source.shape() != queries_in.shape())
    throw std::invalid_argument("att_block: residual " + shape_string(residual_source.shape()) + " vs queries " +
                                shape_string(queries_in.shape()));
  auto mha = multi_head_attention(queries_in, key_input, value_input, params);
  Tensor attended = mha.output;
  if (ctx.training && params.dropout_rate > 0.0) {
    if (ctx.rng == nullptr) throw std::invalid_argument("att_block: training dropout needs an rng");
    attended = dropout(attended, params.dropout_rate, *ctx.rng);
  }
  return {params.norm(add(residual_source, attended)), mha.mean_weights};
}

}  // namespace reltr
