#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "reltr/params.hpp"
#include "reltr/tensor.hpp"

namespace reltr {

/// Projections of one multi-head attention block plus its output layer norm.
///
/// Head h owns columns [h*d_h, (h+1)*d_h) of the query/key/value matrices.
struct AttentionParams {
  std::size_t model_dim = 0;
  std::size_t heads = 1;
  double dropout_rate = 0.0;
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  Norm norm;

  static AttentionParams make(std::size_t model_dim, std::size_t heads, double dropout_rate, std::mt19937_64& rng);
  std::size_t head_dim() const { return model_dim / heads; }
  void validate() const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct AttentionResult {
  Tensor output;   // [n_q, d_v]
  Tensor weights;  // [n_q, n_k]
};

/// softmax(Q K^T / sqrt(d_k)) V, row-wise over keys.
AttentionResult scaled_dot_attention(const Tensor& queries, const Tensor& keys, const Tensor& values);

struct MultiHeadResult {
  Tensor output;                     // [n_q, d] after the output projection
  std::vector<Tensor> head_weights;  // h x [n_q, n_k]
  Tensor mean_weights;               // mean over heads, [n_q, n_k]
};

MultiHeadResult multi_head_attention(const Tensor& queries_in, const Tensor& key_input, const Tensor& value_input,
                                     const AttentionParams& params);

struct AttBlockResult {
  Tensor output;        // [n_q, d]
  Tensor mean_weights;  // [n_q, n_k]
};

/// layer_norm(residual + dropout(MHA(queries_in, key_input, value_input))).
AttBlockResult att_block(const Tensor& queries_in, const Tensor& key_input, const Tensor& value_input,
                         const Tensor& residual_source, const AttentionParams& params, const ForwardContext& ctx);

}  // namespace reltr
