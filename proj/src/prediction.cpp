#include "reltr/prediction.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace reltr {

std::vector<double> softmax_probs(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax_probs: empty logits");
  const double hi = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += out[i] = std::exp(logits[i] - hi);
  for (double& v : out) v /= total;
  return out;
}

std::size_t argmax(std::span<const double> values) { return argmax_prefix(values, values.size()); }

std::size_t argmax_prefix(std::span<const double> values, std::size_t count) {
  if (count == 0 || count > values.size()) throw std::invalid_argument("argmax: empty range");
  return static_cast<std::size_t>(std::max_element(values.begin(), values.begin() + count) - values.begin());
}

}  // namespace reltr
