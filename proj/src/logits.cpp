#include "margingate/logits.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "margingate/errors.hpp"

namespace margingate {

TopK top_k(std::span<const float> logits, int k) {
  if (k < 1) throw InvalidArgument("top_k: k must be >= 1");
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(k), logits.size());
  std::vector<int> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                    [&](int a, int b) {
                      if (logits[a] != logits[b]) return logits[a] > logits[b];
                      return a < b;
                    });
  TopK out;
  out.ids.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n));
  out.values.reserve(n);
  for (int id : out.ids) out.values.push_back(logits[id]);
  return out;
}

float margin(std::span<const float> logits) {
  if (logits.size() < 2) throw InvalidArgument("margin: need at least two logits");
  float first = -std::numeric_limits<float>::infinity();
  float second = -std::numeric_limits<float>::infinity();
  for (float v : logits) {
    if (v > first) {
      second = first;
      first = v;
    } else if (v > second) {
      second = v;
    }
  }
  return first - second;
}

}  // namespace margingate
