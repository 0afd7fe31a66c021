#pragma once

#include <span>
#include <vector>

namespace margingate {

struct TopK {
  std::vector<int> ids;      // by value descending, ties by ascending id
  std::vector<float> values;
};

TopK top_k(std::span<const float> logits, int k);

/// Top-1 minus top-2 value, found with a single two-slot scan.
float margin(std::span<const float> logits);

}  // namespace margingate
