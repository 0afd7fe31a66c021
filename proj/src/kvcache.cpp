#include "margingate/kvcache.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "margingate/errors.hpp"
#include "margingate/hash.hpp"

namespace margingate {

ColumnSet::ColumnSet(int layers_in, int width_in)
    : layers(layers_in),
      width(width_in),
      k(static_cast<std::size_t>(layers_in) * width_in),
      v(static_cast<std::size_t>(layers_in) * width_in) {}

std::vector<LayerDeviation> column_deviation(const ColumnSet& a, const ColumnSet& b) {
  if (a.layers != b.layers || a.width != b.width || a.k.size() != b.k.size() ||
      a.v.size() != b.v.size()) {
    throw InvalidArgument("column_deviation: shape mismatch");
  }
  std::vector<LayerDeviation> out(static_cast<std::size_t>(a.layers));
  auto norm = [](std::span<const Bf16> x, std::span<const Bf16> y) {
    float ss = 0.0f;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const float d = x[i].to_float() - y[i].to_float();
      ss += d * d;
    }
    return std::sqrt(ss);
  };
  for (int l = 0; l < a.layers; ++l) {
    out[l].k = norm(a.k_layer(l), b.k_layer(l));
    out[l].v = norm(a.v_layer(l), b.v_layer(l));
  }
  return out;
}

KVCache::KVCache(int layers, int rows, int capacity, int heads, int head_dim)
    : layers_(layers), rows_(rows), capacity_(capacity), width_(heads * head_dim) {
  if (layers < 1 || rows < 1 || capacity < 1 || heads < 1 || head_dim < 1) {
    throw InvalidArgument("KVCache: all dimensions must be positive");
  }
  const std::size_t n = static_cast<std::size_t>(layers) * rows * capacity * width_;
  k_.resize(n);
  v_.resize(n);
  filled_.assign(static_cast<std::size_t>(rows), 0);
  mask_.assign(static_cast<std::size_t>(rows) * capacity, 0);
}

void KVCache::check_row(int row) const {
  if (row < 0 || row >= rows_) {
    throw InvalidArgument("KVCache: row " + std::to_string(row) + " out of range");
  }
}

void KVCache::check_read(int row, int slot) const {
  check_row(row);
  if (slot < 0 || slot >= filled_[row]) {
    throw InvalidArgument("KVCache: slot " + std::to_string(slot) + " beyond filled length " +
                          std::to_string(filled_[row]) + " of row " + std::to_string(row));
  }
}

void KVCache::check_shape(const ColumnSet& columns) const {
  if (columns.layers != layers_ || columns.width != width_) {
    throw InvalidArgument("KVCache: column set shape does not match the cache");
  }
}

int KVCache::filled(int row) const {
  check_row(row);
  return filled_[row];
}

void KVCache::append_column(int row, const ColumnSet& columns) {
  check_row(row);
  check_shape(columns);
  const int slot = filled_[row];
  if (slot >= capacity_) {
    throw CapacityError("KVCache: row " + std::to_string(row) + " is full (capacity " +
                        std::to_string(capacity_) + ")");
  }
  for (int l = 0; l < layers_; ++l) {
    std::ranges::copy(columns.k_layer(l), k_.begin() + static_cast<std::ptrdiff_t>(offset(l, row, slot)));
    std::ranges::copy(columns.v_layer(l), v_.begin() + static_cast<std::ptrdiff_t>(offset(l, row, slot)));
  }
  mask_[static_cast<std::size_t>(row) * capacity_ + slot] = 0;
  filled_[row] = slot + 1;
}

void KVCache::append_pad(int row) {
  check_row(row);
  const int slot = filled_[row];
  if (slot >= capacity_) throw CapacityError("KVCache: no room for pad slot");
  for (int l = 0; l < layers_; ++l) {
    std::fill_n(k_.begin() + static_cast<std::ptrdiff_t>(offset(l, row, slot)), width_, Bf16{});
    std::fill_n(v_.begin() + static_cast<std::ptrdiff_t>(offset(l, row, slot)), width_, Bf16{});
  }
  mask_[static_cast<std::size_t>(row) * capacity_ + slot] = 1;
  filled_[row] = slot + 1;
}

void KVCache::overwrite_column(int row, int slot, const ColumnSet& columns) {
  check_read(row, slot);
  check_shape(columns);
  for (int l = 0; l < layers_; ++l) {
    std::ranges::copy(columns.k_layer(l), k_.begin() + static_cast<std::ptrdiff_t>(offset(l, row, slot)));
    std::ranges::copy(columns.v_layer(l), v_.begin() + static_cast<std::ptrdiff_t>(offset(l, row, slot)));
  }
}

ColumnSet KVCache::read_column(int row, int slot) const {
  check_read(row, slot);
  ColumnSet out(layers_, width_);
  for (int l = 0; l < layers_; ++l) {
    std::copy_n(k_.begin() + static_cast<std::ptrdiff_t>(offset(l, row, slot)), width_, out.k_layer(l).begin());
    std::copy_n(v_.begin() + static_cast<std::ptrdiff_t>(offset(l, row, slot)), width_, out.v_layer(l).begin());
  }
  return out;
}

bool KVCache::is_masked(int row, int slot) const {
  check_read(row, slot);
  return mask_[static_cast<std::size_t>(row) * capacity_ + slot] != 0;
}

std::span<const Bf16> KVCache::k(int layer, int row, int slot) const {
  return {k_.data() + offset(layer, row, slot), static_cast<std::size_t>(width_)};
}

std::span<const Bf16> KVCache::v(int layer, int row, int slot) const {
  return {v_.data() + offset(layer, row, slot), static_cast<std::size_t>(width_)};
}

void KVCache::truncate(int row, int length) {
  check_row(row);
  if (length < 0 || length > filled_[row]) {
    throw InvalidArgument("KVCache::truncate: length out of range");
  }
  filled_[row] = length;
}

void KVCache::copy_row(int src, int dst) {
  check_row(src);
  check_row(dst);
  if (src == dst) return;
  const std::size_t n = static_cast<std::size_t>(capacity_) * width_;
  for (int l = 0; l < layers_; ++l) {
    std::copy_n(k_.begin() + static_cast<std::ptrdiff_t>(offset(l, src, 0)), n,
                k_.begin() + static_cast<std::ptrdiff_t>(offset(l, dst, 0)));
    std::copy_n(v_.begin() + static_cast<std::ptrdiff_t>(offset(l, src, 0)), n,
                v_.begin() + static_cast<std::ptrdiff_t>(offset(l, dst, 0)));
  }
  std::copy_n(mask_.begin() + static_cast<std::ptrdiff_t>(src) * capacity_, capacity_,
              mask_.begin() + static_cast<std::ptrdiff_t>(dst) * capacity_);
  filled_[dst] = filled_[src];
}

std::uint64_t KVCache::digest(std::optional<std::pair<int, int>> exclude) const {
  Fnv1a64 h;
  for (int row = 0; row < rows_; ++row) {
    h.update_value(filled_[row]);
    for (int slot = 0; slot < filled_[row]; ++slot) {
      if (exclude && exclude->first == row && exclude->second == slot) continue;
      h.update_value(mask_[static_cast<std::size_t>(row) * capacity_ + slot]);
      for (int l = 0; l < layers_; ++l) {
        h.update(std::as_bytes(k(l, row, slot)));
        h.update(std::as_bytes(v(l, row, slot)));
      }
    }
  }
  return h.value();
}

}  // namespace margingate
