#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "margingate/bf16.hpp"

namespace margingate {

/// Per-layer key and value columns for one position of one row. Each layer
/// holds heads * head_dim entries, stored layer-major.
struct ColumnSet {
  int layers = 0;
  int width = 0;  // heads * head_dim
  std::vector<Bf16> k;
  std::vector<Bf16> v;

  ColumnSet() = default;
  ColumnSet(int layers, int width);

  std::span<Bf16> k_layer(int l) { return {k.data() + l * width, static_cast<std::size_t>(width)}; }
  std::span<Bf16> v_layer(int l) { return {v.data() + l * width, static_cast<std::size_t>(width)}; }
  std::span<const Bf16> k_layer(int l) const {
    return {k.data() + l * width, static_cast<std::size_t>(width)};
  }
  std::span<const Bf16> v_layer(int l) const {
    return {v.data() + l * width, static_cast<std::size_t>(width)};
  }

  friend bool operator==(const ColumnSet&, const ColumnSet&) = default;
};

struct LayerDeviation {
  float k = 0.0f;
  float v = 0.0f;
  friend bool operator==(const LayerDeviation&, const LayerDeviation&) = default;
};

/// L2 norm of the per-layer difference, widened to fp32 before subtracting.
std::vector<LayerDeviation> column_deviation(const ColumnSet& a, const ColumnSet& b);

/// K/V storage indexed [layer][row][slot][head * head_dim]. A slot is a
/// storage index; left-pad slots are appended masked and never attended to.
class KVCache {
 public:
  KVCache(int layers, int rows, int capacity, int heads, int head_dim);

  int layers() const noexcept { return layers_; }
  int rows() const noexcept { return rows_; }
  int capacity() const noexcept { return capacity_; }
  int width() const noexcept { return width_; }
  int filled(int row) const;

  void append_column(int row, const ColumnSet& columns);
  /// Appends a masked pad slot (zero columns, excluded from attention).
  void append_pad(int row);
  void overwrite_column(int row, int slot, const ColumnSet& columns);
  ColumnSet read_column(int row, int slot) const;
  bool is_masked(int row, int slot) const;

  std::span<const Bf16> k(int layer, int row, int slot) const;
  std::span<const Bf16> v(int layer, int row, int slot) const;

  /// Test-harness reset; never used by the decode policies.
  void truncate(int row, int length);

  /// Copies row `src` (contents, mask, fill) onto row `dst`.
  void copy_row(int src, int dst);

  /// FNV-1a digest over every stored entry, fill levels and masks, optionally
  /// skipping one (row, slot) slice.
  std::uint64_t digest(std::optional<std::pair<int, int>> exclude = std::nullopt) const;

 private:
  std::size_t offset(int layer, int row, int slot) const noexcept {
    return ((static_cast<std::size_t>(layer) * rows_ + row) * capacity_ + slot) * width_;
  }
  void check_row(int row) const;
  void check_read(int row, int slot) const;
  void check_shape(const ColumnSet& columns) const;

  int layers_;
  int rows_;
  int capacity_;
  int width_;
  std::vector<Bf16> k_;
  std::vector<Bf16> v_;
  std::vector<int> filled_;
  std::vector<std::uint8_t> mask_;  // [row][slot]
};

}  // namespace margingate
