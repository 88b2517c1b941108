#pragma once

// Block/cell search space: operators, blocks, cells, canonical forms,
// enumeration, expansion and exact size counting.

#include <array>
#include <charconv>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "pnas/error.hpp"
#include "pnas/rng.hpp"

namespace pnas {

/// Hard cap on cell size.
inline constexpr int kMaxBlocks = 10;
inline constexpr int kNumOperators = 8;

/// The 8 unary operators. The numeric values are stable token ids and are
/// part of the on-disk cell_key format; never reorder.
enum class Operator : std::uint8_t {
  sep3x3 = 0,
  sep5x5 = 1,
  sep7x7 = 2,
  conv1x7_7x1 = 3,
  identity = 4,
  avgpool3x3 = 5,
  maxpool3x3 = 6,
  dilated3x3 = 7,
};

inline constexpr std::array<Operator, kNumOperators> kAllOperators = {
    Operator::sep3x3,   Operator::sep5x5,     Operator::sep7x7,     Operator::conv1x7_7x1,
    Operator::identity, Operator::avgpool3x3, Operator::maxpool3x3, Operator::dilated3x3,
};

inline constexpr int op_id(Operator op) { return static_cast<int>(op); }

inline Operator operator_from_id(int id) {
  if (id < 0 || id >= kNumOperators) {
    throw RangeError("operator id " + std::to_string(id) + " outside [0, 8)");
  }
  return static_cast<Operator>(id);
}

inline constexpr std::string_view operator_name(Operator op) {
  switch (op) {
    case Operator::sep3x3: return "sep3x3";
    case Operator::sep5x5: return "sep5x5";
    case Operator::sep7x7: return "sep7x7";
    case Operator::conv1x7_7x1: return "conv1x7_7x1";
    case Operator::identity: return "identity";
    case Operator::avgpool3x3: return "avgpool3x3";
    case Operator::maxpool3x3: return "maxpool3x3";
    case Operator::dilated3x3: return "dilated3x3";
  }
  return "?";
}

inline constexpr bool is_pooling(Operator op) {
  return op == Operator::avgpool3x3 || op == Operator::maxpool3x3;
}

/// Input reference of a block. 0 is the previous-previous cell output,
/// 1 the previous cell output, j+1 the output of block j of this cell.
struct InputIndex {
  int value = 0;
  friend constexpr auto operator<=>(const InputIndex&, const InputIndex&) = default;
};

/// Number of input choices available to block `position` (1-indexed).
inline constexpr int num_inputs(int position) { return position + 1; }

/// One block: two (input, operator) branches combined by addition.
struct BlockSpec {
  InputIndex i1;
  InputIndex i2;
  Operator o1 = Operator::identity;
  Operator o2 = Operator::identity;

  friend constexpr bool operator==(const BlockSpec&, const BlockSpec&) = default;

  bool is_canonical() const {
    return std::pair(i1.value, op_id(o1)) <= std::pair(i2.value, op_id(o2));
  }

  BlockSpec canonical() const {
    return is_canonical() ? *this : BlockSpec{i2, i1, o2, o1};
  }
};

class CellSpec {
 public:
  CellSpec() = default;
  explicit CellSpec(std::vector<BlockSpec> blocks) : blocks_(std::move(blocks)) {}

  int num_blocks() const { return static_cast<int>(blocks_.size()); }
  bool empty() const { return blocks_.empty(); }
  const std::vector<BlockSpec>& blocks() const { return blocks_; }
  const BlockSpec& block(int k) const { return blocks_.at(static_cast<std::size_t>(k)); }

  CellSpec with_block(const BlockSpec& b) const {
    CellSpec out = *this;
    out.blocks_.push_back(b);
    return out;
  }

  /// Size within [1, kMaxBlocks] and every block only references earlier
  /// blocks or the two cell inputs.
  bool is_valid() const {
    if (blocks_.empty() || num_blocks() > kMaxBlocks) return false;
    for (int k = 0; k < num_blocks(); ++k) {
      const auto& b = blocks_[static_cast<std::size_t>(k)];
      const int limit = num_inputs(k + 1);
      if (b.i1.value < 0 || b.i1.value >= limit || b.i2.value < 0 || b.i2.value >= limit) {
        return false;
      }
    }
    return true;
  }

  bool is_canonical() const {
    for (const auto& b : blocks_) {
      if (!b.is_canonical()) return false;
    }
    return true;
  }

  friend bool operator==(const CellSpec&, const CellSpec&) = default;

 private:
  std::vector<BlockSpec> blocks_;
};

/// Exact sizes of the cell space up to B blocks.
struct SpaceSize {
  boost::multiprecision::cpp_int raw;
  boost::multiprecision::cpp_int unique;
};

inline void check_position(int b, const char* what) {
  if (b < 1 || b > kMaxBlocks) {
    throw RangeError(std::string(what) + " " + std::to_string(b) + " outside [1, " +
                     std::to_string(kMaxBlocks) + "]");
  }
}

/// All (b+1)^2 * 64 raw blocks for position b, ordered by i1, i2, o1, o2.
inline std::vector<BlockSpec> enumerate_blocks(int b) {
  check_position(b, "block position");
  const int n_in = num_inputs(b);
  std::vector<BlockSpec> out;
  out.reserve(static_cast<std::size_t>(n_in * n_in * kNumOperators * kNumOperators));
  for (int i1 = 0; i1 < n_in; ++i1) {
    for (int i2 = 0; i2 < n_in; ++i2) {
      for (Operator o1 : kAllOperators) {
        for (Operator o2 : kAllOperators) {
          out.push_back(BlockSpec{InputIndex{i1}, InputIndex{i2}, o1, o2});
        }
      }
    }
  }
  return out;
}

/// Orders each block's two branches so that (i1, o1) <= (i2, o2).
inline CellSpec canonicalize(const CellSpec& cell) {
  std::vector<BlockSpec> blocks;
  blocks.reserve(cell.blocks().size());
  for (const auto& b : cell.blocks()) blocks.push_back(b.canonical());
  return CellSpec(std::move(blocks));
}

/// Textual key `b|i1,o1,i2,o2;...`. Stable on-disk format.
inline std::string cell_key(const CellSpec& cell) {
  std::string key = std::to_string(cell.num_blocks());
  key += '|';
  bool first = true;
  for (const auto& b : cell.blocks()) {
    if (!first) key += ';';
    first = false;
    key += std::to_string(b.i1.value);
    key += ',';
    key += std::to_string(op_id(b.o1));
    key += ',';
    key += std::to_string(b.i2.value);
    key += ',';
    key += std::to_string(op_id(b.o2));
  }
  return key;
}

namespace detail {

inline int parse_int_field(std::string_view field, std::string_view segment) {
  int value = 0;
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (field.empty() || ec != std::errc{} || ptr != end) {
    throw ParseError("malformed cell_key segment '" + std::string(segment) + "'");
  }
  return value;
}

}  // namespace detail

/// Inverse of cell_key. Errors name the offending segment.
inline CellSpec parse_cell_key(std::string_view key) {
  const auto bar = key.find('|');
  if (bar == std::string_view::npos) {
    throw ParseError("malformed cell_key '" + std::string(key) + "': missing '|'");
  }
  const int declared = detail::parse_int_field(key.substr(0, bar), key.substr(0, bar));
  std::string_view rest = key.substr(bar + 1);
  std::vector<BlockSpec> blocks;
  while (!rest.empty() || blocks.empty()) {
    const auto semi = rest.find(';');
    const std::string_view segment = rest.substr(0, semi);
    std::array<int, 4> f{};
    std::string_view s = segment;
    for (int k = 0; k < 4; ++k) {
      const auto comma = s.find(',');
      if ((k < 3) == (comma == std::string_view::npos)) {
        throw ParseError("malformed cell_key segment '" + std::string(segment) + "'");
      }
      f[static_cast<std::size_t>(k)] = detail::parse_int_field(s.substr(0, comma), segment);
      s = comma == std::string_view::npos ? std::string_view{} : s.substr(comma + 1);
    }
    if (f[1] < 0 || f[1] >= kNumOperators || f[3] < 0 || f[3] >= kNumOperators) {
      throw ParseError("operator id out of range in cell_key segment '" + std::string(segment) + "'");
    }
    const int position = static_cast<int>(blocks.size()) + 1;
    if (f[0] < 0 || f[0] >= num_inputs(position) || f[2] < 0 || f[2] >= num_inputs(position)) {
      throw ParseError("input id out of range in cell_key segment '" + std::string(segment) + "'");
    }
    blocks.push_back(BlockSpec{InputIndex{f[0]}, InputIndex{f[2]}, operator_from_id(f[1]),
                               operator_from_id(f[3])});
    if (semi == std::string_view::npos) break;
    rest = rest.substr(semi + 1);
    if (rest.empty()) throw ParseError("malformed cell_key '" + std::string(key) + "': trailing ';'");
  }
  if (declared != static_cast<int>(blocks.size())) {
    throw ParseError("cell_key '" + std::string(key) + "' declares " + std::to_string(declared) +
                     " blocks but lists " + std::to_string(blocks.size()));
  }
  if (declared > kMaxBlocks) {
    throw ParseError("cell_key '" + std::string(key) + "' exceeds " + std::to_string(kMaxBlocks) +
                     " blocks");
  }
  return CellSpec(std::move(blocks));
}

/// Every distinct canonical 1-block cell (136 of them), in first-seen
/// enumeration order.
inline std::vector<CellSpec> unique_one_block_cells() {
  std::vector<CellSpec> out;
  for (const auto& b : enumerate_blocks(1)) {
    if (b.is_canonical()) out.push_back(CellSpec({b}));
  }
  return out;
}

/// Children of `cell` with one more block: every raw block for the next
/// position is appended, canonicalized and deduplicated. The prefix is
/// copied unchanged.
inline std::vector<CellSpec> expand_cell(const CellSpec& cell, int max_blocks = kMaxBlocks) {
  check_position(max_blocks, "max blocks");
  const int b = cell.num_blocks() + 1;
  if (b > max_blocks) {
    throw RangeError("cannot expand a " + std::to_string(cell.num_blocks()) +
                     "-block cell beyond max blocks " + std::to_string(max_blocks));
  }
  std::vector<CellSpec> out;
  // Raw blocks whose canonical form is themselves are exactly the distinct
  // canonical children, in first-seen order.
  for (const auto& blk : enumerate_blocks(b)) {
    if (blk.is_canonical()) out.push_back(cell.with_block(blk));
  }
  return out;
}

/// Number of raw children before canonical deduplication: (b+1)^2 * 64.
inline std::int64_t raw_children_count(int b) {
  check_position(b, "block position");
  return static_cast<std::int64_t>(num_inputs(b)) * num_inputs(b) * kNumOperators * kNumOperators;
}

/// Distinct canonical blocks at position b: n(n+1)/2 with n = (b+1)*8.
inline std::int64_t unique_children_count(int b) {
  check_position(b, "block position");
  const std::int64_t n = static_cast<std::int64_t>(num_inputs(b)) * kNumOperators;
  return n * (n + 1) / 2;
}

inline SpaceSize count_space(int max_blocks) {
  check_position(max_blocks, "max blocks");
  SpaceSize s{1, 1};
  for (int b = 1; b <= max_blocks; ++b) {
    s.raw *= raw_children_count(b);
    s.unique *= unique_children_count(b);
  }
  return s;
}

/// Uniform per-block choice, then canonicalization.
inline CellSpec random_cell(int num_blocks, Rng& rng) {
  check_position(num_blocks, "block count");
  std::vector<BlockSpec> blocks;
  for (int b = 1; b <= num_blocks; ++b) {
    const auto n_in = static_cast<std::uint64_t>(num_inputs(b));
    BlockSpec blk{InputIndex{static_cast<int>(rng.below(n_in))},
                  InputIndex{static_cast<int>(rng.below(n_in))},
                  static_cast<Operator>(rng.below(kNumOperators)),
                  static_cast<Operator>(rng.below(kNumOperators))};
    blocks.push_back(blk.canonical());
  }
  return CellSpec(std::move(blocks));
}

/// Longest chain of blocks from a cell input to any block output.
inline int cell_depth(const CellSpec& cell) {
  std::vector<int> depth(static_cast<std::size_t>(cell.num_blocks()), 0);
  int best = 0;
  for (int k = 0; k < cell.num_blocks(); ++k) {
    const auto& b = cell.block(k);
    auto input_depth = [&](InputIndex in) {
      return in.value >= 2 ? depth[static_cast<std::size_t>(in.value - 2)] : 0;
    };
    depth[static_cast<std::size_t>(k)] = 1 + std::max(input_depth(b.i1), input_depth(b.i2));
    best = std::max(best, depth[static_cast<std::size_t>(k)]);
  }
  return best;
}

/// Blocks whose output is not consumed by a later block of the same cell.
inline std::vector<int> unused_blocks(const CellSpec& cell) {
  std::vector<bool> used(static_cast<std::size_t>(cell.num_blocks()), false);
  for (const auto& b : cell.blocks()) {
    if (b.i1.value >= 2) used[static_cast<std::size_t>(b.i1.value - 2)] = true;
    if (b.i2.value >= 2) used[static_cast<std::size_t>(b.i2.value - 2)] = true;
  }
  std::vector<int> out;
  for (int k = 0; k < cell.num_blocks(); ++k) {
    if (!used[static_cast<std::size_t>(k)]) out.push_back(k);
  }
  return out;
}

/// The best cell found by the search on CIFAR-10 (5 blocks).
inline CellSpec pnasnet5_cell() {
  using O = Operator;
  return canonicalize(CellSpec({
      BlockSpec{InputIndex{1}, InputIndex{1}, O::sep5x5, O::maxpool3x3},
      BlockSpec{InputIndex{0}, InputIndex{0}, O::sep7x7, O::maxpool3x3},
      BlockSpec{InputIndex{0}, InputIndex{0}, O::sep5x5, O::sep3x3},
      BlockSpec{InputIndex{4}, InputIndex{0}, O::sep3x3, O::maxpool3x3},
      BlockSpec{InputIndex{1}, InputIndex{0}, O::sep3x3, O::identity},
  }));
}

}  // namespace pnas
