#pragma once

// Cell -> stacked CNN as a shape-annotated graph, plus parameter and
// multiply-add accounting and a JSON export.
//
// Layout: optional stem (3x3 stride-2 conv to F/4 filters followed by two
// stride-2 cells), then three stages of N stride-1 cells separated by
// stride-2 cells, then global average pooling, a dense layer and softmax.
//
// Inside a cell:
//  * each cell input used by a block is brought to the cell's filter count
//    and to the spatial size of the previous cell output by a 1x1
//    ReLU-conv-BN projection when they differ (stride 2 if it is twice as
//    large);
//  * in a stride-2 cell, branches reading a cell input use stride 2; branches
//    reading another block use stride 1;
//  * outputs of blocks no other block consumes are concatenated and, when
//    the channel count differs from the cell's filter count, projected by a
//    1x1 ReLU-conv-BN.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pnas/cell_space.hpp"
#include "pnas/error.hpp"

namespace pnas {

enum class Stem { none, conv3x3_stride2 };

struct StackPlan {
  int n = 2;  ///< stride-1 cells per stage
  int f = 24;  ///< filters in the first stage
  int input_hw = 32;
  int input_channels = 3;
  Stem stem = Stem::none;
  int num_classes = 10;

  void validate() const {
    if (n < 1) throw ConfigError("plan N must be >= 1");
    if (f < 1) throw ConfigError("plan F must be >= 1");
    if (input_hw < 1 || input_channels < 1) throw ConfigError("plan input shape must be positive");
    if (num_classes < 1) throw ConfigError("plan num_classes must be >= 1");
  }

  static StackPlan cifar(int n, int f) { return StackPlan{n, f, 32, 3, Stem::none, 10}; }
  static StackPlan imagenet(int n, int f, int hw = 224) {
    return StackPlan{n, f, hw, 3, Stem::conv3x3_stride2, 1000};
  }
};

enum class NodeKind {
  input,
  relu,
  conv,
  sep_conv,
  batch_norm,
  identity,
  avg_pool,
  max_pool,
  add,
  concat,
  global_avg_pool,
  dense,
  softmax,
};

inline constexpr std::string_view node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::input: return "input";
    case NodeKind::relu: return "relu";
    case NodeKind::conv: return "conv";
    case NodeKind::sep_conv: return "sep_conv";
    case NodeKind::batch_norm: return "batch_norm";
    case NodeKind::identity: return "identity";
    case NodeKind::avg_pool: return "avg_pool";
    case NodeKind::max_pool: return "max_pool";
    case NodeKind::add: return "add";
    case NodeKind::concat: return "concat";
    case NodeKind::global_avg_pool: return "global_avg_pool";
    case NodeKind::dense: return "dense";
    case NodeKind::softmax: return "softmax";
  }
  return "?";
}

struct Shape {
  int h = 0;
  int w = 0;
  int c = 0;
  friend bool operator==(const Shape&, const Shape&) = default;
  bool annotated() const { return h > 0 && w > 0 && c > 0; }
};

struct GraphNode {
  int id = 0;
  NodeKind kind = NodeKind::input;
  std::vector<int> inputs;
  Shape shape;
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  int dilation = 1;
  int cell = -1;  ///< owning cell index, -1 outside cells

  friend bool operator==(const GraphNode&, const GraphNode&) = default;
};

struct CellInfo {
  int index = 0;
  int stride = 1;
  int output_node = 0;
  friend bool operator==(const CellInfo&, const CellInfo&) = default;
};

struct NetworkGraph {
  std::vector<GraphNode> nodes;
  std::vector<CellInfo> cells;
  std::vector<int> stage_outputs;  ///< last node of each of the three stages
  int output_node = 0;

  const GraphNode& node(int id) const { return nodes.at(static_cast<std::size_t>(id)); }
  friend bool operator==(const NetworkGraph&, const NetworkGraph&) = default;
};

struct CostReport {
  std::int64_t params = 0;
  std::int64_t mult_adds = 0;
  friend bool operator==(const CostReport&, const CostReport&) = default;
};

namespace detail {

class GraphBuilder {
 public:
  NetworkGraph graph;
  int current_cell = -1;

  int add(NodeKind kind, std::vector<int> inputs, Shape shape, int kh = 0, int kw = 0,
          int stride = 1, int dilation = 1) {
    GraphNode n;
    n.id = static_cast<int>(graph.nodes.size());
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.shape = shape;
    n.kernel_h = kh;
    n.kernel_w = kw;
    n.stride = stride;
    n.dilation = dilation;
    n.cell = current_cell;
    graph.nodes.push_back(std::move(n));
    return graph.nodes.back().id;
  }

  const Shape& shape(int id) const { return graph.nodes[static_cast<std::size_t>(id)].shape; }

  static int halve(int v) {
    const int out = v / 2;
    if (out < 1) throw ConstructionError("spatial size underflow: stride 2 applied to size " + std::to_string(v));
    return out;
  }

  Shape strided(const Shape& s, int stride, int channels) const {
    if (stride == 1) return Shape{s.h, s.w, channels};
    return Shape{halve(s.h), halve(s.w), channels};
  }

  // ReLU -> conv(kh x kw) -> BN
  int relu_conv_bn(int in, int kh, int kw, int stride, int channels, int dilation = 1) {
    const int r = add(NodeKind::relu, {in}, shape(in));
    const int c = add(NodeKind::conv, {r}, strided(shape(in), stride, channels), kh, kw, stride, dilation);
    return add(NodeKind::batch_norm, {c}, shape(c));
  }

  // Two repetitions of ReLU -> SepConv -> BN; stride on the first.
  int separable(int in, int k, int stride, int channels) {
    int x = in;
    for (int rep = 0; rep < 2; ++rep) {
      const int r = add(NodeKind::relu, {x}, shape(x));
      const int s = rep == 0 ? stride : 1;
      const int c = add(NodeKind::sep_conv, {r}, strided(shape(x), s, channels), k, k, s);
      x = add(NodeKind::batch_norm, {c}, shape(c));
    }
    return x;
  }

  int apply(Operator op, int in, int stride, int channels) {
    switch (op) {
      case Operator::sep3x3: return separable(in, 3, stride, channels);
      case Operator::sep5x5: return separable(in, 5, stride, channels);
      case Operator::sep7x7: return separable(in, 7, stride, channels);
      case Operator::conv1x7_7x1: {
        const int r = add(NodeKind::relu, {in}, shape(in));
        const int a = add(NodeKind::conv, {r}, strided(shape(in), stride, channels), 1, 7, stride);
        const int b = add(NodeKind::conv, {a}, shape(a), 7, 1, 1);
        return add(NodeKind::batch_norm, {b}, shape(b));
      }
      case Operator::dilated3x3: return relu_conv_bn(in, 3, 3, stride, channels, 2);
      case Operator::identity:
        if (stride == 1 && shape(in).c == channels) {
          return add(NodeKind::identity, {in}, shape(in));
        }
        return relu_conv_bn(in, 1, 1, stride, channels);
      case Operator::avgpool3x3:
      case Operator::maxpool3x3: {
        const NodeKind kind = op == Operator::avgpool3x3 ? NodeKind::avg_pool : NodeKind::max_pool;
        const int p = add(kind, {in}, strided(shape(in), stride, shape(in).c), 3, 3, stride);
        if (shape(p).c == channels) return p;
        return relu_conv_bn(p, 1, 1, 1, channels);
      }
    }
    throw ContractError("unknown operator");
  }

  // Brings a cell input to `target` spatial size and `channels`.
  int prepare_input(int in, const Shape& target, int channels) {
    const Shape& s = shape(in);
    if (s.h == target.h && s.w == target.w && s.c == channels) return in;
    if (s.h == target.h && s.w == target.w) return relu_conv_bn(in, 1, 1, 1, channels);
    if (halve(s.h) == target.h && halve(s.w) == target.w) return relu_conv_bn(in, 1, 1, 2, channels);
    throw ConstructionError("cell input of size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                            " cannot be matched to " + std::to_string(target.h) + "x" +
                            std::to_string(target.w));
  }

  int build_cell(const CellSpec& cell, int prev_prev, int prev, int stride, int channels) {
    current_cell = static_cast<int>(graph.cells.size());
    const Shape target = shape(prev);
    std::optional<int> prepared[2];
    auto external = [&](int which) {
      auto& slot = prepared[which];
      if (!slot) slot = prepare_input(which == 0 ? prev_prev : prev, target, channels);
      return *slot;
    };
    std::vector<int> block_out;
    for (const auto& blk : cell.blocks()) {
      auto branch = [&](InputIndex in, Operator op) {
        if (in.value < 2) return apply(op, external(in.value), stride, channels);
        return apply(op, block_out[static_cast<std::size_t>(in.value - 2)], 1, channels);
      };
      const int a = branch(blk.i1, blk.o1);
      const int b = branch(blk.i2, blk.o2);
      block_out.push_back(add(NodeKind::add, {a, b}, shape(a)));
    }
    std::vector<int> loose;
    for (int k : unused_blocks(cell)) loose.push_back(block_out[static_cast<std::size_t>(k)]);
    int out = loose.front();
    if (loose.size() > 1) {
      Shape s = shape(loose.front());
      s.c = 0;
      for (int id : loose) s.c += shape(id).c;
      out = add(NodeKind::concat, loose, s);
    }
    if (shape(out).c != channels) out = relu_conv_bn(out, 1, 1, 1, channels);
    graph.cells.push_back(CellInfo{current_cell, stride, out});
    current_cell = -1;
    return out;
  }
};

}  // namespace detail

/// Builds the stacked network for `cell` under `plan`.
inline NetworkGraph build_network(const CellSpec& cell, const StackPlan& plan) {
  plan.validate();
  if (!cell.is_valid()) throw ValidationError("invalid cell '" + cell_key(cell) + "'");
  detail::GraphBuilder g;
  int x = g.add(NodeKind::input, {}, Shape{plan.input_hw, plan.input_hw, plan.input_channels});
  int prev_prev = x;
  int prev = x;
  auto push_cell = [&](int stride, int channels) {
    const int out = g.build_cell(cell, prev_prev, prev, stride, channels);
    prev_prev = prev;
    prev = out;
  };

  int filters = plan.f;
  if (plan.stem == Stem::conv3x3_stride2) {
    // Stem width F/4 so that the two stride-2 stem cells double it twice;
    // stage 0 projects to F when F is not a multiple of 4.
    const int stem_filters = std::max(1, plan.f / 4);
    const int c = g.add(NodeKind::conv, {x}, g.strided(g.shape(x), 2, stem_filters), 3, 3, 2);
    x = g.add(NodeKind::batch_norm, {c}, g.shape(c));
    prev_prev = prev = x;
    push_cell(2, stem_filters * 2);
    push_cell(2, stem_filters * 4);
  }
  for (int stage = 0; stage < 3; ++stage) {
    if (stage > 0) {
      filters *= 2;
      push_cell(2, filters);
    }
    for (int r = 0; r < plan.n; ++r) push_cell(1, filters);
    g.graph.stage_outputs.push_back(prev);
  }
  const Shape last = g.shape(prev);
  const int gap = g.add(NodeKind::global_avg_pool, {prev}, Shape{1, 1, last.c});
  const int fc = g.add(NodeKind::dense, {gap}, Shape{1, 1, plan.num_classes});
  g.graph.output_node = g.add(NodeKind::softmax, {fc}, Shape{1, 1, plan.num_classes});
  return std::move(g.graph);
}

/// Per-node cost. Convolutions carry no bias (BN follows); BN is 2C params
/// and no mult-adds; pooling, identity, add, concat and activations are free.
inline CostReport node_cost(const GraphNode& n, const NetworkGraph& g) {
  if (!n.shape.annotated()) {
    throw ContractError("node " + std::to_string(n.id) + " has no shape annotation");
  }
  auto in_shape = [&]() -> const Shape& {
    if (n.inputs.empty()) throw ContractError("node " + std::to_string(n.id) + " has no input");
    const Shape& s = g.node(n.inputs.front()).shape;
    if (!s.annotated()) {
      throw ContractError("node " + std::to_string(n.inputs.front()) + " has no shape annotation");
    }
    return s;
  };
  const std::int64_t out_hw = static_cast<std::int64_t>(n.shape.h) * n.shape.w;
  switch (n.kind) {
    case NodeKind::conv: {
      const std::int64_t per = static_cast<std::int64_t>(n.kernel_h) * n.kernel_w * in_shape().c * n.shape.c;
      return {per, per * out_hw};
    }
    case NodeKind::sep_conv: {
      const std::int64_t cin = in_shape().c;
      const std::int64_t depthwise = static_cast<std::int64_t>(n.kernel_h) * n.kernel_w * cin;
      const std::int64_t pointwise = cin * n.shape.c;
      return {depthwise + pointwise, (depthwise + pointwise) * out_hw};
    }
    case NodeKind::batch_norm: return {2 * static_cast<std::int64_t>(n.shape.c), 0};
    case NodeKind::dense: {
      const std::int64_t cin = in_shape().c;
      return {cin * n.shape.c + n.shape.c, cin * n.shape.c};
    }
    default: return {0, 0};
  }
}

inline CostReport count_costs(const NetworkGraph& graph) {
  CostReport total;
  for (const auto& n : graph.nodes) {
    const CostReport c = node_cost(n, graph);
    total.params += c.params;
    total.mult_adds += c.mult_adds;
  }
  return total;
}

inline constexpr int kGraphSchemaVersion = 1;

/// JSON export: {schema_version, cell, plan, nodes[{id, op, inputs, shape,...}], output_node, costs}.
inline nlohmann::json export_graph(const NetworkGraph& graph, const CellSpec& cell, const StackPlan& plan) {
  using nlohmann::json;
  json nodes = json::array();
  for (const auto& n : graph.nodes) {
    json j{{"id", n.id},
           {"op", node_kind_name(n.kind)},
           {"inputs", n.inputs},
           {"shape", {n.shape.h, n.shape.w, n.shape.c}}};
    if (n.kernel_h > 0) j["kernel"] = {n.kernel_h, n.kernel_w};
    if (n.stride != 1) j["stride"] = n.stride;
    if (n.dilation != 1) j["dilation"] = n.dilation;
    if (n.cell >= 0) j["cell"] = n.cell;
    nodes.push_back(std::move(j));
  }
  json cells = json::array();
  for (const auto& c : graph.cells) {
    cells.push_back({{"index", c.index}, {"stride", c.stride}, {"output_node", c.output_node}});
  }
  const CostReport cost = count_costs(graph);
  return json{{"schema_version", kGraphSchemaVersion},
              {"cell", cell_key(cell)},
              {"plan",
               {{"n", plan.n},
                {"f", plan.f},
                {"input_hw", plan.input_hw},
                {"input_channels", plan.input_channels},
                {"stem", plan.stem == Stem::none ? "none" : "conv3x3_stride2"},
                {"num_classes", plan.num_classes}}},
              {"nodes", std::move(nodes)},
              {"cells", std::move(cells)},
              {"stage_outputs", graph.stage_outputs},
              {"output_node", graph.output_node},
              {"costs", {{"params", cost.params}, {"mult_adds", cost.mult_adds}}}};
}

}  // namespace pnas
