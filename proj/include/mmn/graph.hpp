#ifndef MMN_GRAPH_HPP_
#define MMN_GRAPH_HPP_

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmn/tensor.hpp"

namespace mmn::diffcore {

// A learnable tensor. lr_scale multiplies the optimizer learning rate.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  double lr_scale = 1.0;
};

// Named parameters in insertion order. References stay valid for the
// lifetime of the store.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor init, double lr_scale = 1.0);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t total_values() const;

  void zero_grad();
  // Global l2 norm over all gradients.
  double grad_norm() const;

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

enum class OpKind {
  kLeaf,
  kConstant,
  kMatmul,
  kAdd,
  kScale,
  kRelu,
  kConv2dSame,
  kMaxpoolInterval,
  kLayerNorm,
  kL2Normalize,
  kSigmoid,
  kLog,
  kExp,
  kSum,
  kMean,
  kMaskedFill,
  kGatherRows,
  kTake,
  kReshape,
  kConcatRows,
  kLogSumExp,
  kBceWithLogits,
  kAddN,
};

const char* op_name(OpKind kind);

class Graph;

// Handle to a node of a Graph.
class Var {
 public:
  Var() = default;

  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  // Gradient after Graph::backward; zeros when the node was not reached.
  Tensor grad() const;

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

struct OpRecord {
  OpKind kind;
  std::vector<std::size_t> inputs;
  std::size_t output;
};

// Tape of operations in topological (creation) order. Construct with
// record_gradients = false for pure forward evaluation.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  explicit Graph(bool record_gradients = true)
      : record_gradients_(record_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Leaf that receives a gradient but is not bound to a parameter.
  Var variable(Tensor value);
  // Leaf bound to a parameter; backward() on a recording graph accumulates
  // into p.grad. Repeated calls with the same parameter return the same node.
  // Non-recording graphs never write to the parameter.
  Var param(const Parameter& p);

  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  Tensor grad(std::size_t id) const;
  std::size_t size() const { return nodes_.size(); }
  std::vector<OpRecord> records() const;
  bool recording() const { return record_gradients_; }

  // Operator plumbing.
  Var emit(OpKind kind, std::vector<std::size_t> inputs, Tensor value,
           BackwardFn backward);
  // Gradient flowing into node `id`; allocated on first use.
  Tensor& grad_buffer(std::size_t id);
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  bool record_gradients_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::map<const Parameter*, std::size_t> param_nodes_;
};

// Operators. Masks are row-major bytes over the leading two axes.
Var matmul(Var a, Var b, bool transpose_b = false);
// Same shapes, or b of rank 1 matching the trailing axis of a (row bias).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
Var relu(Var a);
Var sigmoid(Var a);
Var log(Var a);
Var exp(Var a);
Var sum(Var a);
Var mean(Var a);
// x: [H, W, Cin], weight: [K, K, Cin, Cout], bias: [Cout]; zero padding,
// stride 1. When out_mask is nonempty, cells with out_mask == 0 are
// written as zero, identical to masked_fill on the full result.
Var conv2d_same(Var x, Var weight, std::optional<Var> bias,
                std::span<const std::uint8_t> out_mask = {});
// clips: [N, d] -> [N, N, d]; cell (i, j) with valid != 0 holds the
// coordinatewise max of rows i..j, others zero. Ties route gradient to the
// lowest row index.
Var maxpool_interval(Var clips, std::span<const std::uint8_t> valid);
// Normalizes the trailing axis.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// x / sqrt(|x|^2 + eps) along the trailing axis. eps == 0 rejects zero rows.
Var l2_normalize(Var x, double eps = 1e-12);
// Cells (leading two axes) with fill_mask != 0 are set to value.
Var masked_fill(Var x, std::span<const std::uint8_t> fill_mask, double value);
// table: [V, d] -> [n, d].
Var gather_rows(Var table, std::span<const std::size_t> rows);
// Flat-index gather -> [n].
Var take(Var x, std::span<const std::size_t> flat_indices);
Var reshape(Var x, Shape shape);
Var concat_rows(std::span<const Var> parts);
// log(sum(exp(x))) over all values, max-shifted.
Var logsumexp(Var x);
// Mean binary cross entropy of sigmoid(logits) against constant targets.
Var bce_with_logits(Var logits, const Tensor& targets);
Var add_n(std::span<const Var> terms);

}  // namespace mmn::diffcore

#endif  // MMN_GRAPH_HPP_
