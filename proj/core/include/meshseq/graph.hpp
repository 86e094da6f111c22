#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "meshseq/hierarchy.hpp"
#include "meshseq/param_store.hpp"
#include "meshseq/spiral.hpp"
#include "meshseq/tensor.hpp"

namespace meshseq {

using ValueId = std::uint32_t;

// Eager reverse-mode tape. Every op computes its value immediately and
// records a backward closure; backward() walks the tape once in reverse.
// Gradients flow only into nodes that (transitively) need them, so frozen
// parameters never receive a gradient buffer. SpiralTable and SparseMatrix
// arguments are captured by reference and must outlive the graph.
class Graph {
 public:
  // --- leaves ---
  ValueId constant(Tensor value);
  ValueId input(Tensor value, bool needs_grad = false);
  // Copies the named tensor from the store; memoized, so repeated uses of a
  // parameter share one leaf and its gradient accumulates across uses.
  ValueId param(ParameterStore& store, const std::string& name);

  // --- elementwise / scalar ---
  ValueId add(ValueId a, ValueId b);
  ValueId sub(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);
  ValueId div(ValueId a, ValueId b);
  ValueId scale(ValueId a, double c);
  ValueId elu(ValueId a);
  ValueId gelu(ValueId a);
  ValueId exp(ValueId a);
  ValueId log(ValueId a);

  // --- linear algebra ---
  ValueId matmul(ValueId a, ValueId b);     // [NxK] x [KxM]
  ValueId matmul_nt(ValueId a, ValueId b);  // [NxK] x [MxK]^T
  ValueId linear(ValueId x, ValueId w, ValueId b);  // x W^T + b ; W is [out x in]

  // --- gathering / structure ---
  ValueId spiral_gather(ValueId x, const SpiralTable& table);  // V x (l*C)
  ValueId gather_rows(ValueId x, std::vector<std::uint32_t> idx);
  ValueId upsample(ValueId x, const SparseMatrix& u);
  ValueId slice_cols(ValueId x, std::size_t start, std::size_t len);
  ValueId concat_cols(const std::vector<ValueId>& xs);
  ValueId stack_rows(const std::vector<ValueId>& rows);  // each [1 x D] or [D]
  ValueId slice_row(ValueId x, std::size_t row);         // -> [1 x D]
  ValueId reshape(ValueId x, std::vector<std::size_t> shape);

  // --- normalization and attention ---
  ValueId layer_norm(ValueId x, ValueId gamma, ValueId beta, double eps = 1e-5);
  // per-channel stats over rows (vertices); batch-independent
  ValueId channel_norm(ValueId x, ValueId gamma, ValueId beta, double eps = 1e-5);
  // affine y = x * gamma + beta broadcast over rows, for inference with
  // precomputed statistics folded into gamma/beta
  ValueId row_affine(ValueId x, ValueId gamma, ValueId beta);
  // Row-wise softmax over unmasked key columns; masked columns get exactly
  // zero weight. Requires at least one unmasked key.
  ValueId masked_softmax(ValueId scores, const std::vector<std::uint8_t>& key_masked);

  // --- reductions ---
  ValueId sum(ValueId x);             // -> {1}
  ValueId mean(ValueId x);            // -> {1}
  ValueId dot(ValueId a, ValueId b);  // -> {1}
  ValueId frobenius_norm(ValueId x);  // -> {1}; zero gradient at exactly 0
  ValueId stack_scalars(const std::vector<ValueId>& xs);  // -> {n}
  ValueId mean_rows_masked(ValueId x, const std::vector<std::uint8_t>& row_masked);  // -> [1 x D]

  // --- access ---
  const Tensor& value(ValueId id) const { return nodes_[id].value; }
  double scalar(ValueId id) const { return nodes_[id].value.scalar_value(); }
  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(root) = 1 and walks the tape. root must be a scalar.
  void backward(ValueId root);
  bool has_grad(ValueId id) const { return nodes_[id].grad_present; }
  const Tensor& grad(ValueId id) const;

  // Gradients of trainable parameters used in this graph (after backward()).
  std::map<std::string, Tensor> trainable_grads() const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    bool grad_present = false;
    std::function<void(Graph&, ValueId)> back;
  };

  ValueId make(Tensor value, bool needs_grad);
  bool needs(ValueId id) const { return nodes_[id].needs_grad; }
  Tensor& grad_buf(ValueId id);
  void accumulate(ValueId id, const Tensor& g);

  std::vector<Node> nodes_;
  std::map<std::string, ValueId> param_nodes_;
  std::vector<std::pair<std::string, ValueId>> param_list_;
  std::map<std::string, bool> param_trainable_;
};

// Checks the loss is a finite scalar, runs backward, and returns per-name
// gradients for every trainable parameter in the graph. Throws on a
// non-finite loss or gradient so a training step can abort cleanly.
std::map<std::string, Tensor> forward_backward(Graph& g, ValueId loss);

}  // namespace meshseq
