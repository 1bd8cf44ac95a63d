#pragma once

#include <deque>
#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <utility>

#include "changekit/tensor.hpp"

namespace changekit {

class Tape;

/// Handle to a value recorded on a tape.
struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Operations append nodes in execution order; backward()
/// replays them in reverse, accumulating gradients. Single-writer: one
/// training step owns one tape.
class Tape {
 public:
  Value leaf(Tensor t) { return record(std::move(t), nullptr); }

  Value record(Tensor out, std::function<void(Tape&)> back) {
    if (check_finite && !out.all_finite())
      throw std::runtime_error("non-finite value produced on tape (node " +
                               std::to_string(nodes_.size()) + ")");
    nodes_.push_back(Node{std::move(out), Tensor{}, std::move(back)});
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& val(Value v) const { return node(v).value; }

  /// Gradient buffer, allocated (zeroed) on first access.
  Tensor& grad(Value v) {
    Node& n = node(v);
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
  }

  bool has_grad(Value v) const { return !node(v).grad.data.empty(); }

  /// Seed d(loss)/d(loss) = 1 and run all backward closures in reverse order.
  void backward(Value loss) {
    if (val(loss).numel() != 1)
      throw std::invalid_argument("backward() requires a scalar loss");
    grad(loss).data[0] += 1.0f;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && !n.grad.data.empty()) n.back(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

  /// Scalar reductions additionally publish their double-precision
  /// accumulator here, so the finite-difference oracle can read losses
  /// without float32 quantization. Forward values stay 32-bit.
  void set_f64(Value v, double d) { f64_[v.id] = d; }
  bool has_f64(Value v) const { return f64_.count(v.id) != 0; }
  double scalar_f64(Value v) const {
    auto it = f64_.find(v.id);
    return it != f64_.end() ? it->second : static_cast<double>(val(v).item());
  }

  /// Non-smooth ops mix their discrete decisions (relu signs, bilinear cell
  /// indices, clamp hits) into this hash. Two evaluations with different
  /// hashes took different linearization branches, so finite differences
  /// across them straddle a kink.
  void note_branch(uint64_t v) {
    branch_hash = (branch_hash ^ (v + 0x9e3779b97f4a7c15ULL)) * 0x100000001b3ULL;
  }
  uint64_t branch_hash = 0;

  bool check_finite = true;

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched
    std::function<void(Tape&)> back;
  };

  Node& node(Value v) {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
      throw std::logic_error("invalid tape value handle");
    return nodes_[static_cast<size_t>(v.id)];
  }
  const Node& node(Value v) const { return const_cast<Tape*>(this)->node(v); }

  std::deque<Node> nodes_;
  std::unordered_map<int, double> f64_;
};

}  // namespace changekit
