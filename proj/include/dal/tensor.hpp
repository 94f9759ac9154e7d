#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dal {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using IndexMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_string(Index rows, Index cols);

// Counts live and peak numbers of doubles held by tensor values created while
// the meter is active. Buffers remember the meter that saw them allocated, so
// releases are recorded even after the scope has closed.
class AllocationMeter {
 public:
  class Scope {
   public:
    explicit Scope(AllocationMeter* meter);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    AllocationMeter* previous_;
  };

  std::size_t live() const { return live_; }
  std::size_t peak() const { return peak_; }
  std::size_t total() const { return total_; }
  void reset_peak() { peak_ = live_; }

  static AllocationMeter* active();

  void allocate(std::size_t n);
  void release(std::size_t n);

 private:
  std::size_t live_ = 0;
  std::size_t peak_ = 0;
  std::size_t total_ = 0;
};

struct Node {
  explicit Node(Matrix v);
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;
  AllocationMeter* meter = nullptr;

  void accumulate(const Matrix& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

// Handle onto a node of the gradient graph. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Matrix value);
  static Tensor parameter(Matrix value);
  static Tensor scalar(double v);
  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  // Zero matrix of the value's shape when nothing has flowed in yet.
  Matrix grad() const;
  void zero_grad() { node_->grad.resize(0, 0); }

  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds the output node of a primitive. Parents are recorded only when
// gradient mode is on and at least one input requires a gradient.
Tensor make_result(Matrix value, std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);

// Topologically ordered record of the nodes reachable from a root: every node
// appears after all of its inputs.
class Tape {
 public:
  explicit Tape(const Tensor& root);

  const std::vector<Node*>& nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

  // Seeds root.grad with ones and replays the nodes in reverse, visiting each
  // exactly once.
  void backward();

 private:
  Tensor root_;
  std::vector<Node*> order_;
};

// Accumulates d(loss)/d(x) into every reachable x that requires a gradient.
void backward(const Tensor& loss);

// Gradients of a scalar with respect to the given tensors, leaving every
// other accumulated gradient in the graph untouched.
std::vector<Matrix> gradients(const Tensor& loss, const std::vector<Tensor>& wrt);

}  // namespace dal
