#include "dal/tensor.hpp"

#include "dal/errors.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace dal {

namespace {

thread_local bool g_grad_enabled = true;
thread_local AllocationMeter* g_active_meter = nullptr;

}  // namespace

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

AllocationMeter::Scope::Scope(AllocationMeter* meter) : previous_(g_active_meter) {
  g_active_meter = meter;
}

AllocationMeter::Scope::~Scope() { g_active_meter = previous_; }

AllocationMeter* AllocationMeter::active() { return g_active_meter; }

void AllocationMeter::allocate(std::size_t n) {
  live_ += n;
  total_ += n;
  peak_ = std::max(peak_, live_);
}

void AllocationMeter::release(std::size_t n) { live_ -= n; }

Node::Node(Matrix v) : value(std::move(v)), meter(g_active_meter) {
  if (meter != nullptr) meter->allocate(static_cast<std::size_t>(value.size()));
}

Node::~Node() {
  if (meter != nullptr) meter->release(static_cast<std::size_t>(value.size()));
}

void Node::accumulate(const Matrix& g) { accumulate_expr(g); }

Tensor Tensor::constant(Matrix value) { return Tensor(std::make_shared<Node>(std::move(value))); }

Tensor Tensor::parameter(Matrix value) {
  auto node = std::make_shared<Node>(std::move(value));
  node->requires_grad = true;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  Tensor t = constant(Matrix::Zero(rows, cols));
  t.node_->requires_grad = requires_grad;
  return t;
}

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item() on non-scalar tensor " + shape_string(rows(), cols()));
  }
  return node_->value(0, 0);
}

Matrix Tensor::grad() const {
  if (has_grad()) return node_->grad;
  return Matrix::Zero(rows(), cols());
}

Tensor Tensor::detach() const { return constant(node_->value); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Matrix value, std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>(std::move(value));
  if (!g_grad_enabled) return Tensor(std::move(node));
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return Tensor(std::move(node));
  node->requires_grad = true;
  node->parents.reserve(inputs.size());
  for (auto& in : inputs) node->parents.push_back(in.node());
  node->backward_fn = std::move(backward_fn);
  return Tensor(std::move(node));
}

Tape::Tape(const Tensor& root) : root_(root) {
  // Iterative post-order DFS; graphs from deep models overflow recursion.
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

void Tape::backward() {
  Node& root = *root_.node();
  if (root.value.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        shape_string(root.value.rows(), root.value.cols()));
  }
  if (!root.requires_grad) {
    throw ContractError("backward() on a loss that does not depend on any parameter");
  }
  root.accumulate(Matrix::Ones(1, 1));
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
  }
}

void backward(const Tensor& loss) {
  Tape tape(loss);
  tape.backward();
}

std::vector<Matrix> gradients(const Tensor& loss, const std::vector<Tensor>& wrt) {
  Tape tape(loss);
  // Stash everything already accumulated so this pass is side-effect free.
  std::vector<Matrix> stashed(tape.size());
  for (std::size_t i = 0; i < tape.size(); ++i) std::swap(stashed[i], tape.nodes()[i]->grad);
  tape.backward();
  std::unordered_set<Node*> on_tape(tape.nodes().begin(), tape.nodes().end());
  std::vector<Matrix> out;
  out.reserve(wrt.size());
  for (const auto& t : wrt) {
    out.push_back(on_tape.count(t.node().get()) ? t.grad() : Matrix::Zero(t.rows(), t.cols()));
  }
  for (std::size_t i = 0; i < tape.size(); ++i) tape.nodes()[i]->grad = std::move(stashed[i]);
  return out;
}

}  // namespace dal
