#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ssm/error.hpp"

namespace ssm {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<Index>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense n-d array, row-major, with an optional gradient buffer of the same
// shape. Gradients of requires_grad == false leaves are never allocated.
template <typename Scalar>
struct Tensor {
  Shape shape;
  Vec<Scalar> data;
  Vec<Scalar> grad;  // size 0 until first accumulation
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, bool rg = false)
      : shape(std::move(s)), data(Vec<Scalar>::Zero(shape_numel(shape))), requires_grad(rg) {}

  Index numel() const { return data.size(); }
  Index ndim() const { return static_cast<Index>(shape.size()); }
  Index dim(std::size_t i) const { return shape[i]; }

  // 2-D views; shape is interpreted row-major.
  Index rows() const { return shape.empty() ? 1 : shape[0]; }
  Index cols() const { return numel() / rows(); }

  Eigen::Map<MatRM<Scalar>> mat() { return {data.data(), rows(), cols()}; }
  Eigen::Map<const MatRM<Scalar>> mat() const { return {data.data(), rows(), cols()}; }
  Eigen::Map<MatRM<Scalar>> grad_mat() { return {grad.data(), rows(), cols()}; }

  bool has_grad() const { return grad.size() == data.size(); }
  void ensure_grad() {
    if (!has_grad()) grad = Vec<Scalar>::Zero(data.size());
  }
  void zero_grad() { grad.resize(0); }
};

template <typename Scalar>
using TensorPtr = std::shared_ptr<Tensor<Scalar>>;

template <typename Scalar>
TensorPtr<Scalar> make_tensor(Shape shape, bool requires_grad = false) {
  return std::make_shared<Tensor<Scalar>>(std::move(shape), requires_grad);
}

template <typename Scalar>
TensorPtr<Scalar> make_tensor(Shape shape, std::initializer_list<Scalar> values,
                              bool requires_grad = false) {
  auto t = make_tensor<Scalar>(std::move(shape), requires_grad);
  if (static_cast<Index>(values.size()) != t->numel())
    throw ShapeError("tensor literal size mismatch for shape " + shape_str(t->shape));
  std::copy(values.begin(), values.end(), t->data.data());
  return t;
}

// Define-by-run gradient tape. Records one node per op, in execution order;
// backward() replays the nodes in reverse, visiting each exactly once.
// A tape and the tensors recorded on it belong to a single thread.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(TensorPtr<Scalar> out, BackwardFn backward) {
    nodes_.push_back({std::move(out), std::move(backward)});
  }

  // Seeds d(loss)/d(loss) = 1 and propagates through all recorded nodes.
  // Gradients accumulate additively across multiple uses of a tensor.
  void backward(const TensorPtr<Scalar>& loss) {
    if (loss->numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss->shape));
    loss->ensure_grad();
    loss->grad[0] = Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->has_grad()) it->backward();
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    TensorPtr<Scalar> out;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
bool track(const TensorPtr<Scalar>& t) {
  return t->requires_grad;
}

template <typename Scalar>
void check_same_shape(const TensorPtr<Scalar>& a, const TensorPtr<Scalar>& b, const char* op) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                     shape_str(b->shape));
}

}  // namespace detail

// ---- primitive ops ---------------------------------------------------------

template <typename Scalar>
TensorPtr<Scalar> matmul(Tape<Scalar>& tape, TensorPtr<Scalar> a, TensorPtr<Scalar> b) {
  if (a->ndim() != 2 || b->ndim() != 2 || a->shape[1] != b->shape[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a->shape) + " and " +
                     shape_str(b->shape));
  auto out = make_tensor<Scalar>({a->shape[0], b->shape[1]},
                                 detail::track(a) || detail::track(b));
  out->mat().noalias() = a->mat() * b->mat();
  tape.record(out, [a, b, out] {
    if (a->requires_grad) {
      a->ensure_grad();
      a->grad_mat().noalias() += out->grad_mat() * b->mat().transpose();
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->grad_mat().noalias() += a->mat().transpose() * out->grad_mat();
    }
  });
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> add(Tape<Scalar>& tape, TensorPtr<Scalar> a, TensorPtr<Scalar> b) {
  detail::check_same_shape(a, b, "add");
  auto out = make_tensor<Scalar>(a->shape, detail::track(a) || detail::track(b));
  out->data = a->data + b->data;
  tape.record(out, [a, b, out] {
    if (a->requires_grad) {
      a->ensure_grad();
      a->grad += out->grad;
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->grad += out->grad;
    }
  });
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> sub(Tape<Scalar>& tape, TensorPtr<Scalar> a, TensorPtr<Scalar> b) {
  detail::check_same_shape(a, b, "sub");
  auto out = make_tensor<Scalar>(a->shape, detail::track(a) || detail::track(b));
  out->data = a->data - b->data;
  tape.record(out, [a, b, out] {
    if (a->requires_grad) {
      a->ensure_grad();
      a->grad += out->grad;
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->grad -= out->grad;
    }
  });
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> mul(Tape<Scalar>& tape, TensorPtr<Scalar> a, TensorPtr<Scalar> b) {
  detail::check_same_shape(a, b, "mul");
  auto out = make_tensor<Scalar>(a->shape, detail::track(a) || detail::track(b));
  out->data = a->data.cwiseProduct(b->data);
  tape.record(out, [a, b, out] {
    if (a->requires_grad) {
      a->ensure_grad();
      a->grad += out->grad.cwiseProduct(b->data);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->grad += out->grad.cwiseProduct(a->data);
    }
  });
  return out;
}

// Subgradient at 0 is 0: gradient passes only where the input is strictly
// positive, which keeps zero-structure assertions exact.
template <typename Scalar>
TensorPtr<Scalar> relu(Tape<Scalar>& tape, TensorPtr<Scalar> x) {
  auto out = make_tensor<Scalar>(x->shape, detail::track(x));
  out->data = x->data.cwiseMax(Scalar(0));
  tape.record(out, [x, out] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    x->grad += (x->data.array() > Scalar(0))
                   .select(out->grad.array(), Scalar(0))
                   .matrix();
  });
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> exp_op(Tape<Scalar>& tape, TensorPtr<Scalar> x) {
  auto out = make_tensor<Scalar>(x->shape, detail::track(x));
  out->data = x->data.array().exp().matrix();
  tape.record(out, [x, out] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    x->grad += out->grad.cwiseProduct(out->data);
  });
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> log_op(Tape<Scalar>& tape, TensorPtr<Scalar> x) {
  if ((x->data.array() <= Scalar(0)).any())
    throw DomainError("log: non-positive input element");
  auto out = make_tensor<Scalar>(x->shape, detail::track(x));
  out->data = x->data.array().log().matrix();
  tape.record(out, [x, out] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    x->grad += out->grad.cwiseQuotient(x->data);
  });
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> scale(Tape<Scalar>& tape, TensorPtr<Scalar> x, Scalar factor) {
  auto out = make_tensor<Scalar>(x->shape, detail::track(x));
  out->data = x->data * factor;
  tape.record(out, [x, out, factor] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    x->grad += out->grad * factor;
  });
  return out;
}

// Broadcast-add a length-N vector to every row of a B x N tensor.
template <typename Scalar>
TensorPtr<Scalar> add_rowvec(Tape<Scalar>& tape, TensorPtr<Scalar> x, TensorPtr<Scalar> v) {
  if (x->ndim() != 2 || v->numel() != x->shape[1])
    throw ShapeError("add_rowvec: " + shape_str(x->shape) + " vs " + shape_str(v->shape));
  auto out = make_tensor<Scalar>(x->shape, detail::track(x) || detail::track(v));
  out->mat() = x->mat().rowwise() + v->data.transpose();
  tape.record(out, [x, v, out] {
    if (x->requires_grad) {
      x->ensure_grad();
      x->grad += out->grad;
    }
    if (v->requires_grad) {
      v->ensure_grad();
      v->grad += out->grad_mat().colwise().sum().transpose();
    }
  });
  return out;
}

// Channel-prefix view: the first `count` columns of a B x C tensor. Backward
// scatters into columns [0, count) only, so positions >= count receive an
// exact 0.0 contribution. Repeated slices of the same tensor accumulate.
template <typename Scalar>
TensorPtr<Scalar> slice_channels(Tape<Scalar>& tape, TensorPtr<Scalar> x, Index count) {
  if (x->ndim() != 2) throw ShapeError("slice_channels: need B x C input, got " + shape_str(x->shape));
  if (count <= 0 || count > x->shape[1])
    throw ShapeError("slice_channels: count " + std::to_string(count) + " outside [1, " +
                     std::to_string(x->shape[1]) + "]");
  auto out = make_tensor<Scalar>({x->shape[0], count}, detail::track(x));
  out->mat() = x->mat().leftCols(count);
  tape.record(out, [x, out, count] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    x->grad_mat().leftCols(count) += out->grad_mat();
  });
  return out;
}

enum class Reduce { kSum, kMean };

// Full reduction to a scalar tensor.
template <typename Scalar>
TensorPtr<Scalar> reduce_all(Tape<Scalar>& tape, Reduce op, TensorPtr<Scalar> x) {
  auto out = make_tensor<Scalar>({1}, detail::track(x));
  Scalar denom = op == Reduce::kMean ? Scalar(x->numel()) : Scalar(1);
  out->data[0] = x->data.sum() / denom;
  tape.record(out, [x, out, denom] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    x->grad.array() += out->grad[0] / denom;
  });
  return out;
}

// Reduction of a 2-D tensor along one axis (0 = over rows, 1 = over cols).
template <typename Scalar>
TensorPtr<Scalar> reduce_axis(Tape<Scalar>& tape, Reduce op, TensorPtr<Scalar> x, int axis) {
  if (x->ndim() != 2) throw ShapeError("reduce_axis: need 2-D input, got " + shape_str(x->shape));
  if (axis != 0 && axis != 1) throw ShapeError("reduce_axis: invalid axis " + std::to_string(axis));
  Index out_len = axis == 0 ? x->shape[1] : x->shape[0];
  Scalar denom = op == Reduce::kMean ? Scalar(axis == 0 ? x->shape[0] : x->shape[1]) : Scalar(1);
  auto out = make_tensor<Scalar>({out_len}, detail::track(x));
  if (axis == 0)
    out->data = x->mat().colwise().sum().transpose() / denom;
  else
    out->data = x->mat().rowwise().sum() / denom;
  tape.record(out, [x, out, axis, denom] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    if (axis == 0)
      x->grad_mat().rowwise() += (out->grad / denom).transpose();
    else
      x->grad_mat().colwise() += out->grad / denom;
  });
  return out;
}

// Single-element pick, as a scalar tensor (used to backpropagate from one
// logit, e.g. for attribution maps).
template <typename Scalar>
TensorPtr<Scalar> pick(Tape<Scalar>& tape, TensorPtr<Scalar> x, Index row, Index col) {
  if (x->ndim() != 2 || row < 0 || row >= x->shape[0] || col < 0 || col >= x->shape[1])
    throw ShapeError("pick: index (" + std::to_string(row) + "," + std::to_string(col) +
                     ") outside " + shape_str(x->shape));
  auto out = make_tensor<Scalar>({1}, detail::track(x));
  out->data[0] = x->mat()(row, col);
  tape.record(out, [x, out, row, col] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    x->grad_mat()(row, col) += out->grad[0];
  });
  return out;
}

}  // namespace ssm
