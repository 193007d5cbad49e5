#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace kinedec::tensor {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct Node;
struct NodeAccess;
}

// Dense n-dimensional array of doubles with reverse-mode gradient tracking.
//
// Copies of a Tensor share the same storage node. Operations on tensors that
// require gradients record an implicit graph; backward() on a scalar result
// walks it once in reverse topological order, accumulating gradients
// additively at fan-out. The graph is consumed by backward: running it twice
// without a fresh forward pass is an error. A graph is single-threaded;
// independent graphs may run in parallel.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t ndim() const;
  int64_t size() const;
  int64_t dim(int axis) const;  // negative axis counts from the back

  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();  // leaves only (parameter updates)
  double item() const;                    // scalar tensors
  double at(std::initializer_list<int64_t> idx) const;

  bool requires_grad() const;
  bool is_leaf() const;
  // Gradient of the last backward() through this tensor; zeros if the loss
  // did not depend on it.
  const std::vector<double>& grad() const;
  void zero_grad() const;

  Tensor detached() const;  // same values, no history, no grad

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
  friend struct detail::NodeAccess;
};

// y[b,co,t'] = sum_{ci,k} w[co,ci,k] * x[b,ci,t'*stride - padding + k]
// Cross-correlation orientation; out-of-range taps read zero.
Tensor conv1d(const Tensor& x, const Tensor& w, int64_t stride, int64_t padding);
// Mean over sliding windows along the last axis: y_i = (1/k) sum_j x[i*s + j].
Tensor avg_pool1d(const Tensor& x, int64_t k, int64_t s);
// Affine map on the last axis: y = x W + b. Pass an undefined b to skip the bias.
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
// Normalizes the last axis to zero mean / unit variance, then applies gain
// and bias. The population variance is floored at eps, so near-constant
// inputs map to the bias rather than blowing up.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor softmax(const Tensor& x, int axis);
Tensor elu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// a[..., M, K] x b[..., K, N] with equal leading dims, or b as a shared [K, N].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x, int axis_a, int axis_b);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor mean_over_axis(const Tensor& x, int axis);
Tensor mean_all(const Tensor& x);
// Elementwise sum; b may also be a trailing-shape broadcast of a (e.g. [D] into [B,D]).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, equal shapes
Tensor scale(const Tensor& x, double c);
// x[b,c,...] * s[b,c], broadcasting s over all trailing axes.
Tensor scale_channels(const Tensor& x, const Tensor& s);
// Adds b (length = x.dim(axis)) along the given axis.
Tensor bias_axis(const Tensor& x, const Tensor& b, int axis);
Tensor reshape(const Tensor& x, Shape new_shape);
// Mean softmax cross-entropy of logits [B, C] against integer labels in [0, C).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Populates grad on every requires_grad leaf reachable from loss.
void backward(const Tensor& loss);

}  // namespace kinedec::tensor
