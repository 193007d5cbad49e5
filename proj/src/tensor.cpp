#include "kinedec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace kinedec::tensor {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
};

struct NodeAccess {
  static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
  static const std::shared_ptr<Node>& node(const Tensor& t) { return t.node_; }
};

}  // namespace detail

namespace {

using detail::Node;
using detail::NodeAccess;

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

const std::shared_ptr<Node>& node_of(const Tensor& t, const char* op) {
  const auto& n = NodeAccess::node(t);
  if (!n) throw std::invalid_argument(std::string(op) + ": undefined tensor");
  return n;
}

std::vector<double>& gref(Node& n) {
  if (n.grad.size() != n.val.size()) n.grad.assign(n.val.size(), 0.0);
  return n.grad;
}

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  for (int64_t d : shape)
    check(d >= 1, "tensor: dimensions must be positive, got " + shape_str(shape));
  check(static_cast<int64_t>(values.size()) == numel(shape),
        "tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::move(values);
  n->requires_grad = requires_grad;
  return n;
}

// Records an op node. When no parent tracks gradients the graph edge is
// dropped and the result behaves like a constant leaf.
Tensor make_op(Shape shape, std::vector<double> val,
               std::vector<std::shared_ptr<Node>> parents,
               std::function<void(Node&)> backprop) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  if (rg) {
    n->requires_grad = true;
    n->leaf = false;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return NodeAccess::wrap(std::move(n));
}

int normalize_axis(int axis, int ndim, const char* op) {
  int a = axis < 0 ? axis + ndim : axis;
  check(a >= 0 && a < ndim, std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for rank " + std::to_string(ndim));
  return a;
}

struct AxisSplit {
  int64_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit sp{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) sp.outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int64_t n = numel(shape);
  return detail::NodeAccess::wrap(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int64_t n = numel(shape);
  return detail::NodeAccess::wrap(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return detail::NodeAccess::wrap(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_of(*this, "shape")->shape; }

int64_t Tensor::ndim() const { return static_cast<int64_t>(shape().size()); }

int64_t Tensor::size() const { return numel(shape()); }

int64_t Tensor::dim(int axis) const {
  const Shape& s = shape();
  return s[normalize_axis(axis, static_cast<int>(s.size()), "dim")];
}

const std::vector<double>& Tensor::values() const { return node_of(*this, "values")->val; }

std::vector<double>& Tensor::mutable_values() {
  const auto& n = node_of(*this, "mutable_values");
  if (!n->leaf)
    throw std::runtime_error("mutable_values: tensor is an op result, not a leaf");
  return n->val;
}

double Tensor::item() const {
  const auto& n = node_of(*this, "item");
  check(n->val.size() == 1,
        "item: tensor has " + std::to_string(n->val.size()) + " elements, expected 1");
  return n->val[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  const auto& n = node_of(*this, "at");
  check(idx.size() == n->shape.size(),
        "at: " + std::to_string(idx.size()) + " indices for shape " + shape_str(n->shape));
  int64_t flat = 0;
  size_t d = 0;
  for (int64_t i : idx) {
    check(i >= 0 && i < n->shape[d], "at: index " + std::to_string(i) + " out of range for axis " +
                                         std::to_string(d) + " of " + shape_str(n->shape));
    flat = flat * n->shape[d] + i;
    ++d;
  }
  return n->val[flat];
}

bool Tensor::requires_grad() const { return node_of(*this, "requires_grad")->requires_grad; }

bool Tensor::is_leaf() const { return node_of(*this, "is_leaf")->leaf; }

const std::vector<double>& Tensor::grad() const {
  const auto& n = node_of(*this, "grad");
  return gref(*n);
}

void Tensor::zero_grad() const {
  const auto& n = node_of(*this, "zero_grad");
  n->grad.assign(n->val.size(), 0.0);
}

Tensor Tensor::detached() const {
  const auto& n = node_of(*this, "detached");
  return detail::NodeAccess::wrap(make_leaf(n->shape, n->val, false));
}

Tensor conv1d(const Tensor& x, const Tensor& w, int64_t stride, int64_t padding) {
  const auto& xn = node_of(x, "conv1d");
  const auto& wn = node_of(w, "conv1d");
  check(xn->shape.size() == 3,
        "conv1d: input must be [batch, channels, time], got " + shape_str(xn->shape));
  check(wn->shape.size() == 3,
        "conv1d: kernel must be [out_channels, in_channels, width], got " + shape_str(wn->shape));
  const int64_t B = xn->shape[0], Ci = xn->shape[1], T = xn->shape[2];
  const int64_t Co = wn->shape[0], K = wn->shape[2];
  check(wn->shape[1] == Ci, "conv1d: kernel expects " + std::to_string(wn->shape[1]) +
                                " input channels, input has " + std::to_string(Ci));
  check(stride >= 1, "conv1d: stride must be >= 1");
  check(padding >= 0, "conv1d: padding must be >= 0");
  check(K <= T + 2 * padding, "conv1d: kernel width " + std::to_string(K) +
                                  " exceeds padded input length " + std::to_string(T + 2 * padding));
  const int64_t To = (T + 2 * padding - K) / stride + 1;

  std::vector<double> out(B * Co * To, 0.0);
  const auto& xv = xn->val;
  const auto& wv = wn->val;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t t = 0; t < To; ++t) {
        const int64_t base = t * stride - padding;
        double acc = 0.0;
        for (int64_t ci = 0; ci < Ci; ++ci) {
          const double* xr = &xv[(b * Ci + ci) * T];
          const double* wr = &wv[(co * Ci + ci) * K];
          const int64_t k0 = std::max<int64_t>(0, -base);
          const int64_t k1 = std::min<int64_t>(K, T - base);
          for (int64_t k = k0; k < k1; ++k) acc += wr[k] * xr[base + k];
        }
        out[(b * Co + co) * To + t] = acc;
      }

  auto backprop = [B, Ci, T, Co, K, To, stride, padding](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const auto& gy = self.grad;
    if (px.requires_grad) {
      auto& gx = gref(px);
      const auto& wv = pw.val;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Co; ++co)
          for (int64_t t = 0; t < To; ++t) {
            const int64_t base = t * stride - padding;
            const double g = gy[(b * Co + co) * To + t];
            if (g == 0.0) continue;
            for (int64_t ci = 0; ci < Ci; ++ci) {
              double* gxr = &gx[(b * Ci + ci) * T];
              const double* wr = &wv[(co * Ci + ci) * K];
              const int64_t k0 = std::max<int64_t>(0, -base);
              const int64_t k1 = std::min<int64_t>(K, T - base);
              for (int64_t k = k0; k < k1; ++k) gxr[base + k] += g * wr[k];
            }
          }
    }
    if (pw.requires_grad) {
      auto& gw = gref(pw);
      const auto& xv = px.val;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Co; ++co)
          for (int64_t t = 0; t < To; ++t) {
            const int64_t base = t * stride - padding;
            const double g = gy[(b * Co + co) * To + t];
            if (g == 0.0) continue;
            for (int64_t ci = 0; ci < Ci; ++ci) {
              const double* xr = &xv[(b * Ci + ci) * T];
              double* gwr = &gw[(co * Ci + ci) * K];
              const int64_t k0 = std::max<int64_t>(0, -base);
              const int64_t k1 = std::min<int64_t>(K, T - base);
              for (int64_t k = k0; k < k1; ++k) gwr[k] += g * xr[base + k];
            }
          }
    }
  };
  return make_op({B, Co, To}, std::move(out), {xn, wn}, std::move(backprop));
}

Tensor avg_pool1d(const Tensor& x, int64_t k, int64_t s) {
  const auto& xn = node_of(x, "avg_pool1d");
  check(!xn->shape.empty(), "avg_pool1d: input must have a time axis");
  const int64_t T = xn->shape.back();
  check(k >= 1, "avg_pool1d: window must be >= 1");
  check(s >= 1, "avg_pool1d: stride must be >= 1");
  check(k <= T, "avg_pool1d: window " + std::to_string(k) + " larger than input length " +
                    std::to_string(T));
  const int64_t To = (T - k) / s + 1;
  const int64_t R = numel(xn->shape) / T;

  Shape out_shape = xn->shape;
  out_shape.back() = To;
  std::vector<double> out(R * To);
  const double inv_k = 1.0 / static_cast<double>(k);
  for (int64_t r = 0; r < R; ++r) {
    const double* xr = &xn->val[r * T];
    for (int64_t t = 0; t < To; ++t) {
      double acc = 0.0;
      for (int64_t j = 0; j < k; ++j) acc += xr[t * s + j];
      out[r * To + t] = acc * inv_k;
    }
  }

  auto backprop = [R, T, To, k, s, inv_k](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = gref(px);
    const auto& gy = self.grad;
    for (int64_t r = 0; r < R; ++r)
      for (int64_t t = 0; t < To; ++t) {
        const double g = gy[r * To + t] * inv_k;
        for (int64_t j = 0; j < k; ++j) gx[r * T + t * s + j] += g;
      }
  };
  return make_op(std::move(out_shape), std::move(out), {xn}, std::move(backprop));
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto& xn = node_of(x, "dense");
  const auto& wn = node_of(w, "dense");
  check(wn->shape.size() == 2, "dense: weight must be 2-d, got " + shape_str(wn->shape));
  check(!xn->shape.empty() && xn->shape.back() == wn->shape[0],
        "dense: input " + shape_str(xn->shape) + " does not match weight " + shape_str(wn->shape));
  const int64_t Di = wn->shape[0], Do = wn->shape[1];
  const int64_t R = numel(xn->shape) / Di;
  const bool with_bias = NodeAccess::node(b) != nullptr;
  if (with_bias) {
    const auto& bn = NodeAccess::node(b);
    check(bn->shape.size() == 1 && bn->shape[0] == Do,
          "dense: bias must be [" + std::to_string(Do) + "], got " + shape_str(bn->shape));
  }

  Shape out_shape = xn->shape;
  out_shape.back() = Do;
  std::vector<double> out(R * Do, 0.0);
  if (with_bias) {
    const auto& bv = NodeAccess::node(b)->val;
    for (int64_t r = 0; r < R; ++r)
      std::copy(bv.begin(), bv.end(), out.begin() + r * Do);
  }
  for (int64_t r = 0; r < R; ++r) {
    const double* xr = &xn->val[r * Di];
    double* yr = &out[r * Do];
    for (int64_t i = 0; i < Di; ++i) {
      const double xi = xr[i];
      if (xi == 0.0) continue;
      const double* wr = &wn->val[i * Do];
      for (int64_t o = 0; o < Do; ++o) yr[o] += xi * wr[o];
    }
  }

  auto backprop = [R, Di, Do, with_bias](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const auto& gy = self.grad;
    if (px.requires_grad) {
      auto& gx = gref(px);
      for (int64_t r = 0; r < R; ++r) {
        const double* gyr = &gy[r * Do];
        double* gxr = &gx[r * Di];
        for (int64_t i = 0; i < Di; ++i) {
          const double* wr = &pw.val[i * Do];
          double acc = 0.0;
          for (int64_t o = 0; o < Do; ++o) acc += gyr[o] * wr[o];
          gxr[i] += acc;
        }
      }
    }
    if (pw.requires_grad) {
      auto& gw = gref(pw);
      for (int64_t r = 0; r < R; ++r) {
        const double* xr = &px.val[r * Di];
        const double* gyr = &gy[r * Do];
        for (int64_t i = 0; i < Di; ++i) {
          const double xi = xr[i];
          if (xi == 0.0) continue;
          double* gwr = &gw[i * Do];
          for (int64_t o = 0; o < Do; ++o) gwr[o] += xi * gyr[o];
        }
      }
    }
    if (with_bias && self.parents[2]->requires_grad) {
      auto& gb = gref(*self.parents[2]);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t o = 0; o < Do; ++o) gb[o] += gy[r * Do + o];
    }
  };
  std::vector<std::shared_ptr<Node>> parents{xn, wn};
  if (with_bias) parents.push_back(NodeAccess::node(b));
  return make_op(std::move(out_shape), std::move(out), std::move(parents), std::move(backprop));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto& xn = node_of(x, "layer_norm");
  const auto& gn = node_of(gain, "layer_norm");
  const auto& bn = node_of(bias, "layer_norm");
  check(!xn->shape.empty(), "layer_norm: input must have a feature axis");
  const int64_t D = xn->shape.back();
  check(gn->shape.size() == 1 && gn->shape[0] == D,
        "layer_norm: gain must be [" + std::to_string(D) + "], got " + shape_str(gn->shape));
  check(bn->shape.size() == 1 && bn->shape[0] == D,
        "layer_norm: bias must be [" + std::to_string(D) + "], got " + shape_str(bn->shape));
  const int64_t R = numel(xn->shape) / D;

  std::vector<double> out(R * D);
  std::vector<double> cen(R * D);
  std::vector<double> inv(R);
  std::vector<char> floored(R);
  for (int64_t r = 0; r < R; ++r) {
    const double* xr = &xn->val[r * D];
    double m = 0.0;
    for (int64_t j = 0; j < D; ++j) m += xr[j];
    m /= static_cast<double>(D);
    double v = 0.0;
    for (int64_t j = 0; j < D; ++j) {
      const double c = xr[j] - m;
      cen[r * D + j] = c;
      v += c * c;
    }
    v /= static_cast<double>(D);
    floored[r] = v < eps;
    inv[r] = 1.0 / std::sqrt(floored[r] ? eps : v);
    for (int64_t j = 0; j < D; ++j)
      out[r * D + j] = gn->val[j] * cen[r * D + j] * inv[r] + bn->val[j];
  }

  auto backprop = [R, D, cen = std::move(cen), inv = std::move(inv),
                   floored = std::move(floored)](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const auto& gy = self.grad;
    const double dn = static_cast<double>(D);
    if (px.requires_grad) {
      auto& gx = gref(px);
      std::vector<double> dxhat(D);
      for (int64_t r = 0; r < R; ++r) {
        const double iv = inv[r];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int64_t j = 0; j < D; ++j) {
          dxhat[j] = gy[r * D + j] * pg.val[j];
          sum_dxhat += dxhat[j];
          sum_dxhat_xhat += dxhat[j] * cen[r * D + j] * iv;
        }
        // When the floor binds the normalizer is constant in x.
        const double dvar = floored[r] ? 0.0 : -0.5 * iv * iv * sum_dxhat_xhat;
        const double dmean = -iv * sum_dxhat;
        for (int64_t j = 0; j < D; ++j)
          gx[r * D + j] += dxhat[j] * iv + (dvar * 2.0 * cen[r * D + j] + dmean) / dn;
      }
    }
    if (pg.requires_grad) {
      auto& gg = gref(pg);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t j = 0; j < D; ++j)
          gg[j] += gy[r * D + j] * cen[r * D + j] * inv[r];
    }
    if (pb.requires_grad) {
      auto& gb = gref(pb);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t j = 0; j < D; ++j) gb[j] += gy[r * D + j];
    }
  };
  return make_op(xn->shape, std::move(out), {xn, gn, bn}, std::move(backprop));
}

Tensor softmax(const Tensor& x, int axis) {
  const auto& xn = node_of(x, "softmax");
  const int a = normalize_axis(axis, static_cast<int>(xn->shape.size()), "softmax");
  const AxisSplit sp = split_axis(xn->shape, a);

  std::vector<double> out(xn->val.size());
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      const int64_t base = o * sp.len * sp.inner + in;
      double mx = xn->val[base];
      for (int64_t i = 1; i < sp.len; ++i)
        mx = std::max(mx, xn->val[base + i * sp.inner]);
      double z = 0.0;
      for (int64_t i = 0; i < sp.len; ++i) {
        const double e = std::exp(xn->val[base + i * sp.inner] - mx);
        out[base + i * sp.inner] = e;
        z += e;
      }
      for (int64_t i = 0; i < sp.len; ++i) out[base + i * sp.inner] /= z;
    }

  auto backprop = [sp](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = gref(px);
    const auto& gy = self.grad;
    const auto& y = self.val;
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t in = 0; in < sp.inner; ++in) {
        const int64_t base = o * sp.len * sp.inner + in;
        double dot = 0.0;
        for (int64_t i = 0; i < sp.len; ++i) {
          const int64_t ix = base + i * sp.inner;
          dot += gy[ix] * y[ix];
        }
        for (int64_t i = 0; i < sp.len; ++i) {
          const int64_t ix = base + i * sp.inner;
          gx[ix] += y[ix] * (gy[ix] - dot);
        }
      }
  };
  return make_op(xn->shape, std::move(out), {xn}, std::move(backprop));
}

Tensor elu(const Tensor& x) {
  const auto& xn = node_of(x, "elu");
  std::vector<double> out(xn->val.size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = xn->val[i];
    out[i] = v > 0.0 ? v : std::expm1(v);
  }
  auto backprop = [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = gref(px);
    for (size_t i = 0; i < self.val.size(); ++i)
      gx[i] += self.grad[i] * (px.val[i] > 0.0 ? 1.0 : self.val[i] + 1.0);
  };
  return make_op(xn->shape, std::move(out), {xn}, std::move(backprop));
}

Tensor relu(const Tensor& x) {
  const auto& xn = node_of(x, "relu");
  std::vector<double> out(xn->val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, xn->val[i]);
  auto backprop = [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = gref(px);
    for (size_t i = 0; i < self.val.size(); ++i)
      if (px.val[i] > 0.0) gx[i] += self.grad[i];
  };
  return make_op(xn->shape, std::move(out), {xn}, std::move(backprop));
}

Tensor sigmoid(const Tensor& x) {
  const auto& xn = node_of(x, "sigmoid");
  std::vector<double> out(xn->val.size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = xn->val[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  auto backprop = [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = gref(px);
    for (size_t i = 0; i < self.val.size(); ++i)
      gx[i] += self.grad[i] * self.val[i] * (1.0 - self.val[i]);
  };
  return make_op(xn->shape, std::move(out), {xn}, std::move(backprop));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& an = node_of(a, "matmul");
  const auto& bn = node_of(b, "matmul");
  check(an->shape.size() >= 2 && bn->shape.size() >= 2,
        "matmul: operands must be at least 2-d, got " + shape_str(an->shape) + " and " +
            shape_str(bn->shape));
  const int64_t M = an->shape[an->shape.size() - 2];
  const int64_t K = an->shape[an->shape.size() - 1];

  // Either b is a shared [K,N] applied to every batch of a, or a and b carry
  // identical leading dims and multiply batch by batch.
  const bool shared_b = bn->shape.size() == 2 && an->shape.size() > 2;
  if (!shared_b && an->shape.size() != bn->shape.size())
    check(bn->shape.size() == 2, "matmul: incompatible shapes " + shape_str(an->shape) + " and " +
                                     shape_str(bn->shape));
  if (!shared_b && an->shape.size() == bn->shape.size()) {
    for (size_t i = 0; i + 2 < an->shape.size(); ++i)
      check(an->shape[i] == bn->shape[i], "matmul: leading dims differ, " + shape_str(an->shape) +
                                              " vs " + shape_str(bn->shape));
  }
  check(bn->shape[bn->shape.size() - 2] == K,
        "matmul: inner dims differ, " + shape_str(an->shape) + " vs " + shape_str(bn->shape));
  const int64_t N = bn->shape.back();
  const int64_t batch = numel(an->shape) / (M * K);

  Shape out_shape = an->shape;
  out_shape.back() = N;
  std::vector<double> out(batch * M * N, 0.0);
  for (int64_t t = 0; t < batch; ++t) {
    const double* at = &an->val[t * M * K];
    const double* bt = &bn->val[shared_b ? 0 : t * K * N];
    double* yt = &out[t * M * N];
    for (int64_t m = 0; m < M; ++m)
      for (int64_t k = 0; k < K; ++k) {
        const double av = at[m * K + k];
        if (av == 0.0) continue;
        const double* br = &bt[k * N];
        double* yr = &yt[m * N];
        for (int64_t n = 0; n < N; ++n) yr[n] += av * br[n];
      }
  }

  auto backprop = [batch, M, K, N, shared_b](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& gy = self.grad;
    if (pa.requires_grad) {
      auto& ga = gref(pa);
      for (int64_t t = 0; t < batch; ++t) {
        const double* gyt = &gy[t * M * N];
        const double* bt = &pb.val[shared_b ? 0 : t * K * N];
        double* gat = &ga[t * M * K];
        for (int64_t m = 0; m < M; ++m)
          for (int64_t k = 0; k < K; ++k) {
            const double* gyr = &gyt[m * N];
            const double* br = &bt[k * N];
            double acc = 0.0;
            for (int64_t n = 0; n < N; ++n) acc += gyr[n] * br[n];
            gat[m * K + k] += acc;
          }
      }
    }
    if (pb.requires_grad) {
      auto& gb = gref(pb);
      for (int64_t t = 0; t < batch; ++t) {
        const double* at = &pa.val[t * M * K];
        const double* gyt = &gy[t * M * N];
        double* gbt = &gb[shared_b ? 0 : t * K * N];
        for (int64_t m = 0; m < M; ++m)
          for (int64_t k = 0; k < K; ++k) {
            const double av = at[m * K + k];
            if (av == 0.0) continue;
            const double* gyr = &gyt[m * N];
            double* gbr = &gbt[k * N];
            for (int64_t n = 0; n < N; ++n) gbr[n] += av * gyr[n];
          }
      }
    }
  };
  return make_op(std::move(out_shape), std::move(out), {an, bn}, std::move(backprop));
}

namespace {

// Forward: dst (axes a,b swapped) <- src (original layout). Reverse walks the
// same index map but accumulates src (swapped layout) into dst (original).
void swap_axes_copy(const Shape& in_shape, int a, int b, const std::vector<double>& src,
                    std::vector<double>* dst, bool reverse) {
  const int nd = static_cast<int>(in_shape.size());
  Shape out_shape = in_shape;
  std::swap(out_shape[a], out_shape[b]);
  std::vector<int64_t> in_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  // Stride of the output coordinate i within the input layout.
  std::vector<int64_t> map_strides(nd);
  for (int i = 0; i < nd; ++i) map_strides[i] = in_strides[i];
  std::swap(map_strides[a], map_strides[b]);

  const int64_t n = numel(in_shape);
  std::vector<int64_t> coord(nd, 0);
  int64_t in_idx = 0;
  for (int64_t out_idx = 0; out_idx < n; ++out_idx) {
    if (reverse)
      (*dst)[in_idx] += src[out_idx];
    else
      (*dst)[out_idx] = src[in_idx];
    for (int i = nd - 1; i >= 0; --i) {
      in_idx += map_strides[i];
      if (++coord[i] < out_shape[i]) break;
      in_idx -= map_strides[i] * out_shape[i];
      coord[i] = 0;
    }
  }
}

}  // namespace

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
  const auto& xn = node_of(x, "transpose");
  const int nd = static_cast<int>(xn->shape.size());
  const int a = normalize_axis(axis_a, nd, "transpose");
  const int b = normalize_axis(axis_b, nd, "transpose");
  Shape out_shape = xn->shape;
  std::swap(out_shape[a], out_shape[b]);

  std::vector<double> out(xn->val.size());
  swap_axes_copy(xn->shape, a, b, xn->val, &out, false);

  auto backprop = [in_shape = xn->shape, a, b](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    swap_axes_copy(in_shape, a, b, self.grad, &gref(px), true);
  };
  return make_op(std::move(out_shape), std::move(out), {xn}, std::move(backprop));
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  check(!xs.empty(), "concat: no inputs");
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(xs.size());
  for (const auto& t : xs) parents.push_back(node_of(t, "concat"));
  const Shape& s0 = parents[0]->shape;
  const int a = normalize_axis(axis, static_cast<int>(s0.size()), "concat");
  int64_t total = 0;
  for (const auto& p : parents) {
    check(p->shape.size() == s0.size(), "concat: rank mismatch, " + shape_str(s0) + " vs " +
                                            shape_str(p->shape));
    for (size_t i = 0; i < s0.size(); ++i)
      if (static_cast<int>(i) != a)
        check(p->shape[i] == s0[i], "concat: shapes " + shape_str(s0) + " and " +
                                        shape_str(p->shape) + " differ off axis " +
                                        std::to_string(a));
    total += p->shape[a];
  }
  Shape out_shape = s0;
  out_shape[a] = total;
  const AxisSplit sp = split_axis(out_shape, a);

  std::vector<int64_t> lens(parents.size());
  for (size_t i = 0; i < parents.size(); ++i) lens[i] = parents[i]->shape[a];

  std::vector<double> out(numel(out_shape));
  for (int64_t o = 0; o < sp.outer; ++o) {
    int64_t off = 0;
    for (size_t i = 0; i < parents.size(); ++i) {
      const int64_t chunk = lens[i] * sp.inner;
      std::copy_n(&parents[i]->val[o * chunk], chunk,
                  &out[(o * sp.len + off) * sp.inner]);
      off += lens[i];
    }
  }

  auto backprop = [sp, lens](Node& self) {
    const auto& gy = self.grad;
    for (int64_t o = 0; o < sp.outer; ++o) {
      int64_t off = 0;
      for (size_t i = 0; i < self.parents.size(); ++i) {
        Node& p = *self.parents[i];
        const int64_t chunk = lens[i] * sp.inner;
        if (p.requires_grad) {
          auto& gp = gref(p);
          const double* src = &gy[(o * sp.len + off) * sp.inner];
          double* dst = &gp[o * chunk];
          for (int64_t j = 0; j < chunk; ++j) dst[j] += src[j];
        }
        off += lens[i];
      }
    }
  };
  return make_op(std::move(out_shape), std::move(out), std::move(parents), std::move(backprop));
}

Tensor mean_over_axis(const Tensor& x, int axis) {
  const auto& xn = node_of(x, "mean_over_axis");
  const int a = normalize_axis(axis, static_cast<int>(xn->shape.size()), "mean_over_axis");
  const AxisSplit sp = split_axis(xn->shape, a);

  Shape out_shape;
  for (size_t i = 0; i < xn->shape.size(); ++i)
    if (static_cast<int>(i) != a) out_shape.push_back(xn->shape[i]);
  if (out_shape.empty()) out_shape = {1};

  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.len; ++i)
      for (int64_t in = 0; in < sp.inner; ++in)
        out[o * sp.inner + in] += xn->val[(o * sp.len + i) * sp.inner + in];
  for (double& v : out) v *= inv;

  auto backprop = [sp, inv](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = gref(px);
    const auto& gy = self.grad;
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t i = 0; i < sp.len; ++i)
        for (int64_t in = 0; in < sp.inner; ++in)
          gx[(o * sp.len + i) * sp.inner + in] += gy[o * sp.inner + in] * inv;
  };
  return make_op(std::move(out_shape), std::move(out), {xn}, std::move(backprop));
}

Tensor mean_all(const Tensor& x) {
  const auto& xn = node_of(x, "mean_all");
  const int64_t n = numel(xn->shape);
  double acc = 0.0;
  for (double v : xn->val) acc += v;
  const double inv = 1.0 / static_cast<double>(n);

  auto backprop = [inv](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = gref(px);
    const double g = self.grad[0] * inv;
    for (double& v : gx) v += g;
  };
  return make_op({1}, {acc * inv}, {xn}, std::move(backprop));
}

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& an = node_of(a, "add");
  const auto& bn = node_of(b, "add");
  const int64_t na = numel(an->shape), nb = numel(bn->shape);
  bool suffix = bn->shape.size() <= an->shape.size();
  if (suffix)
    for (size_t i = 0; i < bn->shape.size(); ++i)
      suffix = suffix && bn->shape[i] == an->shape[an->shape.size() - bn->shape.size() + i];
  check(suffix, "add: shape " + shape_str(bn->shape) + " does not broadcast into " +
                    shape_str(an->shape));

  std::vector<double> out(na);
  for (int64_t i = 0; i < na; ++i) out[i] = an->val[i] + bn->val[i % nb];

  auto backprop = [na, nb](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& gy = self.grad;
    if (pa.requires_grad) {
      auto& ga = gref(pa);
      for (int64_t i = 0; i < na; ++i) ga[i] += gy[i];
    }
    if (pb.requires_grad) {
      auto& gb = gref(pb);
      for (int64_t i = 0; i < na; ++i) gb[i % nb] += gy[i];
    }
  };
  return make_op(an->shape, std::move(out), {an, bn}, std::move(backprop));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto& an = node_of(a, "sub");
  const auto& bn = node_of(b, "sub");
  check(an->shape == bn->shape, "sub: shapes " + shape_str(an->shape) + " and " +
                                    shape_str(bn->shape) + " differ");
  std::vector<double> out(an->val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] - bn->val[i];

  auto backprop = [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& gy = self.grad;
    if (pa.requires_grad) {
      auto& ga = gref(pa);
      for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (pb.requires_grad) {
      auto& gb = gref(pb);
      for (size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
    }
  };
  return make_op(an->shape, std::move(out), {an, bn}, std::move(backprop));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto& an = node_of(a, "mul");
  const auto& bn = node_of(b, "mul");
  check(an->shape == bn->shape, "mul: shapes " + shape_str(an->shape) + " and " +
                                    shape_str(bn->shape) + " differ");
  std::vector<double> out(an->val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] * bn->val[i];

  auto backprop = [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& gy = self.grad;
    if (pa.requires_grad) {
      auto& ga = gref(pa);
      for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * pb.val[i];
    }
    if (pb.requires_grad) {
      auto& gb = gref(pb);
      for (size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * pa.val[i];
    }
  };
  return make_op(an->shape, std::move(out), {an, bn}, std::move(backprop));
}

Tensor scale(const Tensor& x, double c) {
  const auto& xn = node_of(x, "scale");
  std::vector<double> out(xn->val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xn->val[i] * c;

  auto backprop = [c](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = gref(px);
    for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * c;
  };
  return make_op(xn->shape, std::move(out), {xn}, std::move(backprop));
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
  const auto& xn = node_of(x, "scale_channels");
  const auto& sn = node_of(s, "scale_channels");
  check(xn->shape.size() >= 2, "scale_channels: input must be at least [batch, channels]");
  check(sn->shape.size() == 2 && sn->shape[0] == xn->shape[0] && sn->shape[1] == xn->shape[1],
        "scale_channels: scales " + shape_str(sn->shape) + " do not match input " +
            shape_str(xn->shape));
  const int64_t BC = xn->shape[0] * xn->shape[1];
  const int64_t rest = numel(xn->shape) / BC;

  std::vector<double> out(xn->val.size());
  for (int64_t bc = 0; bc < BC; ++bc) {
    const double sv = sn->val[bc];
    for (int64_t r = 0; r < rest; ++r) out[bc * rest + r] = xn->val[bc * rest + r] * sv;
  }

  auto backprop = [BC, rest](Node& self) {
    Node& px = *self.parents[0];
    Node& ps = *self.parents[1];
    const auto& gy = self.grad;
    if (px.requires_grad) {
      auto& gx = gref(px);
      for (int64_t bc = 0; bc < BC; ++bc) {
        const double sv = ps.val[bc];
        for (int64_t r = 0; r < rest; ++r) gx[bc * rest + r] += gy[bc * rest + r] * sv;
      }
    }
    if (ps.requires_grad) {
      auto& gs = gref(ps);
      for (int64_t bc = 0; bc < BC; ++bc) {
        double acc = 0.0;
        for (int64_t r = 0; r < rest; ++r) acc += gy[bc * rest + r] * px.val[bc * rest + r];
        gs[bc] += acc;
      }
    }
  };
  return make_op(xn->shape, std::move(out), {xn, sn}, std::move(backprop));
}

Tensor bias_axis(const Tensor& x, const Tensor& b, int axis) {
  const auto& xn = node_of(x, "bias_axis");
  const auto& bn = node_of(b, "bias_axis");
  const int a = normalize_axis(axis, static_cast<int>(xn->shape.size()), "bias_axis");
  check(bn->shape.size() == 1 && bn->shape[0] == xn->shape[a],
        "bias_axis: bias must be [" + std::to_string(xn->shape[a]) + "], got " +
            shape_str(bn->shape));
  const AxisSplit sp = split_axis(xn->shape, a);

  std::vector<double> out(xn->val.size());
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.len; ++i) {
      const double bv = bn->val[i];
      const int64_t base = (o * sp.len + i) * sp.inner;
      for (int64_t in = 0; in < sp.inner; ++in) out[base + in] = xn->val[base + in] + bv;
    }

  auto backprop = [sp](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& gy = self.grad;
    if (px.requires_grad) {
      auto& gx = gref(px);
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (pb.requires_grad) {
      auto& gb = gref(pb);
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t i = 0; i < sp.len; ++i) {
          const int64_t base = (o * sp.len + i) * sp.inner;
          double acc = 0.0;
          for (int64_t in = 0; in < sp.inner; ++in) acc += gy[base + in];
          gb[i] += acc;
        }
    }
  };
  return make_op(xn->shape, std::move(out), {xn, bn}, std::move(backprop));
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  const auto& xn = node_of(x, "reshape");
  for (int64_t d : new_shape)
    check(d >= 1, "reshape: dimensions must be positive, got " + shape_str(new_shape));
  check(numel(new_shape) == numel(xn->shape),
        "reshape: cannot view " + shape_str(xn->shape) + " as " + shape_str(new_shape));

  auto backprop = [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = gref(px);
    for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  };
  return make_op(std::move(new_shape), xn->val, {xn}, std::move(backprop));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const auto& xn = node_of(logits, "cross_entropy");
  check(xn->shape.size() == 2, "cross_entropy: logits must be [batch, classes], got " +
                                   shape_str(xn->shape));
  const int64_t B = xn->shape[0], C = xn->shape[1];
  check(static_cast<int64_t>(labels.size()) == B,
        "cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
            std::to_string(B));

  std::vector<double> probs(B * C);
  double loss = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const int y = labels[b];
    check(y >= 0 && y < C, "cross_entropy: label " + std::to_string(y) +
                               " out of range for " + std::to_string(C) + " classes");
    const double* xr = &xn->val[b * C];
    double mx = xr[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      const double e = std::exp(xr[c] - mx);
      probs[b * C + c] = e;
      z += e;
    }
    for (int64_t c = 0; c < C; ++c) probs[b * C + c] /= z;
    loss += mx + std::log(z) - xr[y];
  }
  loss /= static_cast<double>(B);

  auto backprop = [B, C, labels, probs = std::move(probs)](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& gx = gref(px);
    const double g = self.grad[0] / static_cast<double>(B);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        gx[b * C + c] += g * (probs[b * C + c] - (c == labels[b] ? 1.0 : 0.0));
  };
  return make_op({1}, {loss}, {xn}, std::move(backprop));
}

void backward(const Tensor& loss) {
  const auto& root = node_of(loss, "backward");
  if (numel(root->shape) != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(root->shape));
  if (!root->requires_grad)
    throw std::runtime_error("backward: loss does not require gradients");
  if (root->consumed)
    throw std::runtime_error("backward: graph already consumed; rerun the forward pass");

  // Post-order DFS; reversing it yields children before parents, so every
  // node's incoming gradient is complete when its rule runs.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<std::shared_ptr<Node>, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      const auto& p = n->parents[i++];
      if (p->requires_grad && !seen.count(p.get())) {
        if (p->consumed)
          throw std::runtime_error("backward: graph already consumed; rerun the forward pass");
        seen.insert(p.get());
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (n.backprop) {
      gref(n);
      n.backprop(n);
    }
  }
  for (const auto& n : order) {
    if (!n->leaf) {
      n->consumed = true;
      n->backprop = nullptr;
      n->parents.clear();
    }
  }
}

}  // namespace kinedec::tensor
