#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <unordered_map>
#include <deque>
#include <vector>

#include "lensveil/fft.hpp"
#include "lensveil/tensor.hpp"

namespace lensveil::ad {

using EigenMat =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using EigenMatMut =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatmul,
  kSum,
  kMean,
  kAbs,
  kRelu,       // max(x, 0); subgradient 0 at the kink
  kExp,
  kCis,        // real phase -> complex exp(i x)
  kSquare,
  kSqrt,
  kSqNorm,     // sum of squares -> scalar
  kSoftmax,    // row-wise on rank-2
  kLog,
  kConv2,      // circular convolution, fused FFT forward/backward
  kDft2,       // complex 2-D DFT; inverse carries 1/N^2
  kCmod2,      // |z|^2, complex -> real
  kGather,
  kConcat,
  kBroadcast,  // scalar -> shape
  kTanh,
  kReshape,
  kFftshift2,
  kBoxDownSum, // block-sum downsampling (preserves total mass)
  kAffine,     // c1*x + c0 elementwise
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

using GradMap = std::unordered_map<int, Tensor>;

class Tape {
 public:
  struct Node {
    Op op = Op::kLeaf;
    int a = -1;
    int b = -1;
    std::vector<int> more;     // extra inputs (concat)
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    bool needs_grad = false;   // derived: any upstream leaf requires grad
    double c0 = 0.0;
    double c1 = 1.0;
    bool flag_a = false;       // matmul transpose-A / dft2 inverse
    bool flag_b = false;       // matmul transpose-B
    int factor = 1;
    std::vector<std::size_t> idx;
  };

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  const Tensor& value(Var v) const { return nodes_[v.id].val; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }

  Var leaf(Tensor value, bool requires_grad = true) {
    require(value.all_finite(), "leaf value must be finite");
    Node n;
    n.op = Op::kLeaf;
    n.val = std::move(value);
    n.requires_grad = requires_grad;
    n.needs_grad = requires_grad;
    return push(std::move(n));
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant(double v) { return leaf(Tensor::scalar(v), false); }

  // ---- elementwise binary ----

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::kMul, a, b); }

  Var div(Var a, Var b) {
    const Tensor& tb = val(b);
    require(!val(a).is_complex() && !tb.is_complex(), "div is real-only");
    return binary(Op::kDiv, a, b);
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.shape.size() == 2 && tb.shape.size() == 2, "matmul expects rank-2 inputs");
    require(!ta.is_complex() && !tb.is_complex(), "matmul is real-only");
    const std::size_t m = trans_a ? ta.shape[1] : ta.shape[0];
    const std::size_t k = trans_a ? ta.shape[0] : ta.shape[1];
    const std::size_t k2 = trans_b ? tb.shape[1] : tb.shape[0];
    const std::size_t n = trans_b ? tb.shape[0] : tb.shape[1];
    require(k == k2, "matmul inner dimensions differ");
    Node node;
    node.op = Op::kMatmul;
    node.a = a.id;
    node.b = b.id;
    node.flag_a = trans_a;
    node.flag_b = trans_b;
    node.val = Tensor::zeros({m, n});
    EigenMatMut out(node.val.re.data(), static_cast<long>(m), static_cast<long>(n));
    EigenMat ma(ta.re.data(), static_cast<long>(ta.shape[0]), static_cast<long>(ta.shape[1]));
    EigenMat mb(tb.re.data(), static_cast<long>(tb.shape[0]), static_cast<long>(tb.shape[1]));
    if (!trans_a && !trans_b)
      out.noalias() = ma * mb;
    else if (trans_a && !trans_b)
      out.noalias() = ma.transpose() * mb;
    else if (!trans_a && trans_b)
      out.noalias() = ma * mb.transpose();
    else
      out.noalias() = ma.transpose() * mb.transpose();
    return push(std::move(node));
  }

  // ---- reductions ----

  Var sum(Var a) {
    Node n = unary_node(Op::kSum, a);
    n.val = Tensor::scalar(val(a).sum());
    return push(std::move(n));
  }

  Var mean(Var a) {
    Node n = unary_node(Op::kMean, a);
    n.val = Tensor::scalar(val(a).sum() / static_cast<double>(val(a).size()));
    return push(std::move(n));
  }

  Var sq_norm(Var a) {
    const Tensor& t = val(a);
    require(!t.is_complex(), "sq_norm is real-only");
    double s = 0.0;
    for (double v : t.re) s += v * v;
    Node n = unary_node(Op::kSqNorm, a);
    n.val = Tensor::scalar(s);
    return push(std::move(n));
  }

  // ---- elementwise unary ----

  Var abs(Var a) { return map_unary(Op::kAbs, a, [](double x) { return std::abs(x); }); }
  Var relu(Var a) { return map_unary(Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; }); }
  Var exp(Var a) { return map_unary(Op::kExp, a, [](double x) { return std::exp(x); }); }
  Var log(Var a) { return map_unary(Op::kLog, a, [](double x) { return std::log(x); }); }
  Var square(Var a) { return map_unary(Op::kSquare, a, [](double x) { return x * x; }); }
  Var sqrt(Var a) { return map_unary(Op::kSqrt, a, [](double x) { return std::sqrt(x); }); }
  Var tanh(Var a) { return map_unary(Op::kTanh, a, [](double x) { return std::tanh(x); }); }

  Var affine(Var a, double scale, double shift = 0.0) {
    Node n = unary_node(Op::kAffine, a);
    n.c1 = scale;
    n.c0 = shift;
    n.val = val(a);
    require(!n.val.is_complex(), "affine is real-only");
    for (double& v : n.val.re) v = scale * v + shift;
    return push(std::move(n));
  }

  Var neg(Var a) { return affine(a, -1.0); }

  Var cis(Var a) {
    const Tensor& t = val(a);
    require(!t.is_complex(), "cis expects a real phase");
    Node n = unary_node(Op::kCis, a);
    n.val = Tensor::zeros_complex(t.shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      n.val.re[i] = std::cos(t.re[i]);
      n.val.im[i] = std::sin(t.re[i]);
    }
    return push(std::move(n));
  }

  Var cmod2(Var a) {
    const Tensor& t = val(a);
    Node n = unary_node(Op::kCmod2, a);
    n.val = Tensor::zeros(t.shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double imv = t.is_complex() ? t.im[i] : 0.0;
      n.val.re[i] = t.re[i] * t.re[i] + imv * imv;
    }
    return push(std::move(n));
  }

  Var softmax_rows(Var a) {
    const Tensor& t = val(a);
    require(t.shape.size() == 2 && !t.is_complex(), "softmax expects a real rank-2 input");
    Node n = unary_node(Op::kSoftmax, a);
    n.val = Tensor::zeros(t.shape);
    const std::size_t rows = t.shape[0], cols = t.shape[1];
    for (std::size_t r = 0; r < rows; ++r) {
      double mx = t.re[r * cols];
      for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, t.re[r * cols + c]);
      double denom = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double e = std::exp(t.re[r * cols + c] - mx);
        n.val.re[r * cols + c] = e;
        denom += e;
      }
      for (std::size_t c = 0; c < cols; ++c) n.val.re[r * cols + c] /= denom;
    }
    return push(std::move(n));
  }

  // ---- structure ops ----

  Var reshape(Var a, Shape shape) {
    require(numel_of(shape) == val(a).size(), "reshape changes element count");
    Node n = unary_node(Op::kReshape, a);
    n.val = val(a);
    n.val.shape = std::move(shape);
    return push(std::move(n));
  }

  Var gather(Var a, std::vector<std::size_t> indices) {
    const Tensor& t = val(a);
    require(!t.is_complex(), "gather is real-only");
    for (std::size_t i : indices) require(i < t.size(), "gather index out of range");
    Node n = unary_node(Op::kGather, a);
    n.idx = std::move(indices);
    n.val = Tensor::zeros({n.idx.size()});
    for (std::size_t i = 0; i < n.idx.size(); ++i) n.val.re[i] = t.re[n.idx[i]];
    return push(std::move(n));
  }

  Var concat(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat of nothing");
    Node n;
    n.op = Op::kConcat;
    std::size_t total = 0;
    for (Var p : parts) {
      require(!val(p).is_complex(), "concat is real-only");
      total += val(p).size();
    }
    n.val = Tensor::zeros({total});
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor& t = val(p);
      std::copy(t.re.begin(), t.re.end(), n.val.re.begin() + static_cast<long>(off));
      off += t.size();
      n.more.push_back(p.id);
    }
    return push(std::move(n));
  }

  Var broadcast(Var scalar, Shape shape) {
    require(val(scalar).is_scalar(), "broadcast expects a scalar");
    Node n = unary_node(Op::kBroadcast, scalar);
    n.val = Tensor::full(std::move(shape), val(scalar).item());
    return push(std::move(n));
  }

  // ---- spectral ops ----

  Var dft2(Var a, bool inverse = false) {
    const Tensor& t = val(a);
    require(t.shape.size() == 2 && t.shape[0] == t.shape[1], "dft2 expects a square input");
    require(is_pow2(t.shape[0]), "dft2 expects a power-of-two size");
    Node n = unary_node(Op::kDft2, a);
    n.flag_a = inverse;
    n.val = fft::dft2(t, inverse);
    return push(std::move(n));
  }

  Var fftshift2(Var a) {
    const Tensor& t = val(a);
    require(t.shape.size() == 2, "fftshift2 expects rank-2");
    require(t.shape[0] % 2 == 0 && t.shape[1] % 2 == 0, "fftshift2 expects even dims");
    Node n = unary_node(Op::kFftshift2, a);
    n.val = shift2(t);
    return push(std::move(n));
  }

  Var conv2_circular(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.shape.size() == 2 && ta.same_shape(tb), "conv2 expects equal rank-2 shapes");
    require(!ta.is_complex() && !tb.is_complex(), "conv2 is real-only");
    require(is_pow2(ta.shape[0]) && is_pow2(ta.shape[1]), "conv2 expects power-of-two dims");
    Node n;
    n.op = Op::kConv2;
    n.a = a.id;
    n.b = b.id;
    n.val = fft::conv2_circular(ta, tb);
    return push(std::move(n));
  }

  Var box_down_sum(Var a, int factor) {
    const Tensor& t = val(a);
    require(t.shape.size() == 2 && !t.is_complex(), "box_down expects real rank-2");
    require(factor >= 1 && t.shape[0] % factor == 0 && t.shape[1] % factor == 0,
            "box_down factor must divide both dims");
    Node n = unary_node(Op::kBoxDownSum, a);
    n.factor = factor;
    const std::size_t rows = t.shape[0] / factor, cols = t.shape[1] / factor;
    n.val = Tensor::zeros({rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        double s = 0.0;
        for (int dr = 0; dr < factor; ++dr)
          for (int dc = 0; dc < factor; ++dc)
            s += t.re[(r * factor + dr) * t.shape[1] + c * factor + dc];
        n.val.re[r * cols + c] = s;
      }
    return push(std::move(n));
  }

  // ---- backward ----

  // Gradients of a scalar loss w.r.t. every grad-requiring leaf. Interior
  // accumulators are released before returning; a later call starts fresh.
  GradMap backward(Var loss) {
    require(loss.tape == this, "loss from another tape");
    require(val(loss).is_scalar(), "backward expects a scalar loss");
    for (Node& n : nodes_) n.grad = Tensor();
    nodes_[loss.id].grad = Tensor::scalar(1.0);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.re.empty() || n.op == Op::kLeaf || !n.needs_grad) continue;
      pull(n);
    }
    GradMap out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.op == Op::kLeaf && n.requires_grad) {
        Tensor g = n.grad.re.empty() ? Tensor::zeros(n.val.shape) : std::move(n.grad);
        out.emplace(static_cast<int>(i), std::move(g));
      }
      n.grad = Tensor();
    }
    return out;
  }

 private:
  std::deque<Node> nodes_;  // deque: references to nodes stay valid as ops append

  const Tensor& val(Var v) const {
    require(v.tape == this && v.id >= 0 && v.id < static_cast<int>(nodes_.size()),
            "var does not belong to this tape");
    return nodes_[v.id].val;
  }

  Var push(Node n) {
    if (n.op != Op::kLeaf) {
      bool needs = false;
      if (n.a >= 0) needs |= nodes_[n.a].needs_grad;
      if (n.b >= 0) needs |= nodes_[n.b].needs_grad;
      for (int m : n.more) needs |= nodes_[m].needs_grad;
      n.needs_grad = needs;
    }
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  Node unary_node(Op op, Var a) {
    val(a);  // ownership check
    Node n;
    n.op = op;
    n.a = a.id;
    return n;
  }

  template <typename F>
  Var map_unary(Op op, Var a, F f) {
    const Tensor& t = val(a);
    require(!t.is_complex(), "op is real-only");
    Node n = unary_node(op, a);
    n.val = t;
    for (double& v : n.val.re) v = f(v);
    return push(std::move(n));
  }

  Var binary(Op op, Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.same_shape(tb) || ta.is_scalar() || tb.is_scalar(),
            "elementwise op needs equal shapes or a scalar operand");
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    const bool cplx = ta.is_complex() || tb.is_complex();
    const Shape& shape = ta.is_scalar() ? tb.shape : ta.shape;
    n.val = cplx ? Tensor::zeros_complex(shape) : Tensor::zeros(shape);
    const std::size_t count = n.val.size();
    if (!cplx && ta.same_shape(tb)) {
      const double* pa = ta.re.data();
      const double* pb = tb.re.data();
      double* po = n.val.re.data();
      switch (op) {
        case Op::kAdd: for (std::size_t i = 0; i < count; ++i) po[i] = pa[i] + pb[i]; break;
        case Op::kSub: for (std::size_t i = 0; i < count; ++i) po[i] = pa[i] - pb[i]; break;
        case Op::kMul: for (std::size_t i = 0; i < count; ++i) po[i] = pa[i] * pb[i]; break;
        case Op::kDiv: for (std::size_t i = 0; i < count; ++i) po[i] = pa[i] / pb[i]; break;
        default: require(false, "not a binary op");
      }
      return push(std::move(n));
    }
    for (std::size_t i = 0; i < count; ++i) {
      const std::complex<double> x = ta.citem(ta.is_scalar() ? 0 : i);
      const std::complex<double> y = tb.citem(tb.is_scalar() ? 0 : i);
      std::complex<double> r;
      switch (op) {
        case Op::kAdd: r = x + y; break;
        case Op::kSub: r = x - y; break;
        case Op::kMul: r = x * y; break;
        case Op::kDiv: r = x / y; break;
        default: require(false, "not a binary op");
      }
      n.val.re[i] = r.real();
      if (cplx) n.val.im[i] = r.imag();
    }
    return push(std::move(n));
  }

  static Tensor shift2(const Tensor& t) {
    Tensor out = t.is_complex() ? Tensor::zeros_complex(t.shape) : Tensor::zeros(t.shape);
    const std::size_t rows = t.shape[0], cols = t.shape[1];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t dst = ((r + rows / 2) % rows) * cols + (c + cols / 2) % cols;
        out.re[dst] = t.re[r * cols + c];
        if (t.is_complex()) out.im[dst] = t.im[r * cols + c];
      }
    return out;
  }

  // Accumulate a cotangent into a node. A complex cotangent flowing into a
  // real node keeps only its real plane (Wirtinger pair convention).
  void accum(int id, const Tensor& g) {
    if (id < 0) return;
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.re.empty()) {
      n.grad = n.val.is_complex() ? Tensor::zeros_complex(n.val.shape)
                                  : Tensor::zeros(n.val.shape);
    }
    if (n.val.is_scalar() && !g.is_scalar()) {
      double sre = 0.0, sim = 0.0;
      for (double v : g.re) sre += v;
      for (double v : g.im) sim += v;
      n.grad.re[0] += sre;
      if (n.grad.is_complex()) n.grad.im[0] += sim;
      return;
    }
    for (std::size_t i = 0; i < n.grad.re.size(); ++i) n.grad.re[i] += g.re[i];
    if (n.grad.is_complex() && g.is_complex())
      for (std::size_t i = 0; i < n.grad.im.size(); ++i) n.grad.im[i] += g.im[i];
  }

  void pull(Node& n) {
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        accum(n.a, g);
        accum(n.b, g);
        break;
      }
      case Op::kSub: {
        accum(n.a, g);
        Tensor ng = g;
        for (double& v : ng.re) v = -v;
        for (double& v : ng.im) v = -v;
        accum(n.b, ng);
        break;
      }
      case Op::kMul: {
        const Tensor& ta = nodes_[n.a].val;
        const Tensor& tb = nodes_[n.b].val;
        if (!ta.is_complex() && !tb.is_complex() && !g.is_complex() && ta.same_shape(tb)) {
          Tensor ga = Tensor::zeros(ta.shape);
          Tensor gb = Tensor::zeros(tb.shape);
          for (std::size_t i = 0; i < g.re.size(); ++i) {
            ga.re[i] = tb.re[i] * g.re[i];
            gb.re[i] = ta.re[i] * g.re[i];
          }
          accum(n.a, ga);
          accum(n.b, gb);
          break;
        }
        accum(n.a, cmul_conj(tb, g, ta));
        accum(n.b, cmul_conj(ta, g, tb));
        break;
      }
      case Op::kDiv: {
        const Tensor& ta = nodes_[n.a].val;
        const Tensor& tb = nodes_[n.b].val;
        Tensor ga = Tensor::zeros(n.val.shape);
        Tensor gb = Tensor::zeros(n.val.shape);
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          const double av = ta.re[ta.is_scalar() ? 0 : i];
          const double bv = tb.re[tb.is_scalar() ? 0 : i];
          ga.re[i] = g.re[i] / bv;
          gb.re[i] = -g.re[i] * av / (bv * bv);
        }
        accum(n.a, ga);
        accum(n.b, gb);
        break;
      }
      case Op::kMatmul: {
        backprop_matmul(n, g);
        break;
      }
      case Op::kSum: {
        accum(n.a, Tensor::full(nodes_[n.a].val.shape, g.item()));
        break;
      }
      case Op::kMean: {
        const double s = g.item() / static_cast<double>(nodes_[n.a].val.size());
        accum(n.a, Tensor::full(nodes_[n.a].val.shape, s));
        break;
      }
      case Op::kSqNorm: {
        const Tensor& ta = nodes_[n.a].val;
        Tensor ga = Tensor::zeros(ta.shape);
        for (std::size_t i = 0; i < ta.size(); ++i) ga.re[i] = 2.0 * ta.re[i] * g.item();
        accum(n.a, ga);
        break;
      }
      case Op::kAbs: {
        const Tensor& ta = nodes_[n.a].val;
        Tensor ga = Tensor::zeros(ta.shape);
        for (std::size_t i = 0; i < ta.size(); ++i)
          ga.re[i] = ta.re[i] > 0.0 ? g.re[i] : (ta.re[i] < 0.0 ? -g.re[i] : 0.0);
        accum(n.a, ga);
        break;
      }
      case Op::kRelu: {
        const Tensor& ta = nodes_[n.a].val;
        Tensor ga = Tensor::zeros(ta.shape);
        for (std::size_t i = 0; i < ta.size(); ++i) ga.re[i] = ta.re[i] > 0.0 ? g.re[i] : 0.0;
        accum(n.a, ga);
        break;
      }
      case Op::kExp:
      case Op::kSquare:
      case Op::kSqrt:
      case Op::kLog:
      case Op::kTanh: {
        const Tensor& ta = nodes_[n.a].val;
        Tensor ga = Tensor::zeros(ta.shape);
        for (std::size_t i = 0; i < ta.size(); ++i) {
          double d = 0.0;
          switch (n.op) {
            case Op::kExp: d = n.val.re[i]; break;
            case Op::kSquare: d = 2.0 * ta.re[i]; break;
            case Op::kSqrt: d = 0.5 / n.val.re[i]; break;
            case Op::kLog: d = 1.0 / ta.re[i]; break;
            case Op::kTanh: d = 1.0 - n.val.re[i] * n.val.re[i]; break;
            default: break;
          }
          ga.re[i] = d * g.re[i];
        }
        accum(n.a, ga);
        break;
      }
      case Op::kAffine: {
        Tensor ga = g;
        for (double& v : ga.re) v *= n.c1;
        accum(n.a, ga);
        break;
      }
      case Op::kCis: {
        // y = exp(i x): xbar += -ybar_re*sin + ybar_im*cos
        const Tensor& ta = nodes_[n.a].val;
        Tensor ga = Tensor::zeros(ta.shape);
        for (std::size_t i = 0; i < ta.size(); ++i)
          ga.re[i] = -g.re[i] * n.val.im[i] + g.im[i] * n.val.re[i];
        accum(n.a, ga);
        break;
      }
      case Op::kCmod2: {
        const Tensor& ta = nodes_[n.a].val;
        Tensor ga = Tensor::zeros_complex(ta.shape);
        for (std::size_t i = 0; i < ta.size(); ++i) {
          ga.re[i] = 2.0 * ta.re[i] * g.re[i];
          ga.im[i] = 2.0 * (ta.is_complex() ? ta.im[i] : 0.0) * g.re[i];
        }
        accum(n.a, ga);
        break;
      }
      case Op::kSoftmax: {
        const std::size_t rows = n.val.shape[0], cols = n.val.shape[1];
        Tensor ga = Tensor::zeros(n.val.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c)
            dot += g.re[r * cols + c] * n.val.re[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            ga.re[r * cols + c] = (g.re[r * cols + c] - dot) * n.val.re[r * cols + c];
        }
        accum(n.a, ga);
        break;
      }
      case Op::kReshape: {
        Tensor ga = g;
        ga.shape = nodes_[n.a].val.shape;
        accum(n.a, ga);
        break;
      }
      case Op::kGather: {
        Tensor ga = Tensor::zeros(nodes_[n.a].val.shape);
        for (std::size_t i = 0; i < n.idx.size(); ++i) ga.re[n.idx[i]] += g.re[i];
        accum(n.a, ga);
        break;
      }
      case Op::kConcat: {
        std::size_t off = 0;
        for (int src : n.more) {
          const Tensor& tv = nodes_[src].val;
          Tensor ga = Tensor::zeros(tv.shape);
          std::copy(g.re.begin() + static_cast<long>(off),
                    g.re.begin() + static_cast<long>(off + tv.size()), ga.re.begin());
          accum(src, ga);
          off += tv.size();
        }
        break;
      }
      case Op::kBroadcast: {
        double s = 0.0;
        for (double v : g.re) s += v;
        accum(n.a, Tensor::scalar(s));
        break;
      }
      case Op::kDft2: {
        // forward adjoint: F^H = N^2 * normalized inverse
        // inverse adjoint: (1/N^2) * unnormalized forward
        Tensor ga = fft::dft2(g, !n.flag_a);
        const double n2 = static_cast<double>(g.size());
        const double scale = n.flag_a ? 1.0 / n2 : n2;
        for (double& v : ga.re) v *= scale;
        for (double& v : ga.im) v *= scale;
        accum(n.a, ga);
        break;
      }
      case Op::kFftshift2: {
        accum(n.a, shift2(g));  // self-inverse for even dims
        break;
      }
      case Op::kConv2: {
        const Tensor flip_b = fft::circular_flip(nodes_[n.b].val);
        const Tensor flip_a = fft::circular_flip(nodes_[n.a].val);
        accum(n.a, fft::conv2_circular(g, flip_b));
        accum(n.b, fft::conv2_circular(g, flip_a));
        break;
      }
      case Op::kBoxDownSum: {
        const Tensor& ta = nodes_[n.a].val;
        Tensor ga = Tensor::zeros(ta.shape);
        const std::size_t rows = n.val.shape[0], cols = n.val.shape[1];
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const double gv = g.re[r * cols + c];
            for (int dr = 0; dr < n.factor; ++dr)
              for (int dc = 0; dc < n.factor; ++dc)
                ga.re[(r * n.factor + dr) * ta.shape[1] + c * n.factor + dc] = gv;
          }
        accum(n.a, ga);
        break;
      }
    }
  }

  // conj(other) .* g with scalar broadcasting, shaped like `target`.
  static Tensor cmul_conj(const Tensor& other, const Tensor& g, const Tensor& target) {
    Tensor out = Tensor::zeros_complex(target.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::complex<double> acc{0.0, 0.0};
      if (target.is_scalar() && !g.is_scalar()) {
        for (std::size_t k = 0; k < g.size(); ++k)
          acc += std::conj(other.citem(other.is_scalar() ? 0 : k)) * g.citem(k);
      } else {
        acc = std::conj(other.citem(other.is_scalar() ? 0 : i)) * g.citem(i);
      }
      out.re[i] = acc.real();
      out.im[i] = acc.imag();
    }
    return out;
  }

  void backprop_matmul(Node& n, const Tensor& g) {
    const Tensor& ta = nodes_[n.a].val;
    const Tensor& tb = nodes_[n.b].val;
    EigenMat ma(ta.re.data(), static_cast<long>(ta.shape[0]), static_cast<long>(ta.shape[1]));
    EigenMat mb(tb.re.data(), static_cast<long>(tb.shape[0]), static_cast<long>(tb.shape[1]));
    EigenMat mg(g.re.data(), static_cast<long>(g.shape[0]), static_cast<long>(g.shape[1]));
    Tensor gat = Tensor::zeros(ta.shape);
    Tensor gbt = Tensor::zeros(tb.shape);
    EigenMatMut ga(gat.re.data(), static_cast<long>(ta.shape[0]), static_cast<long>(ta.shape[1]));
    EigenMatMut gb(gbt.re.data(), static_cast<long>(tb.shape[0]), static_cast<long>(tb.shape[1]));
    if (!n.flag_a && !n.flag_b) {
      ga.noalias() = mg * mb.transpose();
      gb.noalias() = ma.transpose() * mg;
    } else if (n.flag_a && !n.flag_b) {
      ga.noalias() = mb * mg.transpose();
      gb.noalias() = ma * mg;
    } else if (!n.flag_a && n.flag_b) {
      ga.noalias() = mg * mb;
      gb.noalias() = mg.transpose() * ma;
    } else {
      ga.noalias() = mb.transpose() * mg.transpose();
      gb.noalias() = mg.transpose() * ma.transpose();
    }
    accum(n.a, gat);
    accum(n.b, gbt);
  }
};

inline const Tensor& Var::value() const { return tape->value(*this); }

// ---- convenience free functions ----

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }

inline Var sum(Var a) { return a.tape->sum(a); }
inline Var mean(Var a) { return a.tape->mean(a); }
inline Var sq_norm(Var a) { return a.tape->sq_norm(a); }
inline Var vabs(Var a) { return a.tape->abs(a); }
inline Var relu(Var a) { return a.tape->relu(a); }
inline Var vexp(Var a) { return a.tape->exp(a); }
inline Var vlog(Var a) { return a.tape->log(a); }
inline Var vsqrt(Var a) { return a.tape->sqrt(a); }
inline Var square(Var a) { return a.tape->square(a); }
inline Var vtanh(Var a) { return a.tape->tanh(a); }
inline Var cis(Var a) { return a.tape->cis(a); }
inline Var cmod2(Var a) { return a.tape->cmod2(a); }
inline Var affine(Var a, double scale, double shift = 0.0) {
  return a.tape->affine(a, scale, shift);
}
inline Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
  return a.tape->matmul(a, b, ta, tb);
}
inline Var softmax_rows(Var a) { return a.tape->softmax_rows(a); }
inline Var reshape(Var a, Shape s) { return a.tape->reshape(a, std::move(s)); }
inline Var gather(Var a, std::vector<std::size_t> idx) {
  return a.tape->gather(a, std::move(idx));
}
inline Var dft2(Var a, bool inverse = false) { return a.tape->dft2(a, inverse); }
inline Var fftshift2(Var a) { return a.tape->fftshift2(a); }
inline Var conv2_circular(Var a, Var b) { return a.tape->conv2_circular(a, b); }
inline Var box_down_sum(Var a, int factor) { return a.tape->box_down_sum(a, factor); }

// max(x, c) elementwise, built from relu
inline Var max_const(Var a, double c) { return affine(relu(affine(a, 1.0, -c)), 1.0, c); }

}  // namespace lensveil::ad
