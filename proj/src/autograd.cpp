#include "clipvs/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "clipvs/errors.hpp"

namespace clipvs::nn {

namespace {
thread_local bool g_grad_enabled = true;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank)
    throw ContractError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_string(a.shape()));
}

bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
}  // namespace

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
    if (grad.shape() != value.shape()) grad = grad.reshaped(value.shape());
  } else {
    grad += g;
  }
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

void Var::backward() const {
  if (node_->value.size() != 1) throw ContractError("backward() requires a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(Tensor(node_->value.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    n->grad = Tensor();  // interior grads are not needed after propagation
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  bool any = false;
  if (g_grad_enabled)
    for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return Var(std::move(value), false);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) node->inputs.push_back(in.node());
  node->backward = std::move(backward);
  return Var::from_node(std::move(node));
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) self.inputs[0]->accumulate(self.grad);
    if (wants(self, 1)) self.inputs[1]->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) self.inputs[0]->accumulate(self.grad);
    if (wants(self, 1)) {
      Tensor g = self.grad;
      for (auto& v : g.values()) v = -v;
      self.inputs[1]->accumulate(g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (wants(self, 0)) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= bv[i];
      self.inputs[0]->accumulate(g);
    }
    if (wants(self, 1)) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= av[i];
      self.inputs[1]->accumulate(g);
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_op(std::move(out), {a}, [s](Node& self) {
    Tensor g = self.grad;
    for (auto& v : g.values()) v *= s;
    self.inputs[0]->accumulate(g);
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v > 0 ? v : 0.0;
  return make_op(std::move(out), {a}, [](Node& self) {
    Tensor g = self.grad;
    const Tensor& y = self.value;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (y[i] <= 0) g[i] = 0;
    self.inputs[0]->accumulate(g);
  });
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) return Var(Tensor({1}, 0.0));
  Tensor out = terms[0].value();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    require_same_shape(terms[0], terms[i], "add_n");
    out += terms[i].value();
  }
  return make_op(std::move(out), {terms.begin(), terms.end()}, [](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i)
      if (wants(self, i)) self.inputs[i]->accumulate(self.grad);
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op(std::move(out), {a}, [](Node& self) {
    self.inputs[0]->accumulate(self.grad.reshaped(self.inputs[0]->value.shape()));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int rows = 0;
  for (const auto& p : parts) {
    if (p.value().rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail)
      throw ContractError("concat_rows: incompatible shape " + shape_string(p.shape()));
    rows += p.dim(0);
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor out(shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.values().begin() + offset);
    offset += p.value().size();
  }
  return make_op(std::move(out), {parts.begin(), parts.end()}, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      const auto n = self.inputs[i]->value.size();
      if (wants(self, i)) {
        Tensor g(self.inputs[i]->value.shape());
        std::copy(self.grad.values().begin() + off, self.grad.values().begin() + off + n,
                  g.values().begin());
        self.inputs[i]->accumulate(g);
      }
      off += n;
    }
  });
}

Var select_rows(const Var& a, std::span<const int> rows) {
  if (a.value().rank() == 0) throw ContractError("select_rows: scalar input");
  const int n = a.dim(0);
  const std::size_t width = n ? a.value().size() / static_cast<std::size_t>(n) : 0;
  Shape shape = a.shape();
  shape[0] = static_cast<int>(rows.size());
  Tensor out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= n) throw ContractError("select_rows: index out of range");
    std::copy_n(a.value().data() + rows[r] * width, width, out.data() + r * width);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return make_op(std::move(out), {a}, [idx, width](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t k = 0; k < width; ++k) g[idx[r] * width + k] += self.grad[r * width + k];
    self.inputs[0]->accumulate(g);
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0))
    throw ContractError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor out({a.dim(0), b.dim(1)});
  out.matrix(a.dim(0)).noalias() = a.value().matrix(a.dim(0)) * b.value().matrix(b.dim(0));
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    auto g = self.grad.matrix(av.dim(0));
    if (wants(self, 0)) {
      Tensor ga(av.shape());
      ga.matrix(av.dim(0)).noalias() = g * bv.matrix(bv.dim(0)).transpose();
      self.inputs[0]->accumulate(ga);
    }
    if (wants(self, 1)) {
      Tensor gb(bv.shape());
      gb.matrix(bv.dim(0)).noalias() = av.matrix(av.dim(0)).transpose() * g;
      self.inputs[1]->accumulate(gb);
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw ContractError("matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  Tensor out({a.dim(0), b.dim(0)});
  out.matrix(a.dim(0)).noalias() = a.value().matrix(a.dim(0)) * b.value().matrix(b.dim(0)).transpose();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    auto g = self.grad.matrix(av.dim(0));
    if (wants(self, 0)) {
      Tensor ga(av.shape());
      ga.matrix(av.dim(0)).noalias() = g * bv.matrix(bv.dim(0));
      self.inputs[0]->accumulate(ga);
    }
    if (wants(self, 1)) {
      Tensor gb(bv.shape());
      gb.matrix(bv.dim(0)).noalias() = g.transpose() * av.matrix(av.dim(0));
      self.inputs[1]->accumulate(gb);
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  if (x.dim(1) != weight.dim(0) || bias.value().size() != static_cast<std::size_t>(weight.dim(1)))
    throw ContractError("linear: input " + shape_string(x.shape()) + " weight " +
                        shape_string(weight.shape()) + " bias " + shape_string(bias.shape()));
  const int n = x.dim(0), o = weight.dim(1);
  Tensor out({n, o});
  auto om = out.matrix(n);
  om.noalias() = x.value().matrix(n) * weight.value().matrix(weight.dim(0));
  Eigen::Map<const Eigen::RowVectorXd> bv(bias.value().data(), o);
  om.rowwise() += bv;
  return make_op(std::move(out), {x, weight, bias}, [](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    const int n = xv.dim(0);
    auto g = self.grad.matrix(n);
    if (wants(self, 0)) {
      Tensor gx(xv.shape());
      gx.matrix(n).noalias() = g * wv.matrix(wv.dim(0)).transpose();
      self.inputs[0]->accumulate(gx);
    }
    if (wants(self, 1)) {
      Tensor gw(wv.shape());
      gw.matrix(wv.dim(0)).noalias() = xv.matrix(n).transpose() * g;
      self.inputs[1]->accumulate(gw);
    }
    if (wants(self, 2)) {
      Tensor gb(self.inputs[2]->value.shape());
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), g.cols()) = g.colwise().sum();
      self.inputs[2]->accumulate(gb);
    }
  });
}

Var softmax_rows(const Var& a) {
  require_rank(a, 2, "softmax_rows");
  const int n = a.dim(0);
  Tensor out = a.value();
  auto m = out.matrix(n);
  for (int i = 0; i < n; ++i) {
    const double mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
  return make_op(std::move(out), {a}, [](Node& self) {
    const int n = self.value.dim(0);
    auto y = self.value.matrix(n);
    auto g = self.grad.matrix(n);
    Tensor gx(self.value.shape());
    auto gm = gx.matrix(n);
    for (int i = 0; i < n; ++i) {
      const double dot = g.row(i).dot(y.row(i));
      gm.row(i) = y.row(i).array() * (g.row(i).array() - dot);
    }
    self.inputs[0]->accumulate(gx);
  });
}

Var layer_norm_rows(const Var& a, double eps) {
  require_rank(a, 2, "layer_norm_rows");
  const int n = a.dim(0), k = a.dim(1);
  Tensor out = a.value();
  std::vector<double> inv_std(static_cast<std::size_t>(n));
  auto m = out.matrix(n);
  for (int i = 0; i < n; ++i) {
    const double mean = m.row(i).mean();
    m.row(i).array() -= mean;
    const double var = m.row(i).squaredNorm() / k;
    inv_std[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(var + eps);
    m.row(i) *= inv_std[static_cast<std::size_t>(i)];
  }
  return make_op(std::move(out), {a}, [inv_std](Node& self) {
    const int n = self.value.dim(0);
    auto xhat = self.value.matrix(n);
    auto g = self.grad.matrix(n);
    Tensor gx(self.value.shape());
    auto gm = gx.matrix(n);
    const double k = static_cast<double>(xhat.cols());
    for (int i = 0; i < n; ++i) {
      const double mg = g.row(i).sum() / k;
      const double mgx = g.row(i).dot(xhat.row(i)) / k;
      gm.row(i) = inv_std[static_cast<std::size_t>(i)] *
                  (g.row(i).array() - mg - xhat.row(i).array() * mgx);
    }
    self.inputs[0]->accumulate(gx);
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  require_rank(a, 2, "l2_normalize_rows");
  const int n = a.dim(0);
  Tensor out = a.value();
  std::vector<double> norms(static_cast<std::size_t>(n));
  auto m = out.matrix(n);
  for (int i = 0; i < n; ++i) {
    norms[static_cast<std::size_t>(i)] = std::max(m.row(i).norm(), eps);
    m.row(i) /= norms[static_cast<std::size_t>(i)];
  }
  return make_op(std::move(out), {a}, [norms](Node& self) {
    const int n = self.value.dim(0);
    auto y = self.value.matrix(n);
    auto g = self.grad.matrix(n);
    Tensor gx(self.value.shape());
    auto gm = gx.matrix(n);
    for (int i = 0; i < n; ++i)
      gm.row(i) = (g.row(i) - y.row(i) * y.row(i).dot(g.row(i))) / norms[static_cast<std::size_t>(i)];
    self.inputs[0]->accumulate(gx);
  });
}

Var row_norms(const Var& a) {
  require_rank(a, 2, "row_norms");
  const int n = a.dim(0);
  Tensor out({n});
  auto m = a.value().matrix(n);
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = m.row(i).norm();
  return make_op(std::move(out), {a}, [](Node& self) {
    const Tensor& x = self.inputs[0]->value;
    const int n = x.dim(0);
    Tensor gx(x.shape());
    auto gm = gx.matrix(n);
    auto xm = x.matrix(n);
    for (int i = 0; i < n; ++i) {
      const double r = self.value[static_cast<std::size_t>(i)];
      if (r > 0) gm.row(i) = xm.row(i) * (self.grad[static_cast<std::size_t>(i)] / r);
    }
    self.inputs[0]->accumulate(gx);
  });
}

Var mean_rows(const Var& a) {
  require_rank(a, 2, "mean_rows");
  const int n = a.dim(0);
  if (n == 0) throw ContractError("mean_rows: empty input");
  Tensor out({1, a.dim(1)});
  Eigen::Map<Eigen::RowVectorXd>(out.data(), a.dim(1)) = a.value().matrix(n).colwise().mean();
  return make_op(std::move(out), {a}, [](Node& self) {
    const Tensor& x = self.inputs[0]->value;
    const int n = x.dim(0);
    Tensor gx(x.shape());
    Eigen::Map<const Eigen::RowVectorXd> g(self.grad.data(), x.dim(1));
    gx.matrix(n).rowwise() = g / static_cast<double>(n);
    self.inputs[0]->accumulate(gx);
  });
}

Var scalar_affine(const Var& x, const Var& w, const Var& b) {
  if (w.value().size() != 1 || b.value().size() != 1)
    throw ContractError("scalar_affine: w and b must hold one element");
  const double wv = w.value()[0], bv = b.value()[0];
  Tensor out = x.value();
  for (auto& v : out.values()) v = v * wv + bv;
  return make_op(std::move(out), {x, w, b}, [](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const double wv = self.inputs[1]->value[0];
    if (wants(self, 0)) {
      Tensor g = self.grad;
      for (auto& v : g.values()) v *= wv;
      self.inputs[0]->accumulate(g);
    }
    double gw = 0, gb = 0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      gw += self.grad[i] * xv[i];
      gb += self.grad[i];
    }
    if (wants(self, 1)) self.inputs[1]->accumulate(Tensor(self.inputs[1]->value.shape(), gw));
    if (wants(self, 2)) self.inputs[2]->accumulate(Tensor(self.inputs[2]->value.shape(), gb));
  });
}

namespace {

struct ConvGeometry {
  int n, h, w, c, kernel, stride, pad, oh, ow;
  bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
  std::size_t patch() const { return static_cast<std::size_t>(kernel) * kernel * c; }
  std::size_t rows() const { return static_cast<std::size_t>(n) * oh * ow; }
};

// cols: [n*oh*ow, k*k*c], patch order (ky, kx, c).
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t patch = g.patch();
  for (int b = 0; b < g.n; ++b)
    for (int oy = 0; oy < g.oh; ++oy)
      for (int ox = 0; ox < g.ow; ++ox) {
        double* row = cols + ((static_cast<std::size_t>(b) * g.oh + oy) * g.ow + ox) * patch;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            double* dst = row + (static_cast<std::size_t>(ky) * g.kernel + kx) * g.c;
            if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
              std::fill_n(dst, g.c, 0.0);
            } else {
              std::copy_n(x + ((static_cast<std::size_t>(b) * g.h + iy) * g.w + ix) * g.c, g.c, dst);
            }
          }
        }
      }
}

void col2im(const ConvGeometry& g, const double* cols, double* dx) {
  const std::size_t patch = g.patch();
  for (int b = 0; b < g.n; ++b)
    for (int oy = 0; oy < g.oh; ++oy)
      for (int ox = 0; ox < g.ow; ++ox) {
        const double* row = cols + ((static_cast<std::size_t>(b) * g.oh + oy) * g.ow + ox) * patch;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            const double* src = row + (static_cast<std::size_t>(ky) * g.kernel + kx) * g.c;
            double* dst = dx + ((static_cast<std::size_t>(b) * g.h + iy) * g.w + ix) * g.c;
            for (int ch = 0; ch < g.c; ++ch) dst[ch] += src[ch];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel, stride, pad, 0, 0};
  g.oh = (g.h + 2 * pad - kernel) / stride + 1;
  g.ow = (g.w + 2 * pad - kernel) / stride + 1;
  if (g.h + 2 * pad < kernel || g.w + 2 * pad < kernel)
    throw ContractError("conv2d: input " + shape_string(x.shape()) + " smaller than kernel");
  if (weight.value().rank() != 2 || static_cast<std::size_t>(weight.dim(0)) != g.patch())
    throw ContractError("conv2d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                        shape_string(x.shape()) + " and kernel " + std::to_string(kernel));
  const int out_c = weight.dim(1);
  if (bias.value().size() != static_cast<std::size_t>(out_c)) throw ContractError("conv2d: bias size");

  const auto rows = static_cast<Eigen::Index>(g.rows());
  const auto patch = static_cast<Eigen::Index>(g.patch());
  Tensor cols;
  if (!g.pointwise()) {
    cols = Tensor({static_cast<int>(rows), static_cast<int>(patch)});
    if (rows) im2col(g, x.value().data(), cols.data());
  }
  const double* col_ptr = g.pointwise() ? x.value().data() : cols.data();

  Tensor out({g.n, g.oh, g.ow, out_c});
  if (rows) {
    MatrixMap om(out.data(), rows, out_c);
    om.noalias() = ConstMatrixMap(col_ptr, rows, patch) * weight.value().matrix(weight.dim(0));
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(), out_c);
  }
  return make_op(std::move(out), {x, weight, bias}, [g, cols = std::move(cols)](Node& self) {
    const auto rows = static_cast<Eigen::Index>(g.rows());
    const auto patch = static_cast<Eigen::Index>(g.patch());
    if (!rows) return;
    const Tensor& wv = self.inputs[1]->value;
    const int out_c = wv.dim(1);
    ConstMatrixMap gout(self.grad.data(), rows, out_c);
    const double* col_ptr = g.pointwise() ? self.inputs[0]->value.data() : cols.data();
    ConstMatrixMap cm(col_ptr, rows, patch);
    if (wants(self, 1)) {
      Tensor gw(wv.shape());
      gw.matrix(wv.dim(0)).noalias() = cm.transpose() * gout;
      self.inputs[1]->accumulate(gw);
    }
    if (wants(self, 2)) {
      Tensor gb(self.inputs[2]->value.shape());
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), out_c) = gout.colwise().sum();
      self.inputs[2]->accumulate(gb);
    }
    if (wants(self, 0)) {
      Tensor gx(self.inputs[0]->value.shape());
      if (g.pointwise()) {
        MatrixMap(gx.data(), rows, patch).noalias() = gout * wv.matrix(wv.dim(0)).transpose();
      } else {
        RowMatrix gcols = gout * wv.matrix(wv.dim(0)).transpose();
        col2im(g, gcols.data(), gx.data());
      }
      self.inputs[0]->accumulate(gx);
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const int n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor out({n, c});
  for (int b = 0; b < n; ++b) {
    ConstMatrixMap m(x.value().data() + static_cast<std::size_t>(b) * hw * c, hw, c);
    Eigen::Map<Eigen::RowVectorXd>(out.data() + static_cast<std::size_t>(b) * c, c) =
        hw ? Eigen::RowVectorXd(m.colwise().mean()) : Eigen::RowVectorXd::Zero(c);
  }
  return make_op(std::move(out), {x}, [](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const int n = xv.dim(0), hw = xv.dim(1) * xv.dim(2), c = xv.dim(3);
    Tensor gx(xv.shape());
    for (int b = 0; b < n; ++b) {
      Eigen::Map<const Eigen::RowVectorXd> g(self.grad.data() + static_cast<std::size_t>(b) * c, c);
      MatrixMap(gx.data() + static_cast<std::size_t>(b) * hw * c, hw, c).rowwise() = g / hw;
    }
    self.inputs[0]->accumulate(gx);
  });
}

namespace {
struct Tap {
  std::uint32_t out;    // output cell index (region, y, x)
  std::uint32_t pixel;  // input pixel index (y, x)
  double weight;
};
}  // namespace

Var roi_align(const Var& features, std::span<const Box> boxes, double spatial_scale, int out_h,
              int out_w, int sampling_ratio) {
  require_rank(features, 4, "roi_align");
  if (features.dim(0) != 1) throw ContractError("roi_align: expects a single feature map");
  if (out_h <= 0 || out_w <= 0 || sampling_ratio <= 0) throw ContractError("roi_align: bad output size");
  const int h = features.dim(1), w = features.dim(2), c = features.dim(3);
  const int n = static_cast<int>(boxes.size());
  const int sr = sampling_ratio;
  const double inv_count = 1.0 / (sr * sr);

  std::vector<Tap> taps;
  taps.reserve(static_cast<std::size_t>(n) * out_h * out_w * sr * sr * 4);
  for (int r = 0; r < n; ++r) {
    const Box& b = boxes[static_cast<std::size_t>(r)];
    const double x0 = b.x1 * spatial_scale - 0.5, y0 = b.y1 * spatial_scale - 0.5;
    const double bin_w = (b.x2 - b.x1) * spatial_scale / out_w;
    const double bin_h = (b.y2 - b.y1) * spatial_scale / out_h;
    for (int py = 0; py < out_h; ++py)
      for (int px = 0; px < out_w; ++px) {
        const auto cell = static_cast<std::uint32_t>((r * out_h + py) * out_w + px);
        for (int iy = 0; iy < sr; ++iy)
          for (int ix = 0; ix < sr; ++ix) {
            double y = y0 + py * bin_h + (iy + 0.5) * bin_h / sr;
            double x = x0 + px * bin_w + (ix + 0.5) * bin_w / sr;
            if (y < -1.0 || y > h || x < -1.0 || x > w) continue;
            y = std::max(y, 0.0);
            x = std::max(x, 0.0);
            int ylo = static_cast<int>(y), xlo = static_cast<int>(x);
            int yhi = ylo + 1, xhi = xlo + 1;
            if (ylo >= h - 1) {
              ylo = yhi = h - 1;
              y = ylo;
            }
            if (xlo >= w - 1) {
              xlo = xhi = w - 1;
              x = xlo;
            }
            const double ly = y - ylo, lx = x - xlo, hy = 1 - ly, hx = 1 - lx;
            auto px_index = [w](int yy, int xx) { return static_cast<std::uint32_t>(yy * w + xx); };
            taps.push_back({cell, px_index(ylo, xlo), hy * hx * inv_count});
            taps.push_back({cell, px_index(ylo, xhi), hy * lx * inv_count});
            taps.push_back({cell, px_index(yhi, xlo), ly * hx * inv_count});
            taps.push_back({cell, px_index(yhi, xhi), ly * lx * inv_count});
          }
      }
  }

  Tensor out({n, out_h, out_w, c});
  const double* f = features.value().data();
  for (const auto& t : taps) {
    double* dst = out.data() + static_cast<std::size_t>(t.out) * c;
    const double* src = f + static_cast<std::size_t>(t.pixel) * c;
    for (int ch = 0; ch < c; ++ch) dst[ch] += t.weight * src[ch];
  }
  return make_op(std::move(out), {features}, [taps = std::move(taps)](Node& self) {
    const Tensor& fv = self.inputs[0]->value;
    const int c = fv.dim(3);
    Tensor gf(fv.shape());
    for (const auto& t : taps) {
      const double* src = self.grad.data() + static_cast<std::size_t>(t.out) * c;
      double* dst = gf.data() + static_cast<std::size_t>(t.pixel) * c;
      for (int ch = 0; ch < c; ++ch) dst[ch] += t.weight * src[ch];
    }
    self.inputs[0]->accumulate(gf);
  });
}

Var scalar_with_grads(double value, std::vector<Var> inputs, std::vector<Tensor> grads) {
  if (inputs.size() != grads.size()) throw ContractError("scalar_with_grads: inputs/grads mismatch");
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (inputs[i].value().size() != grads[i].size())
      throw ContractError("scalar_with_grads: gradient " + std::to_string(i) + " shape " +
                          shape_string(grads[i].shape()) + " vs input " + shape_string(inputs[i].shape()));
  return make_op(Tensor({1}, value), std::move(inputs), [grads = std::move(grads)](Node& self) {
    const double up = self.grad[0];
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      if (!wants(self, i)) continue;
      Tensor g = grads[i];
      for (auto& v : g.values()) v *= up;
      self.inputs[i]->accumulate(g);
    }
  });
}

}  // namespace clipvs::nn
