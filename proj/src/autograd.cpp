#include "npx/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>
#include <utility>

#include "npx/errors.hpp"

namespace npx::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

Var make_op(Tensor value, std::initializer_list<const Var*> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var* v : inputs) {
      if (v && v->defined() && v->requires_grad()) any = true;
    }
    if (any) {
      node->requires_grad = true;
      for (const Var* v : inputs) {
        if (v && v->defined()) node->parents.push_back(v->node());
      }
      node->backward = std::move(fn);
    }
  }
  return Var(std::move(node));
}

void require_rank(const Var& v, int rank, const char* op) {
  if (v.value().rank() != rank) {
    throw ValidationError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
                          shape_str(v.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  }
}

// Output columns [lo, hi) whose input index ox*stride - pad + kj lands inside [0, width).
inline void valid_span(int out_w, int width, int stride, int pad, int kj, int& lo, int& hi) {
  const int first = pad - kj;
  lo = first <= 0 ? 0 : std::min(out_w, (first + stride - 1) / stride);
  const int last = width - 1 + pad - kj;
  hi = last < 0 ? 0 : std::min(out_w, last / stride + 1);
  if (hi < lo) hi = lo;
}

// Unfolds a (C,H,W) image into a (C*k*k, Ho*Wo) matrix of receptive fields.
void im2col(const double* img, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, double* col) {
  const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < channels; ++c) {
    const double* src = img + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* dst = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * plane;
        int lo = 0, hi = 0;
        valid_span(out_w, width, stride, pad, kj, lo, hi);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ki;
          double* row = dst + static_cast<std::size_t>(oy) * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(row, row + out_w, 0.0);
            continue;
          }
          const double* srow = src + static_cast<std::size_t>(iy) * width;
          const int off = kj - pad;
          std::fill(row, row + lo, 0.0);
          if (stride == 1) {
            for (int ox = lo; ox < hi; ++ox) row[ox] = srow[ox + off];
          } else {
            for (int ox = lo; ox < hi; ++ox) row[ox] = srow[ox * stride + off];
          }
          std::fill(row + hi, row + out_w, 0.0);
        }
      }
    }
  }
}

// Adjoint of im2col: scatters columns back, accumulating into img.
void col2im(const double* col, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, double* img) {
  const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < channels; ++c) {
    double* dst = img + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* src = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * plane;
        int lo = 0, hi = 0;
        valid_span(out_w, width, stride, pad, kj, lo, hi);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= height) continue;
          const double* row = src + static_cast<std::size_t>(oy) * out_w;
          double* drow = dst + static_cast<std::size_t>(iy) * width;
          const int off = kj - pad;
          if (stride == 1) {
            for (int ox = lo; ox < hi; ++ox) drow[ox + off] += row[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) drow[ox * stride + off] += row[ox];
          }
        }
      }
    }
  }
}

template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
  Tensor out(x.shape());
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = f(xv[i]);
  auto px = x.node();
  return make_op(std::move(out), {&x}, [px, df](Node& self) {
    if (!px->requires_grad) return;
    Tensor& gx = px->ensure_grad();
    const auto& xv = px->value.data;
    const auto& yv = self.value.data;
    const auto& gy = self.grad.data;
    for (std::size_t i = 0; i < xv.size(); ++i) gx.data[i] += gy[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (grad.data.size() != value.data.size()) grad = Tensor(value.shape);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Var::item() const {
  if (node_->value.numel() != 1) {
    throw ValidationError("item() on tensor of shape " + shape_str(node_->value.shape));
  }
  return node_->value.data[0];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& loss) {
  if (loss.value().numel() != 1) throw ValidationError("backward() needs a scalar loss");
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.data.empty()) node->backward(*node);
  }
}

Var detach(const Var& v) { return Var(v.value(), false); }

int conv_output_size(int input, int kernel, int stride, int padding) {
  return (input + 2 * padding - kernel) / stride + 1;
}

int conv_transpose_output_size(int input, int kernel, int stride, int padding) {
  return (input - 1) * stride - 2 * padding + kernel;
}

namespace {

// Rows [c0, c0+rows) of each sample of an (N, C, plane) array, laid side by
// side as a (rows, N*plane) matrix.
void gather_batch(const double* src, int n_batch, int channels, int c0, int rows, int plane, double* dst) {
  const std::size_t width = static_cast<std::size_t>(n_batch) * plane;
  for (int n = 0; n < n_batch; ++n)
    for (int r = 0; r < rows; ++r)
      std::copy_n(src + (static_cast<std::size_t>(n) * channels + c0 + r) * plane, plane,
                  dst + r * width + static_cast<std::size_t>(n) * plane);
}

// Inverse layout of gather_batch, accumulating into dst.
void scatter_add_batch(const double* src, int n_batch, int channels, int c0, int rows, int plane, double* dst) {
  const std::size_t width = static_cast<std::size_t>(n_batch) * plane;
  for (int n = 0; n < n_batch; ++n)
    for (int r = 0; r < rows; ++r) {
      const double* s = src + r * width + static_cast<std::size_t>(n) * plane;
      double* d = dst + (static_cast<std::size_t>(n) * channels + c0 + r) * plane;
      for (int i = 0; i < plane; ++i) d[i] += s[i];
    }
}

void add_channel_bias(Tensor& out, const std::vector<double>& b) {
  const int n_batch = out.dim(0), channels = out.dim(1);
  const std::size_t plane = static_cast<std::size_t>(out.dim(2)) * out.dim(3);
  for (int n = 0; n < n_batch; ++n)
    for (int c = 0; c < channels; ++c) {
      double* o = out.ptr() + (static_cast<std::size_t>(n) * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) o[i] += b[c];
    }
}

void accumulate_bias_grad(const Tensor& g, Node& bias) {
  Tensor& db = bias.ensure_grad();
  const int n_batch = g.dim(0), channels = g.dim(1);
  const std::size_t plane = static_cast<std::size_t>(g.dim(2)) * g.dim(3);
  for (int n = 0; n < n_batch; ++n)
    for (int c = 0; c < channels; ++c) {
      const double* gp = g.ptr() + (static_cast<std::size_t>(n) * channels + c) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
      db.data[c] += acc;
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var* bias, const ConvGeometry& geo) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  const int n_batch = X.dim(0), c_in = X.dim(1), height = X.dim(2), width = X.dim(3);
  const int c_out = W.dim(0), c_group = W.dim(1), k = W.dim(2);
  const int groups = geo.groups, stride = geo.stride, pad = geo.padding;
  if (k != geo.kernel || W.dim(3) != k || c_group * groups != c_in || c_out % groups != 0) {
    throw ValidationError("conv2d: weight " + shape_str(W.shape) + " incompatible with input " +
                          shape_str(X.shape));
  }
  const int out_h = conv_output_size(height, k, stride, pad);
  const int out_w = conv_output_size(width, k, stride, pad);
  if (out_h < 1 || out_w < 1) throw ValidationError("conv2d: input " + shape_str(X.shape) + " too small");

  const int kk = c_group * k * k;
  const int plane = out_h * out_w;
  const int cout_g = c_out / groups;
  const std::size_t in_plane = static_cast<std::size_t>(height) * width;
  const std::size_t cols = static_cast<std::size_t>(n_batch) * plane;

  // Receptive fields of every sample for group g as a (kk, N*plane) matrix.
  auto unfold = [=](const double* xp, int g, double* col) {
    for (int n = 0; n < n_batch; ++n) {
      const double* xin = xp + (static_cast<std::size_t>(n) * c_in + g * c_group) * in_plane;
      std::vector<double> tmp(static_cast<std::size_t>(kk) * plane);
      im2col(xin, c_group, height, width, k, stride, pad, out_h, out_w, tmp.data());
      for (int r = 0; r < kk; ++r)
        std::copy_n(tmp.data() + static_cast<std::size_t>(r) * plane, plane,
                    col + r * cols + static_cast<std::size_t>(n) * plane);
    }
  };

  Tensor out({n_batch, c_out, out_h, out_w});
  std::vector<double> col(static_cast<std::size_t>(kk) * cols);
  std::vector<double> res(static_cast<std::size_t>(cout_g) * cols);
  for (int g = 0; g < groups; ++g) {
    if (n_batch == 1) {
      im2col(X.ptr() + static_cast<std::size_t>(g) * c_group * in_plane, c_group, height, width, k, stride, pad,
             out_h, out_w, col.data());
    } else {
      unfold(X.ptr(), g, col.data());
    }
    CMapRM cm(col.data(), kk, static_cast<Eigen::Index>(cols));
    CMapRM wm(W.ptr() + static_cast<std::size_t>(g) * cout_g * kk, cout_g, kk);
    MapRM rm(res.data(), cout_g, static_cast<Eigen::Index>(cols));
    rm.noalias() = wm * cm;
    scatter_add_batch(res.data(), n_batch, c_out, g * cout_g, cout_g, plane, out.ptr());
  }
  if (bias) add_channel_bias(out, bias->value().data);

  auto px = x.node(), pw = weight.node();
  auto pb = bias ? bias->node() : nullptr;
  return make_op(std::move(out), {&x, &weight, bias}, [=](Node& self) {
    const Tensor& X = px->value;
    const Tensor& W = pw->value;
    const Tensor& G = self.grad;
    Tensor* dx = px->requires_grad ? &px->ensure_grad() : nullptr;
    Tensor* dw = pw->requires_grad ? &pw->ensure_grad() : nullptr;
    std::vector<double> col(static_cast<std::size_t>(kk) * cols);
    std::vector<double> gmat(static_cast<std::size_t>(cout_g) * cols);
    std::vector<double> tmp(static_cast<std::size_t>(kk) * plane);
    for (int g = 0; g < groups; ++g) {
      gather_batch(G.ptr(), n_batch, c_out, g * cout_g, cout_g, plane, gmat.data());
      CMapRM gm(gmat.data(), cout_g, static_cast<Eigen::Index>(cols));
      CMapRM wm(W.ptr() + static_cast<std::size_t>(g) * cout_g * kk, cout_g, kk);
      if (dw) {
        unfold(X.ptr(), g, col.data());
        CMapRM cm(col.data(), kk, static_cast<Eigen::Index>(cols));
        MapRM dwm(dw->ptr() + static_cast<std::size_t>(g) * cout_g * kk, cout_g, kk);
        dwm.noalias() += gm * cm.transpose();
      }
      if (dx) {
        MapRM dcm(col.data(), kk, static_cast<Eigen::Index>(cols));
        dcm.noalias() = wm.transpose() * gm;
        for (int n = 0; n < n_batch; ++n) {
          for (int r = 0; r < kk; ++r)
            std::copy_n(col.data() + r * cols + static_cast<std::size_t>(n) * plane, plane,
                        tmp.data() + static_cast<std::size_t>(r) * plane);
          col2im(tmp.data(), c_group, height, width, k, stride, pad, out_h, out_w,
                 dx->ptr() + (static_cast<std::size_t>(n) * c_in + g * c_group) * in_plane);
        }
      }
    }
    if (pb && pb->requires_grad) accumulate_bias_grad(G, *pb);
  });
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var* bias, const ConvGeometry& geo) {
  require_rank(x, 4, "conv_transpose2d");
  require_rank(weight, 4, "conv_transpose2d weight");
  if (geo.groups != 1) throw ValidationError("conv_transpose2d: grouped transpose is not supported");
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  const int n_batch = X.dim(0), c_in = X.dim(1), height = X.dim(2), width = X.dim(3);
  const int c_out = W.dim(1), k = W.dim(2);
  const int stride = geo.stride, pad = geo.padding;
  if (W.dim(0) != c_in || k != geo.kernel || W.dim(3) != k) {
    throw ValidationError("conv_transpose2d: weight " + shape_str(W.shape) + " incompatible with input " +
                          shape_str(X.shape));
  }
  const int out_h = conv_transpose_output_size(height, k, stride, pad);
  const int out_w = conv_transpose_output_size(width, k, stride, pad);
  const int ckk = c_out * k * k;
  const int plane = height * width;
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  const std::size_t cols = static_cast<std::size_t>(n_batch) * plane;

  Tensor out({n_batch, c_out, out_h, out_w});
  {
    std::vector<double> xmat(static_cast<std::size_t>(c_in) * cols);
    gather_batch(X.ptr(), n_batch, c_in, 0, c_in, plane, xmat.data());
    std::vector<double> col(static_cast<std::size_t>(ckk) * cols);
    CMapRM wm(W.ptr(), c_in, ckk);
    MapRM cm(col.data(), ckk, static_cast<Eigen::Index>(cols));
    cm.noalias() = wm.transpose() * CMapRM(xmat.data(), c_in, static_cast<Eigen::Index>(cols));
    std::vector<double> tmp(static_cast<std::size_t>(ckk) * plane);
    for (int n = 0; n < n_batch; ++n) {
      for (int r = 0; r < ckk; ++r)
        std::copy_n(col.data() + r * cols + static_cast<std::size_t>(n) * plane, plane,
                    tmp.data() + static_cast<std::size_t>(r) * plane);
      col2im(tmp.data(), c_out, out_h, out_w, k, stride, pad, height, width,
             out.ptr() + static_cast<std::size_t>(n) * c_out * out_plane);
    }
  }
  if (bias) add_channel_bias(out, bias->value().data);

  auto px = x.node(), pw = weight.node();
  auto pb = bias ? bias->node() : nullptr;
  return make_op(std::move(out), {&x, &weight, bias}, [=](Node& self) {
    const Tensor& X = px->value;
    const Tensor& W = pw->value;
    const Tensor& G = self.grad;
    Tensor* dx = px->requires_grad ? &px->ensure_grad() : nullptr;
    Tensor* dw = pw->requires_grad ? &pw->ensure_grad() : nullptr;
    CMapRM wm(W.ptr(), c_in, ckk);
    std::vector<double> col(static_cast<std::size_t>(ckk) * cols);
    std::vector<double> tmp(static_cast<std::size_t>(ckk) * plane);
    for (int n = 0; n < n_batch; ++n) {
      im2col(G.ptr() + static_cast<std::size_t>(n) * c_out * out_plane, c_out, out_h, out_w, k, stride, pad,
             height, width, tmp.data());
      for (int r = 0; r < ckk; ++r)
        std::copy_n(tmp.data() + static_cast<std::size_t>(r) * plane, plane,
                    col.data() + r * cols + static_cast<std::size_t>(n) * plane);
    }
    CMapRM cm(col.data(), ckk, static_cast<Eigen::Index>(cols));
    if (dx) {
      std::vector<double> dxm(static_cast<std::size_t>(c_in) * cols);
      MapRM(dxm.data(), c_in, static_cast<Eigen::Index>(cols)).noalias() = wm * cm;
      scatter_add_batch(dxm.data(), n_batch, c_in, 0, c_in, plane, dx->ptr());
    }
    if (dw) {
      std::vector<double> xmat(static_cast<std::size_t>(c_in) * cols);
      gather_batch(X.ptr(), n_batch, c_in, 0, c_in, plane, xmat.data());
      MapRM dwm(dw->ptr(), c_in, ckk);
      dwm.noalias() += CMapRM(xmat.data(), c_in, static_cast<Eigen::Index>(cols)) * cm.transpose();
    }
    if (pb && pb->requires_grad) accumulate_bias_grad(G, *pb);
  });
}

Var linear(const Var& x, const Var& weight, const Var* bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const int n_batch = x.value().dim(0), features = x.value().dim(1);
  const int outputs = weight.value().dim(0);
  if (weight.value().dim(1) != features) {
    throw ValidationError("linear: weight " + shape_str(weight.shape()) + " incompatible with input " +
                          shape_str(x.shape()));
  }
  Tensor out({n_batch, outputs});
  CMapRM xm(x.value().ptr(), n_batch, features);
  CMapRM wm(weight.value().ptr(), outputs, features);
  MapRM om(out.ptr(), n_batch, outputs);
  om.noalias() = xm * wm.transpose();
  if (bias) {
    for (int n = 0; n < n_batch; ++n)
      for (int o = 0; o < outputs; ++o) out.data[static_cast<std::size_t>(n) * outputs + o] += bias->value().data[o];
  }
  auto px = x.node(), pw = weight.node();
  auto pb = bias ? bias->node() : nullptr;
  return make_op(std::move(out), {&x, &weight, bias}, [=](Node& self) {
    CMapRM gm(self.grad.ptr(), n_batch, outputs);
    if (px->requires_grad) {
      MapRM dxm(px->ensure_grad().ptr(), n_batch, features);
      CMapRM wm(pw->value.ptr(), outputs, features);
      dxm.noalias() += gm * wm;
    }
    if (pw->requires_grad) {
      MapRM dwm(pw->ensure_grad().ptr(), outputs, features);
      CMapRM xm(px->value.ptr(), n_batch, features);
      dwm.noalias() += gm.transpose() * xm;
    }
    if (pb && pb->requires_grad) {
      Tensor& db = pb->ensure_grad();
      for (int n = 0; n < n_batch; ++n)
        for (int o = 0; o < outputs; ++o) db.data[o] += self.grad.data[static_cast<std::size_t>(n) * outputs + o];
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState state, bool training,
               bool update_running) {
  require_rank(x, 4, "batch_norm");
  const Tensor& X = x.value();
  const int n_batch = X.dim(0), channels = X.dim(1);
  const std::size_t plane = static_cast<std::size_t>(X.dim(2)) * X.dim(3);
  const double count = static_cast<double>(n_batch) * static_cast<double>(plane);
  if (gamma.value().numel() != static_cast<std::size_t>(channels) ||
      state.running_mean.size() != static_cast<std::size_t>(channels)) {
    throw ValidationError("batch_norm: parameter size does not match channel count " + std::to_string(channels));
  }

  std::vector<double> mean(channels), inv_std(channels);
  if (training) {
    for (int c = 0; c < channels; ++c) {
      double s = 0.0;
      for (int n = 0; n < n_batch; ++n) {
        const double* p = X.ptr() + (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / count;
      double v = 0.0;
      for (int n = 0; n < n_batch; ++n) {
        const double* p = X.ptr() + (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      const double var = v / count;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      if (update_running) {
        const double unbiased = count > 1 ? v / (count - 1) : var;
        state.running_mean[c] =
            static_cast<float>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu);
        state.running_var[c] =
            static_cast<float>((1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
      }
    }
  } else {
    for (int c = 0; c < channels; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + state.eps);
    }
  }

  Tensor out(X.shape);
  Tensor xhat(X.shape);
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  for (int n = 0; n < n_batch; ++n)
    for (int c = 0; c < channels; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (X.data[off + i] - mean[c]) * inv_std[c];
        xhat.data[off + i] = h;
        out.data[off + i] = gv[c] * h + bv[c];
      }
    }

  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return make_op(std::move(out), {&x, &gamma, &beta},
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const auto& G = self.grad.data;
                   const auto& gv = pg->value.data;
                   for (int c = 0; c < channels; ++c) {
                     double sum_g = 0.0, sum_gx = 0.0;
                     for (int n = 0; n < n_batch; ++n) {
                       const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
                       for (std::size_t i = 0; i < plane; ++i) {
                         sum_g += G[off + i];
                         sum_gx += G[off + i] * xhat.data[off + i];
                       }
                     }
                     if (pg->requires_grad) pg->ensure_grad().data[c] += sum_gx;
                     if (pb->requires_grad) pb->ensure_grad().data[c] += sum_g;
                     if (!px->requires_grad) continue;
                     Tensor& dx = px->ensure_grad();
                     const double scale = gv[c] * inv_std[c];
                     for (int n = 0; n < n_batch; ++n) {
                       const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
                       for (std::size_t i = 0; i < plane; ++i) {
                         if (training) {
                           dx.data[off + i] +=
                               scale * (G[off + i] - sum_g / count - xhat.data[off + i] * sum_gx / count);
                         } else {
                           dx.data[off + i] += scale * G[off + i];
                         }
                       }
                     }
                   }
                 });
}

Var max_pool2d(const Var& x, int kernel, int stride, int padding) {
  require_rank(x, 4, "max_pool2d");
  const Tensor& X = x.value();
  const int n_batch = X.dim(0), channels = X.dim(1), height = X.dim(2), width = X.dim(3);
  const int out_h = conv_output_size(height, kernel, stride, padding);
  const int out_w = conv_output_size(width, kernel, stride, padding);
  if (out_h < 1 || out_w < 1) throw ValidationError("max_pool2d: input " + shape_str(X.shape) + " too small");
  Tensor out({n_batch, channels, out_h, out_w});
  std::vector<std::size_t> argmax(out.numel());
  std::size_t o = 0;
  for (int n = 0; n < n_batch; ++n)
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * height * width;
      for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = base;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= height) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= width) continue;
              const std::size_t idx = base + static_cast<std::size_t>(iy) * width + ix;
              if (X.data[idx] > best) {
                best = X.data[idx];
                best_i = idx;
              }
            }
          }
          out.data[o] = best;
          argmax[o] = best_i;
        }
    }
  auto px = x.node();
  return make_op(std::move(out), {&x}, [px, argmax = std::move(argmax)](Node& self) {
    Tensor& dx = px->ensure_grad();
    for (std::size_t i = 0; i < argmax.size(); ++i) dx.data[argmax[i]] += self.grad.data[i];
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const Tensor& X = x.value();
  const int n_batch = X.dim(0), channels = X.dim(1);
  const std::size_t plane = static_cast<std::size_t>(X.dim(2)) * X.dim(3);
  Tensor out({n_batch, channels});
  for (std::size_t nc = 0; nc < out.numel(); ++nc) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += X.data[nc * plane + i];
    out.data[nc] = s / static_cast<double>(plane);
  }
  auto px = x.node();
  return make_op(std::move(out), {&x}, [px, plane](Node& self) {
    Tensor& dx = px->ensure_grad();
    for (std::size_t nc = 0; nc < self.grad.numel(); ++nc) {
      const double g = self.grad.data[nc] / static_cast<double>(plane);
      for (std::size_t i = 0; i < plane; ++i) dx.data[nc * plane + i] += g;
    }
  });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Var tanh(const Var& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& x) {
  static constexpr double lo = std::numeric_limits<double>::epsilon();
  static constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon();
  return unary(
      x, [](double v) { return std::clamp(1.0 / (1.0 + std::exp(-v)), lo, hi); },
      [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Var hardswish(const Var& x) {
  return unary(
      x, [](double v) { return v * std::clamp(v + 3.0, 0.0, 6.0) / 6.0; },
      [](double v, double) {
        if (v <= -3.0) return 0.0;
        if (v >= 3.0) return 1.0;
        return (2.0 * v + 3.0) / 6.0;
      });
}

Var hardsigmoid(const Var& x) {
  return unary(
      x, [](double v) { return std::clamp(v + 3.0, 0.0, 6.0) / 6.0; },
      [](double v, double) { return (v > -3.0 && v < 3.0) ? 1.0 / 6.0 : 0.0; });
}

Var dropout(const Var& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ValidationError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.value().numel());
  for (auto& m : mask) m = keep(rng) ? s : 0.0;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) out.data[i] = x.value().data[i] * mask[i];
  auto px = x.node();
  return make_op(std::move(out), {&x}, [px, mask = std::move(mask)](Node& self) {
    Tensor& dx = px->ensure_grad();
    for (std::size_t i = 0; i < mask.size(); ++i) dx.data[i] += self.grad.data[i] * mask[i];
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
  auto pa = a.node(), pb = b.node();
  return make_op(std::move(out), {&a, &b}, [pa, pb](Node& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      Tensor& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i];
    }
  });
}

Var scale(const Var& x, double k) {
  return unary(
      x, [k](double v) { return k * v; }, [k](double, double) { return k; });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.dim(0) != B.dim(0) || A.dim(2) != B.dim(2) || A.dim(3) != B.dim(3)) {
    throw ValidationError("concat_channels: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  }
  const int n_batch = A.dim(0), ca = A.dim(1), cb = B.dim(1);
  const std::size_t plane = static_cast<std::size_t>(A.dim(2)) * A.dim(3);
  Tensor out({n_batch, ca + cb, A.dim(2), A.dim(3)});
  for (int n = 0; n < n_batch; ++n) {
    std::copy_n(A.ptr() + n * ca * plane, ca * plane, out.ptr() + n * (ca + cb) * plane);
    std::copy_n(B.ptr() + n * cb * plane, cb * plane, out.ptr() + (n * (ca + cb) + ca) * plane);
  }
  auto pa = a.node(), pb = b.node();
  return make_op(std::move(out), {&a, &b}, [=](Node& self) {
    for (int n = 0; n < n_batch; ++n) {
      const double* g = self.grad.ptr() + n * (ca + cb) * plane;
      if (pa->requires_grad) {
        double* d = pa->ensure_grad().ptr() + n * ca * plane;
        for (std::size_t i = 0; i < ca * plane; ++i) d[i] += g[i];
      }
      if (pb->requires_grad) {
        double* d = pb->ensure_grad().ptr() + n * cb * plane;
        for (std::size_t i = 0; i < cb * plane; ++i) d[i] += g[ca * plane + i];
      }
    }
  });
}

Var concat_batch(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != B.rank() || !std::equal(A.shape.begin() + 1, A.shape.end(), B.shape.begin() + 1)) {
    throw ValidationError("concat_batch: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  }
  Shape shape = A.shape;
  shape[0] += B.dim(0);
  Tensor out(shape);
  std::copy(A.data.begin(), A.data.end(), out.data.begin());
  std::copy(B.data.begin(), B.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(A.numel()));
  auto pa = a.node(), pb = b.node();
  const std::size_t na = A.numel();
  return make_op(std::move(out), {&a, &b}, [pa, pb, na](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[na + i];
    }
  });
}

Var slice_batch(const Var& x, int begin, int end) {
  const Tensor& X = x.value();
  if (begin < 0 || end > X.dim(0) || begin >= end) throw ValidationError("slice_batch: bad range");
  Shape shape = X.shape;
  shape[0] = end - begin;
  const std::size_t row = X.numel() / static_cast<std::size_t>(X.dim(0));
  Tensor out(shape);
  std::copy_n(X.ptr() + begin * row, out.numel(), out.ptr());
  auto px = x.node();
  const std::size_t off = begin * row;
  return make_op(std::move(out), {&x}, [px, off](Node& self) {
    Tensor& g = px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) g.data[off + i] += self.grad.data[i];
  });
}

Var channel_scale(const Var& x, const Var& s) {
  require_rank(x, 4, "channel_scale");
  require_rank(s, 2, "channel_scale");
  const Tensor& X = x.value();
  if (s.value().dim(0) != X.dim(0) || s.value().dim(1) != X.dim(1)) {
    throw ValidationError("channel_scale: scale " + shape_str(s.shape()) + " vs input " + shape_str(X.shape));
  }
  const std::size_t nc = static_cast<std::size_t>(X.dim(0)) * X.dim(1);
  const std::size_t plane = static_cast<std::size_t>(X.dim(2)) * X.dim(3);
  Tensor out(X.shape);
  for (std::size_t j = 0; j < nc; ++j)
    for (std::size_t i = 0; i < plane; ++i) out.data[j * plane + i] = X.data[j * plane + i] * s.value().data[j];
  auto px = x.node(), ps = s.node();
  return make_op(std::move(out), {&x, &s}, [px, ps, nc, plane](Node& self) {
    for (std::size_t j = 0; j < nc; ++j) {
      const double* g = self.grad.ptr() + j * plane;
      if (px->requires_grad) {
        double* d = px->ensure_grad().ptr() + j * plane;
        for (std::size_t i = 0; i < plane; ++i) d[i] += g[i] * ps->value.data[j];
      }
      if (ps->requires_grad) {
        double acc = 0.0;
        const double* xv = px->value.ptr() + j * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += g[i] * xv[i];
        ps->ensure_grad().data[j] += acc;
      }
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  if (shape_numel(shape) != x.value().numel()) {
    throw ValidationError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto px = x.node();
  return make_op(Tensor(std::move(shape), x.value().data), {&x}, [px](Node& self) {
    if (!px->requires_grad) return;
    Tensor& gx = px->ensure_grad();
    for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += self.grad.data[i];
  });
}

Var zero_like(const Var& x) { return scale(x, 0.0); }

Var mse_to_constant(const Var& x, double target) {
  const auto& xv = x.value().data;
  if (xv.empty()) throw ValidationError("mse_to_constant: empty input");
  double s = 0.0;
  for (double v : xv) s += (v - target) * (v - target);
  const double n = static_cast<double>(xv.size());
  auto px = x.node();
  return make_op(Tensor({1}, s / n), {&x}, [px, target, n](Node& self) {
    Tensor& g = px->ensure_grad();
    const double k = 2.0 * self.grad.data[0] / n;
    for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += k * (px->value.data[i] - target);
  });
}

Var l1(const Var& a, const Var& b) {
  require_same_shape(a, b, "l1");
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  if (av.empty()) throw ValidationError("l1: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  const double n = static_cast<double>(av.size());
  auto pa = a.node(), pb = b.node();
  return make_op(Tensor({1}, s / n), {&a, &b}, [pa, pb, n](Node& self) {
    const double k = self.grad.data[0] / n;
    const auto& av = pa->value.data;
    const auto& bv = pb->value.data;
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = av[i] - bv[i];
      const double sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      if (pa->requires_grad) pa->ensure_grad().data[i] += k * sg;
      if (pb->requires_grad) pb->ensure_grad().data[i] -= k * sg;
    }
  });
}

Var mean(const Var& x) {
  const auto& xv = x.value().data;
  if (xv.empty()) throw ValidationError("mean: empty input");
  double s = 0.0;
  for (double v : xv) s += v;
  const double n = static_cast<double>(xv.size());
  auto px = x.node();
  return make_op(Tensor({1}, s / n), {&x}, [px, n](Node& self) {
    Tensor& g = px->ensure_grad();
    for (auto& v : g.data) v += self.grad.data[0] / n;
  });
}

Var weighted_sum(const Var& a, double wa, const Var& b, double wb) {
  const double v = wa * a.item() + wb * b.item();
  auto pa = a.node(), pb = b.node();
  return make_op(Tensor({1}, v), {&a, &b}, [pa, pb, wa, wb](Node& self) {
    if (pa->requires_grad) pa->ensure_grad().data[0] += wa * self.grad.data[0];
    if (pb->requires_grad) pb->ensure_grad().data[0] += wb * self.grad.data[0];
  });
}

Var cosine_distance_rows(const Var& a, const Var& b) {
  require_rank(a, 2, "cosine_distance_rows");
  require_same_shape(a, b, "cosine_distance_rows");
  const int rows = a.value().dim(0), cols = a.value().dim(1);
  std::vector<double> na(rows), nb(rows), cosv(rows);
  Tensor out({rows});
  for (int r = 0; r < rows; ++r) {
    const double* x = a.value().ptr() + static_cast<std::size_t>(r) * cols;
    const double* y = b.value().ptr() + static_cast<std::size_t>(r) * cols;
    double dot = 0, xx = 0, yy = 0;
    for (int i = 0; i < cols; ++i) {
      dot += x[i] * y[i];
      xx += x[i] * x[i];
      yy += y[i] * y[i];
    }
    if (xx == 0.0 || yy == 0.0) throw ValidationError("cosine distance of a zero-norm embedding");
    na[r] = std::sqrt(xx);
    nb[r] = std::sqrt(yy);
    cosv[r] = dot / (na[r] * nb[r]);
    out.data[r] = 1.0 - cosv[r];
  }
  auto pa = a.node(), pb = b.node();
  return make_op(std::move(out), {&a, &b}, [=](Node& self) {
    for (int r = 0; r < rows; ++r) {
      const double g = self.grad.data[r];
      const double* x = pa->value.ptr() + static_cast<std::size_t>(r) * cols;
      const double* y = pb->value.ptr() + static_cast<std::size_t>(r) * cols;
      const double inv = 1.0 / (na[r] * nb[r]);
      if (pa->requires_grad) {
        double* d = pa->ensure_grad().ptr() + static_cast<std::size_t>(r) * cols;
        for (int i = 0; i < cols; ++i) d[i] -= g * (y[i] * inv - cosv[r] * x[i] / (na[r] * na[r]));
      }
      if (pb->requires_grad) {
        double* d = pb->ensure_grad().ptr() + static_cast<std::size_t>(r) * cols;
        for (int i = 0; i < cols; ++i) d[i] -= g * (x[i] * inv - cosv[r] * y[i] / (nb[r] * nb[r]));
      }
    }
  });
}

Var euclidean_distance_rows(const Var& a, const Var& b) {
  require_rank(a, 2, "euclidean_distance_rows");
  require_same_shape(a, b, "euclidean_distance_rows");
  const int rows = a.value().dim(0), cols = a.value().dim(1);
  Tensor out({rows});
  for (int r = 0; r < rows; ++r) {
    double s = 0;
    for (int i = 0; i < cols; ++i) {
      const double d = a.value().data[static_cast<std::size_t>(r) * cols + i] -
                       b.value().data[static_cast<std::size_t>(r) * cols + i];
      s += d * d;
    }
    out.data[r] = std::sqrt(s);
  }
  auto pa = a.node(), pb = b.node();
  return make_op(std::move(out), {&a, &b}, [=](Node& self) {
    for (int r = 0; r < rows; ++r) {
      const double dist = self.value.data[r];
      if (dist == 0.0) continue;
      const double g = self.grad.data[r] / dist;
      for (int i = 0; i < cols; ++i) {
        const std::size_t idx = static_cast<std::size_t>(r) * cols + i;
        const double diff = pa->value.data[idx] - pb->value.data[idx];
        if (pa->requires_grad) pa->ensure_grad().data[idx] += g * diff;
        if (pb->requires_grad) pb->ensure_grad().data[idx] -= g * diff;
      }
    }
  });
}

Var contrastive_loss(const Var& distances, std::span<const int> labels, double margin) {
  require_rank(distances, 1, "contrastive_loss");
  const std::size_t n = distances.value().numel();
  if (labels.size() != n || n == 0) throw ValidationError("contrastive_loss: label count mismatch");
  std::vector<int> y(labels.begin(), labels.end());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = distances.value().data[i];
    const double hinge = std::max(0.0, margin - d);
    s += (1 - y[i]) * d * d + y[i] * hinge * hinge;
  }
  auto pd = distances.node();
  return make_op(Tensor({1}, s / static_cast<double>(n)), {&distances}, [pd, y, margin, n](Node& self) {
    Tensor& g = pd->ensure_grad();
    const double k = self.grad.data[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = pd->value.data[i];
      const double dl = y[i] == 0 ? 2.0 * d : (d < margin ? -2.0 * (margin - d) : 0.0);
      g.data[i] += k * dl;
    }
  });
}

}  // namespace npx::ag
